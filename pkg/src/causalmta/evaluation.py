"""Metrics, simple baselines, budget replay, and exact checks of the
reweighting and reverse-loss identities."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit, xlogy

from .data import Dataset, Journey, journey_costs
from .encoding import derive_rng
from .nncore.ops import EPS_PROB

log = logging.getLogger(__name__)


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsReport:
    auc: float
    logloss: float
    n: int

    def to_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss, "n": self.n}


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied pairs count one half."""
    s = np.asarray(scores, dtype=float)
    y = _labels(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = stats.rankdata(s)  # average ranks, so ties split evenly
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=float), EPS_PROB, 1.0 - EPS_PROB)
    y = _labels(labels)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def metrics(scores, labels) -> MetricsReport:
    return MetricsReport(auc(scores, labels), logloss(scores, labels), len(labels))


# -- baselines -----------------------------------------------------------------

def sp_rates(train: Dataset) -> np.ndarray:
    """Pr(y=1 | c=k): conversion rate of training journeys that contain channel k."""
    seen = np.zeros(train.n_channels)
    conv = np.zeros(train.n_channels)
    for j in train:
        ks = np.unique(j.channels)
        seen[ks] += 1
        conv[ks] += j.converted
    return np.divide(conv, seen, out=np.zeros_like(conv), where=seen > 0)


def sp_predict(journey: Journey, rates) -> float:
    """Noisy-or over the journey's touchpoints."""
    r = np.asarray(rates, dtype=float)[journey.channels]
    return float(1.0 - np.prod(1.0 - r))


@dataclass
class LogisticModel:
    coef: np.ndarray  # channel counts first, then user one-hots
    intercept: float
    n_channels: int
    user_levels: dict[str, list[str]]

    @property
    def channel_coef(self) -> np.ndarray:
        return self.coef[: self.n_channels]


def _lr_design(journeys, n_channels: int, levels: dict[str, list[str]]) -> np.ndarray:
    width = n_channels + sum(len(v) for v in levels.values())
    x = np.zeros((len(journeys), width))
    for i, j in enumerate(journeys):
        np.add.at(x[i], j.channels, 1.0)
        off = n_channels
        for f, vals in levels.items():
            v = str(j.user_attrs.get(f))
            if v in vals:
                x[i, off + vals.index(v)] = 1.0
            off += len(vals)
    return x


def lr_fit(train: Dataset, epochs: int = 200, lr: float = 0.1, batch_size: int | None = None,
           l2: float = 0.0, seed: int = 0) -> LogisticModel:
    """Logistic regression on channel counts plus one-hot categorical user
    attributes, fitted by (minibatch) gradient descent from zero."""
    levels = {f: sorted({str(j.user_attrs.get(f)) for j in train})
              for f, kind in sorted(train.user_schema.items()) if kind == "categorical"}
    x = _lr_design(train.journeys, train.n_channels, levels)
    y = train.labels.astype(float)
    w = np.zeros(x.shape[1])
    b = 0.0
    rng = derive_rng(seed, "lr")
    bs = batch_size or len(y)
    for _ in range(epochs):
        order = rng.permutation(len(y)) if batch_size else np.arange(len(y))
        for i in range(0, len(y), bs):
            idx = order[i:i + bs]
            err = expit(x[idx] @ w + b) - y[idx]
            w -= lr * (x[idx].T @ err / len(idx) + l2 * w)
            b -= lr * float(err.mean())
    return LogisticModel(w, b, train.n_channels, levels)


def lr_predict(journeys, model: LogisticModel) -> np.ndarray:
    x = _lr_design(list(journeys), model.n_channels, model.user_levels)
    return expit(x @ model.coef + model.intercept)


def last_touch(journey: Journey) -> np.ndarray:
    if len(journey) < 1:
        raise ValueError("journey has no touchpoints")
    a = np.zeros(len(journey))
    a[-1] = 1.0
    return a


# -- ROI and replay ----------------------------------------------------------------

@dataclass
class ChannelROI:
    value: np.ndarray
    cost: np.ndarray  # scaled
    roi: np.ndarray   # inf where a channel has no cost
    weights: np.ndarray

    def to_rows(self) -> list[dict]:
        return [{"channel": k, "value": float(v), "cost": float(c),
                 "roi": None if not np.isfinite(r) else float(r), "budget_weight": float(w)}
                for k, (v, c, r, w) in enumerate(zip(self.value, self.cost, self.roi, self.weights))]


def channel_roi(journeys, credits, n_channels: int, costs=None, value: float = 1.0,
                cost_scale: float = 1000.0) -> ChannelROI:
    """ROI per channel from credits on converted journeys.

    ``costs`` is a per-journey list of per-touchpoint costs; when omitted the
    costs stored on the touchpoints are used (1 where absent).
    """
    journeys = list(journeys)
    if len(credits) != len(journeys):
        raise ValueError("credits must align with journeys")
    val = np.zeros(n_channels)
    spend = np.zeros(n_channels)
    for i, j in enumerate(journeys):
        c = journey_costs(j) if costs is None else np.asarray(costs[i], dtype=float)
        if np.any(c < 0):
            raise ValueError("costs must be non-negative")
        np.add.at(spend, j.channels, c)
        if j.converted:
            np.add.at(val, j.channels, np.asarray(credits[i], dtype=float) * value)
    spend *= cost_scale
    free = spend <= 0
    roi = np.divide(val, spend, out=np.full(n_channels, np.inf), where=~free)
    if free.any():
        log.warning("channels %s have zero cost; excluded from budget weights", np.flatnonzero(free).tolist())
    weights = np.where(free, 0.0, roi)
    total = weights.sum()
    if total > 0:
        weights = weights / total
    else:
        log.warning("no channel earned attributed value; budget split uniformly over costed channels")
        weights = np.where(free, 0.0, 1.0) / max(int((~free).sum()), 1)
    return ChannelROI(val, spend, roi, weights)


@dataclass
class ReplayReport:
    fraction: float
    selected: list[int]
    conversions: int
    spend: float       # scaled
    cpa: float | None  # None when there are no conversions
    cvr: float
    profit: float

    @property
    def n_selected(self) -> int:
        return len(self.selected)

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "selected": self.n_selected, "conversions": self.conversions,
                "spend": self.spend, "cpa": self.cpa, "cvr": self.cvr, "profit": self.profit}


def replay(test, budget_weights, fraction: float, costs=None, cost_scale: float = 1000.0,
           profit_value: float = 1.0, rel_tol: float = 1e-12) -> ReplayReport:
    """Admit whole journeys, earliest first touch first, while every channel
    budget can absorb the journey's spend on it.

    The total budget is ``fraction`` of the test set's total cost, split over
    channels by ``budget_weights``. ``rel_tol`` (relative to the total
    budget) absorbs float round-off when a budget is spent exactly.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    journeys = list(test)
    bw = np.asarray(budget_weights, dtype=float)
    per = [journey_costs(j) if costs is None else np.asarray(costs[i], dtype=float) for i, j in enumerate(journeys)]
    total = float(sum(c.sum() for c in per))
    budget = fraction * total * bw
    slack = rel_tol * fraction * total
    order = sorted(range(len(journeys)), key=lambda i: (journeys[i].touchpoints[0].ts, i))
    selected, conv, spent = [], 0, 0.0
    for i in order:
        need = np.zeros(len(bw))
        np.add.at(need, journeys[i].channels, per[i])
        if np.all(need <= budget + slack):
            budget = budget - need
            selected.append(i)
            conv += int(journeys[i].converted)
            spent += float(per[i].sum())
    scaled = spent * cost_scale
    cpa = scaled / conv if conv else None
    cvr = conv / len(selected) if selected else 0.0
    return ReplayReport(fraction, sorted(selected), conv, scaled, cpa, cvr, conv * profit_value - scaled)


# -- theory identities ------------------------------------------------------------------

def theory_jsd_identity(dists) -> tuple[float, float]:
    """Direct sum of the optimal reverse-branch objective against K*JSD - K log K."""
    p = np.asarray(dists, dtype=float)
    if p.ndim != 2 or np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("need a (K, n) array of distributions")
    k = p.shape[0]
    tot = p.sum(axis=0)
    lhs = float(sum(np.sum(xlogy(p[i], p[i]) - xlogy(p[i], np.where(p[i] > 0, tot, 1.0))) for i in range(k)))
    mix = tot / k
    kl = [np.sum(xlogy(p[i], p[i]) - xlogy(p[i], np.where(p[i] > 0, mix, 1.0))) for i in range(k)]
    jsd = float(np.mean(kl))
    return lhs, k * jsd - k * np.log(k)


def theory_reweight_equivalence(p_u, p_c_u, loss, weights=None) -> tuple[float, float]:
    """Exact counterfactual risk and weighted factual risk on a finite world.

    ``p_c_u`` is (U, C), ``loss`` (U, C) holds L(f(u, C), y(u, C)).
    ``weights`` defaults to p(C) / p(C | u).
    """
    p_u = np.asarray(p_u, dtype=float)
    p_c_u = np.asarray(p_c_u, dtype=float)
    loss = np.asarray(loss, dtype=float)
    p_c = p_u @ p_c_u
    if np.any((p_c_u == 0) & (p_c[None, :] > 0)):
        raise ValueError("positivity violated: p(C|u) = 0 where p(C) > 0")
    e_cf = float(np.sum(p_u[:, None] * p_c[None, :] * loss))
    w = p_c[None, :] / p_c_u if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), loss.shape)
    e_fw = float(np.sum(p_u[:, None] * p_c_u * loss * w))
    return e_cf, e_fw
