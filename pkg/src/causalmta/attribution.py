"""Shapley credits per touchpoint: exact enumeration for short journeys,
permutation sampling for long ones, clamp-and-normalize, channel summary."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from math import factorial
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Journey
from .encoding import derive_rng

log = logging.getLogger(__name__)

# maps a list of journeys (possibly with no touchpoints) to p(convert) per journey
Predict = Callable[[Sequence[Journey]], np.ndarray]

MAX_SAMPLED_LEN = 62  # coalitions are int64 bitmasks


@dataclass
class ShapleyConfig:
    exact_max_len: int = 12
    n_permutations: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.exact_max_len < 1 or self.n_permutations < 1:
            raise ValueError("exact_max_len and n_permutations must be at least 1")


@dataclass
class TouchpointCredit:
    sv: float
    credit: float


def sub_journey(journey: Journey, mask: int) -> Journey:
    """Touchpoints whose bit is set, in original order with their own
    timestamps and features."""
    tps = tuple(tp for t, tp in enumerate(journey.touchpoints) if mask >> t & 1)
    return Journey(journey.user_id, journey.user_attrs, tps, journey.converted)


def coalition_values(journey: Journey, masks: np.ndarray, predict: Predict) -> np.ndarray:
    return np.asarray(predict([sub_journey(journey, int(m)) for m in masks]), dtype=float)


def shapley_weights(n: int) -> np.ndarray:
    """|S|! (n - |S| - 1)! / n! for |S| = 0..n-1."""
    return np.array([factorial(s) * factorial(n - s - 1) / factorial(n) for s in range(n)])


def shapley_from_table(values: np.ndarray) -> np.ndarray:
    """Exact Shapley values from all 2^T coalition values indexed by bitmask."""
    n_masks = len(values)
    t_len = n_masks.bit_length() - 1
    if 1 << t_len != n_masks:
        raise ValueError("value table must have 2^T entries")
    masks = np.arange(n_masks)
    sizes = np.array([bin(m).count("1") for m in range(n_masks)])
    wts = shapley_weights(t_len) if t_len else np.zeros(0)
    sv = np.empty(t_len)
    for t in range(t_len):
        without = masks[(masks >> t & 1) == 0]
        sv[t] = np.sum(wts[sizes[without]] * (values[without | (1 << t)] - values[without]))
    return sv


def shapley_exact(journey: Journey, predict: Predict, config: ShapleyConfig | None = None) -> np.ndarray:
    cfg = config or ShapleyConfig()
    t_len = len(journey)
    if t_len > cfg.exact_max_len:
        raise ValueError(f"journey length {t_len} exceeds exact_max_len={cfg.exact_max_len}; use shapley_sampled")
    values = coalition_values(journey, np.arange(1 << t_len), predict)
    return shapley_from_table(values)


def shapley_sampled(journey: Journey, predict: Predict, config: ShapleyConfig | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Average marginal contribution over uniform random orderings.

    Coalitions reached by several orderings are evaluated once.
    """
    cfg = config or ShapleyConfig()
    t_len = len(journey)
    if t_len > MAX_SAMPLED_LEN:
        raise ValueError(f"journeys longer than {MAX_SAMPLED_LEN} are not supported")
    rng = rng or derive_rng(cfg.seed, "shapley")
    perms = np.stack([rng.permutation(t_len) for _ in range(cfg.n_permutations)])
    prefix = np.zeros((cfg.n_permutations, t_len + 1), dtype=np.int64)
    prefix[:, 1:] = np.cumsum(np.left_shift(np.int64(1), perms.astype(np.int64)), axis=1)
    uniq, inv = np.unique(prefix, return_inverse=True)
    vals = coalition_values(journey, uniq, predict)[inv.reshape(prefix.shape)]
    marg = vals[:, 1:] - vals[:, :-1]
    return np.bincount(perms.ravel(), weights=marg.ravel(), minlength=t_len) / cfg.n_permutations


def normalize_credits(svs) -> np.ndarray:
    """max(0, SV) normalized to sum 1; uniform when nothing is positive."""
    sv = np.asarray(svs, dtype=float)
    if sv.size == 0:
        return sv
    pos = np.maximum(sv, 0.0)
    total = pos.sum()
    if total <= 0:
        return np.full(sv.size, 1.0 / sv.size)
    return pos / total


@dataclass
class JourneyAttribution:
    index: int
    regime: str
    sv: np.ndarray
    credit: np.ndarray

    def to_dict(self) -> dict:
        return {"index": self.index, "regime": self.regime, "sv": [float(x) for x in self.sv],
                "credit": [float(x) for x in self.credit]}


@dataclass
class ChannelCreditReport:
    mean_credit: np.ndarray  # per channel, averaged over the selected journeys
    n: np.ndarray            # selected journeys that contain the channel

    def to_rows(self) -> list[dict]:
        return [{"channel": k, "mean_credit": float(m), "n": int(c)}
                for k, (m, c) in enumerate(zip(self.mean_credit, self.n))]


@dataclass
class AttributionResult:
    journeys: list[JourneyAttribution] = field(default_factory=list)
    report: ChannelCreditReport | None = None

    def credits_for(self, n: int) -> list[np.ndarray | None]:
        """Credit vectors aligned to dataset indices (None where not attributed)."""
        out: list[np.ndarray | None] = [None] * n
        for r in self.journeys:
            out[r.index] = r.credit
        return out

    def save_jsonl(self, path, meta: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if meta is not None:
                fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
            for r in self.journeys:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

    def save_report_csv(self, path, comment: str | None = None) -> None:
        """``comment`` becomes a leading ``#`` line (e.g. provenance hashes)."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["channel", "mean_credit", "n"])
            for row in self.report.to_rows():
                w.writerow([row["channel"], repr(row["mean_credit"]), row["n"]])

    @classmethod
    def load_jsonl(cls, path) -> tuple["AttributionResult", dict]:
        meta, rows = {}, []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if "meta" in obj:
                    meta = obj["meta"]
                else:
                    rows.append(JourneyAttribution(obj["index"], obj["regime"], np.array(obj["sv"], dtype=float),
                                                   np.array(obj["credit"], dtype=float)))
        return cls(rows), meta


def attribute_dataset(ds: Dataset, predict: Predict, config: ShapleyConfig | None = None,
                      converted_only: bool = True) -> AttributionResult:
    """Credits for every selected journey plus the per-channel summary.

    A channel's mean credit is the average, over selected journeys, of the
    credit its touchpoints received (zero where absent), so the means sum
    to one across channels.
    """
    cfg = config or ShapleyConfig()
    result = AttributionResult()
    tot = np.zeros(ds.n_channels)
    seen = np.zeros(ds.n_channels, dtype=np.int64)
    for i, j in enumerate(ds):
        if converted_only and not j.converted:
            continue
        if len(j) <= cfg.exact_max_len:
            regime, sv = "exact", shapley_exact(j, predict, cfg)
        else:
            regime, sv = "sampled", shapley_sampled(j, predict, cfg, derive_rng(cfg.seed, "shapley", i))
        credit = normalize_credits(sv)
        result.journeys.append(JourneyAttribution(i, regime, sv, credit))
        np.add.at(tot, j.channels, credit)
        seen[np.unique(j.channels)] += 1
    n_sel = len(result.journeys)
    if n_sel == 0:
        log.warning("no journeys selected for attribution")
    result.report = ChannelCreditReport(tot / max(n_sel, 1), seen)
    return result


def model_predict(model) -> Predict:
    """Adapter from a trained predictor to the ``Predict`` signature."""
    from .predictor import predict_conversion

    return lambda journeys: predict_conversion(journeys, model)
