"""Journey reweighting: a recurrent VAE over channel sequences, a domain
classifier on (user, latent) pairs, and the harmonic-mean sample weights
that approximate p(C) / p(C | u).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .data import Dataset, Journey
from .encoding import UserEmbed, UserEncoder, derive_rng, length_batches, pad_channels
from .nncore import (LSTM, MLP, Adam, Embedding, Linear, Module, NumericError, Tape, Tensor,
                     clip_grad_norm, ops)
from .nncore.ops import EPS_PROB

log = logging.getLogger(__name__)


@dataclass
class ReweightConfig:
    alpha: float = 0.5
    beta: float = 0.5
    d_z: int = 16
    hidden: int = 64
    emb_dim: int = 16
    n_layers: int = 3
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    grad_clip: float = 5.0
    teacher_forcing: bool = False
    # KL weight ramps linearly from 0 to beta over this many epochs
    kl_warmup: int = 10
    clf_hidden: int = 64
    clf_epochs: int = 20
    clf_batch_size: int = 256
    clf_holdout: float = 0.1
    # classifier learning rate decays linearly to lr * clf_lr_floor
    clf_lr_floor: float = 0.02
    # fresh latent draws for the classifier every epoch
    clf_resample: bool = True
    user_emb_dim: int = 8
    # "prior": negatives z ~ N(0, I) as written; "marginal": z drawn from the
    # posterior of a random other journey (the aggregate posterior)
    negatives: str = "marginal"
    samples: int = 32
    w_min: float = 0.1
    w_max: float = 10.0
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if not 0 < self.w_min <= self.w_max:
            raise ValueError("need 0 < w_min <= w_max")
        if self.d_z < 1:
            raise ValueError("d_z must be at least 1")
        if self.negatives not in ("prior", "marginal"):
            raise ValueError("negatives must be 'prior' or 'marginal'")


@dataclass
class LatentPosterior:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_sigma))):
            raise NumericError("non-finite posterior")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


# -- VRAE ----------------------------------------------------------------------

class Vrae(Module):
    """Embedding rows: 0..K-1 channels, K begin token, K+1 pad."""

    def __init__(self, n_channels: int, cfg: ReweightConfig, rng: np.random.Generator):
        k = n_channels
        self.n_channels = k
        self.begin, self.pad = k, k + 1
        self.embed = Embedding(k + 2, cfg.emb_dim, rng, "vrae.embed")
        self.enc = LSTM(cfg.emb_dim, cfg.hidden, cfg.n_layers, rng, "vrae.enc")
        self.mu = Linear(cfg.hidden, cfg.d_z, rng, "vrae.mu")
        self.log_sigma = Linear(cfg.hidden, cfg.d_z, rng, "vrae.log_sigma")
        self.z2h = Linear(cfg.d_z, cfg.hidden, rng, "vrae.z2h")
        self.dec = LSTM(cfg.emb_dim, cfg.hidden, cfg.n_layers, rng, "vrae.dec")
        self.out = Linear(cfg.hidden, k, rng, "vrae.out")

    def check_ids(self, ids: np.ndarray, mask: np.ndarray) -> None:
        real = ids[mask]
        if real.size and (real.min() < 0 or real.max() >= self.n_channels):
            raise IndexError(f"channel out of range [0, {self.n_channels})")

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        self.check_ids(ids, mask)
        emb = self.embed(ids)
        xs = [ops.index(emb, (slice(None), t)) for t in range(ids.shape[1])]
        _, (hs, _) = self.enc.run(xs, mask)
        h_top = hs[-1]
        return self.mu(h_top), self.log_sigma(h_top)

    def decode_steps(self, z: Tensor, steps: int, mask: np.ndarray | None = None,
                     teacher: np.ndarray | None = None) -> Tensor:
        """Decoder output distributions, shape (B, steps, K).

        Step 1 reads the begin token; later steps read the argmax of the
        previous step's distribution, or the true previous channel when
        ``teacher`` is given.
        """
        bsz = z.shape[0]
        h0 = ops.tanh(self.z2h(z))
        state = self.dec.initial_state(bsz, h0)
        prev = np.full(bsz, self.begin, dtype=np.int64)
        wo, bo = self.out.w.value, self.out.b.value
        outs = []
        for t in range(steps):
            x = self.embed(prev)
            top, state = self.dec.step(x, state, None if mask is None else mask[:, t])
            outs.append(top)
            if teacher is not None:
                prev = teacher[:, t].copy()
                if mask is not None:
                    prev[~mask[:, t]] = self.pad
            else:
                prev = np.argmax(top.value @ wo + bo, axis=-1)
        hid = ops.stack(outs, axis=1)
        return ops.softmax(self.out(hid))


def kl_standard_normal(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over rows and dims."""
    var = ops.exp(ops.scale(log_sigma, 2.0))
    inner = ops.sub(ops.add(ops.mul(mu, mu), var), ops.add(ops.scale(log_sigma, 2.0), 1.0))
    return ops.scale(ops.sum(inner), 0.5)


def vrae_loss(ids: np.ndarray, mask: np.ndarray, model: Vrae, alpha: float, beta: float,
              rng: np.random.Generator, teacher_forcing: bool = False, eps: np.ndarray | None = None):
    """alpha * summed token CE + beta * summed KL; returns (loss, per-token probs)."""
    if ids.shape[0] == 0:
        raise ValueError("empty batch")
    mu, log_sigma = model.encode(ids, mask)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    z = ops.add(mu, ops.mul(ops.exp(log_sigma), Tensor(eps)))
    probs = model.decode_steps(z, ids.shape[1], mask, ids if teacher_forcing else None)
    targets = np.where(mask, ids, 0)
    rec = ops.cross_entropy(probs, targets, mask.astype(float))
    kl = kl_standard_normal(mu, log_sigma)
    return ops.add(ops.scale(rec, alpha), ops.scale(kl, beta)), probs


def _ids(journeys: list[Journey], model: Vrae):
    return pad_channels(journeys, model.pad)


def vrae_encode(channels, model: Vrae) -> LatentPosterior:
    ids = np.asarray([list(channels)], dtype=np.int64)
    if ids.shape[1] < 1:
        raise ValueError("empty channel sequence")
    mu, ls = model.encode(ids, np.ones(ids.shape, dtype=bool))
    return LatentPosterior(mu.value[0], ls.value[0])


def encode_dataset(journeys: list[Journey], model: Vrae, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and log-sigmas for every journey, in input order."""
    n = len(journeys)
    mu = np.zeros((n, model.mu.b.shape[0]))
    ls = np.zeros_like(mu)
    for idx in length_batches([len(j) for j in journeys], batch_size, None):
        ids, mask = _ids([journeys[i] for i in idx], model)
        m, s = model.encode(ids, mask)
        mu[idx], ls[idx] = m.value, s.value
    return mu, ls


def vrae_decode(z, steps: int, model: Vrae) -> np.ndarray:
    """(steps, K) channel distributions for one latent vector."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    probs = model.decode_steps(Tensor(np.atleast_2d(np.asarray(z, dtype=float))), steps)
    return probs.value[0]


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def _check_loss(loss: Tensor, what: str, epoch: int, batch: int) -> float:
    val = float(loss.value)
    if not np.isfinite(val):
        raise NumericError(f"{what}: non-finite loss at epoch {epoch} batch {batch}")
    return val


def train_vrae(train: Dataset, cfg: ReweightConfig, epochs: int | None = None) -> tuple[Vrae, TrainHistory]:
    """Minimise the VRAE objective with Adam; logs reconstruction token accuracy per epoch."""
    model = Vrae(train.n_channels, cfg, derive_rng(cfg.seed, "vrae.init"))
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = derive_rng(cfg.seed, "vrae.train")
    hist = TrainHistory()
    journeys = train.journeys
    lengths = [len(j) for j in journeys]
    for epoch in range(cfg.epochs if epochs is None else epochs):
        total, hits, tokens = 0.0, 0, 0
        beta = cfg.beta * min(1.0, epoch / cfg.kl_warmup) if cfg.kl_warmup > 0 else cfg.beta
        for b, idx in enumerate(length_batches(lengths, cfg.batch_size, rng)):
            ids, mask = _ids([journeys[i] for i in idx], model)
            with Tape() as tape:
                loss, probs = vrae_loss(ids, mask, model, cfg.alpha, beta, rng, cfg.teacher_forcing)
            total += _check_loss(loss, "vrae", epoch, b)
            tape.backward(loss)
            clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            hits += int(np.sum((probs.value.argmax(-1) == ids) & mask))
            tokens += int(mask.sum())
        hist.loss.append(total)
        hist.accuracy.append(hits / tokens)
        log.info("vrae epoch %d loss %.4f recon-acc %.4f", epoch, total, hits / tokens)
    return model, hist


def reconstruction_accuracy(journeys: list[Journey], model: Vrae, use_mean: bool = True,
                            rng: np.random.Generator | None = None) -> float:
    hits = tokens = 0
    for idx in length_batches([len(j) for j in journeys], 512, None):
        ids, mask = _ids([journeys[i] for i in idx], model)
        mu, ls = model.encode(ids, mask)
        z = mu.value if use_mean else mu.value + np.exp(ls.value) * rng.standard_normal(mu.shape)
        probs = model.decode_steps(Tensor(z), ids.shape[1], mask)
        hits += int(np.sum((probs.value.argmax(-1) == ids) & mask))
        tokens += int(mask.sum())
    return hits / tokens


# -- domain classifier -----------------------------------------------------------

@dataclass
class DomainSamples:
    cat: np.ndarray
    num: np.ndarray
    z: np.ndarray
    label: np.ndarray  # 1 = real posterior draw, 0 = negative

    def __len__(self) -> int:
        return len(self.label)


def build_domain_samples(cat: np.ndarray, num: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray,
                         rng: np.random.Generator, negatives: str = "prior") -> DomainSamples:
    """One positive (u_i, z ~ q(z|c_i)) and one negative pair per journey."""
    n, d = mu.shape
    pos = mu + np.exp(log_sigma) * rng.standard_normal((n, d))
    if negatives == "prior":
        neg = rng.standard_normal((n, d))
    elif negatives == "marginal":
        src = rng.integers(0, n, size=n)
        neg = mu[src] + np.exp(log_sigma[src]) * rng.standard_normal((n, d))
    else:
        raise ValueError(f"unknown negatives mode {negatives!r}")
    return DomainSamples(np.concatenate([cat, cat]), np.concatenate([num, num]),
                         np.concatenate([pos, neg]), np.r_[np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])


class DomainClassifier(Module):
    """concat(user embedding, z) -> 4-layer ELU MLP -> (p(L=0), p(L=1))."""

    def __init__(self, encoder: UserEncoder, d_z: int, hidden: int, user_dim: int, rng: np.random.Generator):
        self.encoder = encoder
        self.user = UserEmbed(encoder, user_dim, rng, "clf.user")
        self.mlp = MLP([self.user.out_dim + d_z, hidden, hidden, hidden, 2], rng, "clf.mlp")

    def __call__(self, cat: np.ndarray, num: np.ndarray, z: np.ndarray) -> Tensor:
        x = ops.concat([self.user(cat, num), Tensor(z)], axis=-1)
        return ops.softmax(self.mlp(x))

    def predict(self, cat, num, z, batch: int = 8192) -> np.ndarray:
        out = [self(cat[i:i + batch], num[i:i + batch], z[i:i + batch]).value for i in range(0, len(z), batch)]
        return np.concatenate(out) if out else np.zeros((0, 2))


def domain_loss(samples: DomainSamples, idx: np.ndarray, clf: DomainClassifier) -> Tensor:
    probs = clf(samples.cat[idx], samples.num[idx], samples.z[idx])
    return ops.cross_entropy(probs, samples.label[idx])


def train_domain_classifier(samples: DomainSamples, encoder: UserEncoder, cfg: ReweightConfig,
                            resample=None) -> tuple[DomainClassifier, dict]:
    """Fit the classifier; reports held-out accuracy on a seeded split.

    ``resample`` (optional) returns fresh pairs for each epoch after the first,
    drawing new latent samples for the same journeys.
    """
    labels = samples.label
    if labels.sum() * 2 != len(labels):
        raise ValueError("domain samples must be balanced")
    d_z = samples.z.shape[1]
    clf = DomainClassifier(encoder, d_z, cfg.clf_hidden, cfg.user_emb_dim, derive_rng(cfg.seed, "clf.init"))
    opt = Adam(clf.parameters(), lr=cfg.lr)
    rng = derive_rng(cfg.seed, "clf.train")
    n = len(samples)
    perm = rng.permutation(n)
    n_hold = int(round(cfg.clf_holdout * n))
    hold, fit = perm[:n_hold], perm[n_hold:]
    curve = []
    for epoch in range(cfg.clf_epochs):
        if resample is not None and epoch > 0:
            samples = resample(rng)
        order = fit[rng.permutation(len(fit))]
        frac = epoch / max(cfg.clf_epochs - 1, 1)
        opt.lr = cfg.lr * (1.0 - (1.0 - cfg.clf_lr_floor) * frac)
        total = 0.0
        for b, i in enumerate(range(0, len(order), cfg.clf_batch_size)):
            idx = order[i:i + cfg.clf_batch_size]
            with Tape() as tape:
                loss = domain_loss(samples, idx, clf)
            total += _check_loss(loss, "domain classifier", epoch, b)
            tape.backward(loss)
            clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
        curve.append(total / max(len(fit), 1))
    acc = float("nan")
    if n_hold:
        p = clf.predict(samples.cat[hold], samples.num[hold], samples.z[hold])
        acc = float(np.mean(p.argmax(-1) == samples.label[hold]))
    log.info("domain classifier held-out accuracy %.4f", acc)
    return clf, {"holdout_accuracy": acc, "loss": curve}


def density_ratio(probs: np.ndarray) -> np.ndarray:
    """W_z = p(L=0 | u, z) / p(L=1 | u, z), both clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(probs, dtype=float), EPS_PROB, 1.0 - EPS_PROB)
    return p[..., 0] / p[..., 1]


# -- weights -------------------------------------------------------------------------

def harmonic_weight(inv_ratios: np.ndarray) -> np.ndarray:
    """w = 1 / mean_s(1 / W_z) along the last axis, given the 1/W_z values."""
    m = np.mean(inv_ratios, axis=-1)
    if not np.all(np.isfinite(m)) or np.any(m <= 0):
        raise NumericError("non-finite or non-positive harmonic mean in weight estimation")
    return 1.0 / m


def clip_and_normalize(raw: np.ndarray, w_min: float, w_max: float, normalize: bool = True):
    """Clip to [w_min, w_max] with mean 1.

    Clipping then rescaling would push values back out of bounds, so this
    finds the scale ``s`` with ``mean(clip(s * raw)) == 1`` and returns
    ``clip(s * raw)``; the result honours both constraints. Without
    ``normalize`` the raw values are only clipped.
    """
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)) or np.any(raw <= 0):
        raise NumericError("weights must be finite and positive")
    if not normalize:
        w = np.clip(raw, w_min, w_max)
        return w, (raw < w_min) | (raw > w_max)
    if not w_min <= 1.0 <= w_max:
        raise ValueError("mean-normalization needs w_min <= 1 <= w_max")

    def gap(log_s):
        return np.mean(np.clip(np.exp(log_s) * raw, w_min, w_max)) - 1.0

    lo = np.log(w_min / raw.max()) - 1.0
    hi = np.log(w_max / raw.min()) + 1.0
    log_s = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    scaled = np.exp(log_s) * raw
    w = np.clip(scaled, w_min, w_max)
    # brentq leaves a residual of order 1e-15; a final tiny rescale of the
    # interior points lands the mean on 1 without touching the bounds
    inner = (scaled > w_min) & (scaled < w_max)
    if inner.any():
        resid = len(w) - w.sum()
        w[inner] += resid * w[inner] / w[inner].sum()
        w = np.clip(w, w_min, w_max)
    return w, ~inner


@dataclass
class JourneyWeights:
    w: np.ndarray
    clip_hit: np.ndarray
    samples: int
    w_min: float
    w_max: float
    raw: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.w)) or np.any(self.w <= 0):
            raise NumericError("weights must be finite and positive")

    def save(self, path, meta: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            head = {"meta": dict(meta or {}, S=self.samples, w_min=self.w_min, w_max=self.w_max)}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for i, (w, hit) in enumerate(zip(self.w, self.clip_hit)):
                fh.write(json.dumps({"index": i, "w": float(w), "S": self.samples, "clip_hit": bool(hit)},
                                    sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> tuple["JourneyWeights", dict]:
        meta, rows = {}, []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if "meta" in obj:
                    meta = obj["meta"]
                else:
                    rows.append(obj)
        rows.sort(key=lambda r: r["index"])
        if [r["index"] for r in rows] != list(range(len(rows))):
            raise ValueError("weights file has missing or duplicate indices")
        w = np.array([r["w"] for r in rows])
        hit = np.array([r["clip_hit"] for r in rows], dtype=bool)
        s = int(meta.get("S", rows[0]["S"] if rows else 1))
        return cls(w, hit, s, float(meta.get("w_min", 0.0)), float(meta.get("w_max", np.inf))), meta


def posterior_draws(mu: np.ndarray, log_sigma: np.ndarray, samples: int, seed: int, offset: int = 0) -> np.ndarray:
    """(N, S, d) latent draws; journey i uses its own generator from (seed, offset + i)."""
    n, d = mu.shape
    eps = np.empty((n, samples, d))
    for i in range(n):
        eps[i] = derive_rng(seed, "weights", offset + i).standard_normal((samples, d))
    return mu[:, None, :] + np.exp(log_sigma)[:, None, :] * eps


def estimate_weights(cat: np.ndarray, num: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray,
                     clf: DomainClassifier, cfg: ReweightConfig, chunk: int = 1024) -> JourneyWeights:
    """Harmonic-mean weights over ``cfg.samples`` posterior draws per journey."""
    s = cfg.samples
    raw = np.empty(len(mu))
    for start in range(0, len(mu), chunk):
        sl = slice(start, start + chunk)
        z = posterior_draws(mu[sl], log_sigma[sl], s, cfg.seed, offset=start)
        n = z.shape[0]
        probs = clf.predict(np.repeat(cat[sl], s, axis=0), np.repeat(num[sl], s, axis=0), z.reshape(n * s, -1))
        inv = 1.0 / density_ratio(probs).reshape(n, s)
        raw[sl] = harmonic_weight(inv)
    w, hit = clip_and_normalize(raw, cfg.w_min, cfg.w_max, cfg.normalize)
    return JourneyWeights(w, hit, s, cfg.w_min, cfg.w_max, raw)


@dataclass
class Reweighter:
    vrae: Vrae
    clf: DomainClassifier
    encoder: UserEncoder
    config: ReweightConfig
    report: dict

    def state_dict(self) -> dict:
        out = {f"vrae/{k}": v for k, v in self.vrae.state_dict().items()}
        out.update({f"clf/{k}": v for k, v in self.clf.state_dict().items()})
        return out

    def meta(self) -> dict:
        return {"config": asdict(self.config), "encoder": self.encoder.to_meta(),
                "n_channels": self.vrae.n_channels}


def fit_reweighter(train: Dataset, cfg: ReweightConfig) -> tuple[Reweighter, JourneyWeights]:
    """VRAE, then domain samples, then classifier, then weights for every training journey."""
    vrae, vhist = train_vrae(train, cfg)
    mu, ls = encode_dataset(train.journeys, vrae)
    encoder = UserEncoder.fit(train)
    cat, num = encoder.encode(train.journeys)
    rng = derive_rng(cfg.seed, "domain.samples")
    samples = build_domain_samples(cat, num, mu, ls, rng, cfg.negatives)
    resample = None
    if cfg.clf_resample:
        def resample(r):
            return build_domain_samples(cat, num, mu, ls, r, cfg.negatives)
    clf, creport = train_domain_classifier(samples, encoder, cfg, resample=resample)
    weights = estimate_weights(cat, num, mu, ls, clf, cfg)
    report = {"vrae_loss": vhist.loss, "vrae_accuracy": vhist.accuracy, **{f"clf_{k}": v for k, v in creport.items()}}
    return Reweighter(vrae, clf, encoder, cfg, report), weights
