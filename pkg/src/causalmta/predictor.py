"""Conversion predictor with one-step channel offset, a gradient-reversed
channel head on every step, attention pooling, and a weighted conversion loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Journey
from .encoding import FeatureScaler, UserEmbed, UserEncoder, derive_rng, length_batches
from .nncore import LSTM, MLP, Adam, Embedding, Linear, Module, NumericError, Tape, Tensor, archive, clip_grad_norm, ops

log = logging.getLogger(__name__)

PLACEHOLDER = -1  # stands for c_0 in a shifted sequence; mapped to its own embedding row


@dataclass
class PredictorConfig:
    gamma: float = 0.5
    delta: float = 0.5
    lam: float = 1.0
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    grad_clip: float = 5.0
    emb_dim: int = 16
    feat_dim: int = 8
    hidden: int = 64
    n_layers: int = 3
    mlp_hidden: int = 64
    user_emb_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise ValueError("gamma and delta must be non-negative")
        if self.lam < 0:
            raise ValueError("GRL strength must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs or batch size")


def shift_channels(channels) -> list[int]:
    """[c1, ..., cT] -> [placeholder, c1, ..., c_{T-1}]."""
    channels = list(channels)
    if not channels:
        raise ValueError("cannot shift an empty channel sequence")
    return [PLACEHOLDER] + channels[:-1]


@dataclass
class PredictionOutput:
    p: float
    c_rev: np.ndarray  # (T, K)


@dataclass
class Batch:
    """Model-ready arrays. Row i has ``lengths[i]`` valid steps.

    A journey with no touchpoints (the empty coalition) becomes one
    placeholder step with all-zero raw features and no reverse target.
    """

    shifted: np.ndarray   # (B, T) embedding rows
    targets: np.ndarray   # (B, T) current channel, 0 where masked
    feats: np.ndarray     # (B, T, F) scaled
    mask: np.ndarray      # (B, T)
    rev_mask: np.ndarray  # (B, T) steps that carry a real current channel
    cat: np.ndarray
    num: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.shifted.shape[0]


class Predictor(Module):
    """Embedding rows: 0..K-1 channels, K placeholder c_0, K+1 pad."""

    def __init__(self, n_channels: int, n_features: int, encoder: UserEncoder, scaler: FeatureScaler,
                 cfg: PredictorConfig, rng: np.random.Generator):
        k = n_channels
        self.n_channels, self.n_features = k, n_features
        self.placeholder, self.pad = k, k + 1
        self.encoder, self.scaler, self.config = encoder, scaler, cfg
        self.embed = Embedding(k + 2, cfg.emb_dim, rng, "pred.embed")
        self.feat = Linear(n_features, cfg.feat_dim, rng, "pred.feat") if n_features else None
        self.user = UserEmbed(encoder, cfg.user_emb_dim, rng, "pred.user")
        d_in = cfg.emb_dim + (cfg.feat_dim if n_features else 0)
        self.lstm = LSTM(d_in, cfg.hidden, cfg.n_layers, rng, "pred.lstm")
        h = cfg.mlp_hidden
        self.rev = MLP([cfg.hidden, h, h, h, k], rng, "pred.rev")
        self.head = MLP([cfg.hidden + self.user.out_dim, h, h, h, 2], rng, "pred.head")

    # -- inputs --------------------------------------------------------------

    def batch(self, journeys: list[Journey], t_max: int | None = None) -> Batch:
        """Pad ``journeys`` into arrays; ``t_max`` may add extra masked steps."""
        lens = [max(len(j), 1) for j in journeys]
        t = max(lens) if t_max is None else t_max
        if t < max(lens):
            raise ValueError("t_max shorter than the longest journey")
        b = len(journeys)
        shifted = np.full((b, t), self.pad, dtype=np.int64)
        targets = np.zeros((b, t), dtype=np.int64)
        feats = np.zeros((b, t, self.n_features))
        mask = np.zeros((b, t), dtype=bool)
        rev_mask = np.zeros((b, t), dtype=bool)
        for i, j in enumerate(journeys):
            mask[i, :lens[i]] = True
            shifted[i, 0] = self.placeholder
            if not j.touchpoints:
                if self.n_features:
                    feats[i, 0] = self.scaler(np.zeros(self.n_features))
                continue
            ch = j.channels
            if min(ch) < 0 or max(ch) >= self.n_channels:
                raise IndexError(f"channel out of range [0, {self.n_channels})")
            shifted[i, 1:len(ch)] = ch[:-1]
            targets[i, :len(ch)] = ch
            rev_mask[i, :len(ch)] = True
            if self.n_features:
                feats[i, :len(ch)] = self.scaler(np.array([tp.features for tp in j.touchpoints], dtype=float))
        cat, num = self.encoder.encode(journeys)
        labels = np.array([int(j.converted) for j in journeys], dtype=np.int64)
        return Batch(shifted, targets, feats, mask, rev_mask, cat, num, labels)

    # -- forward ---------------------------------------------------------------

    def trunk(self, bt: Batch) -> tuple[list[Tensor], Tensor]:
        """Per-step top-layer outputs and each row's last valid output."""
        emb = self.embed(bt.shifted)
        if self.feat is not None:
            emb = ops.concat([emb, self.feat(Tensor(bt.feats))], axis=-1)
        xs = [ops.index(emb, (slice(None), t)) for t in range(bt.shifted.shape[1])]
        outs, (hs, _) = self.lstm.run(xs, bt.mask)
        return outs, hs[-1]

    def forward(self, bt: Batch, lam: float | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Returns conversion probs (B, 2), reverse-branch channel probs
        (B, T, K) and the stacked step outputs (B, T, H)."""
        lam = self.config.lam if lam is None else lam
        outs, last = self.trunk(bt)
        seq = ops.stack(outs, axis=1)
        c_rev = ops.softmax(self.rev(ops.grl(seq, lam)))
        v_attn = ops.attention(last, seq, seq, bt.mask)
        head_in = ops.concat([v_attn, self.user(bt.cat, bt.num)], axis=-1)
        return ops.softmax(self.head(head_in)), c_rev, seq

    def conversion_probs(self, bt: Batch) -> np.ndarray:
        """Conversion probabilities only; skips the reverse branch."""
        outs, last = self.trunk(bt)
        seq = ops.stack(outs, axis=1)
        v_attn = ops.attention(last, seq, seq, bt.mask)
        head_in = ops.concat([v_attn, self.user(bt.cat, bt.num)], axis=-1)
        return ops.softmax(self.head(head_in)).value[:, 1]

    def meta(self) -> dict:
        return {"config": asdict(self.config), "encoder": self.encoder.to_meta(),
                "scaler": {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
                "n_channels": self.n_channels, "n_features": self.n_features}

    def save(self, path, extra: dict | None = None) -> None:
        archive.save(path, self.state_dict(), dict(extra or {}, **self.meta()))

    @classmethod
    def load(cls, path) -> tuple["Predictor", dict]:
        params, meta = archive.load(path)
        cfg = PredictorConfig(**meta["config"])
        scaler = FeatureScaler(np.array(meta["scaler"]["mean"], dtype=float), np.array(meta["scaler"]["std"], dtype=float))
        model = cls(meta["n_channels"], meta["n_features"], UserEncoder.from_meta(meta["encoder"]), scaler, cfg,
                    np.random.default_rng(0))
        model.load_state_dict(params)
        return model, meta


def forward(journey: Journey, model: Predictor, lam: float | None = None) -> PredictionOutput:
    if not journey.touchpoints:
        raise ValueError("journey has no touchpoints")
    probs, c_rev, _ = model.forward(model.batch([journey]), lam)
    return PredictionOutput(float(probs.value[0, 1]), c_rev.value[0])


def predictor_loss(bt: Batch, weights, model: Predictor, gamma: float, delta: float,
                   lam: float | None = None) -> tuple[Tensor, dict]:
    """gamma * summed reverse-channel CE over real steps + delta * sum_i w_i CE(conversion)."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (bt.size,):
        raise ValueError(f"got {weights.shape[0] if weights.ndim else 'scalar'} weights for {bt.size} journeys")
    probs, c_rev, _ = model.forward(bt, lam)
    rev = ops.cross_entropy(c_rev, bt.targets, bt.rev_mask.astype(float))
    conv = ops.cross_entropy(probs, bt.labels, weights)
    loss = ops.add(ops.scale(rev, gamma), ops.scale(conv, delta))
    return loss, {"rev": float(rev.value), "conv": float(conv.value), "probs": probs.value[:, 1]}


def trunk_objective(bt: Batch, weights, model: Predictor, gamma: float, delta: float,
                    lam: float | None = None) -> float:
    """delta * conversion term - lam * gamma * reverse term.

    With the reversal layer in place, the tape gradient for trunk
    parameters (embeddings, feature projection, LSTM) is the derivative of
    this quantity rather than of the loss. Used as the finite-difference
    reference for those parameters.
    """
    lam = model.config.lam if lam is None else lam
    _, parts = predictor_loss(bt, weights, model, gamma, delta, lam)
    return delta * parts["conv"] - lam * gamma * parts["rev"]


def trunk_parameters(model: Predictor) -> list:
    """Parameters upstream of the reversal layer."""
    out = model.embed.parameters() + model.lstm.parameters()
    return out + (model.feat.parameters() if model.feat is not None else [])


@dataclass
class PredictorHistory:
    loss: list[float] = field(default_factory=list)
    rev_ce: list[float] = field(default_factory=list)
    conv_ce: list[float] = field(default_factory=list)


def _weights_array(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(getattr(weights, "w", weights), dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights cover {w.shape[0]} journeys, training set has {n}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    return w


def train_predictor(train: Dataset, weights, cfg: PredictorConfig) -> tuple[Predictor, PredictorHistory]:
    """Minimise the weighted objective; ``weights=None`` means all ones."""
    w = _weights_array(weights, len(train))
    encoder = UserEncoder.fit(train)
    scaler = FeatureScaler.fit(train)
    model = Predictor(train.n_channels, train.n_features, encoder, scaler, cfg, derive_rng(cfg.seed, "pred.init"))
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = derive_rng(cfg.seed, "pred.train")
    journeys = train.journeys
    lengths = [len(j) for j in journeys]
    hist = PredictorHistory()
    for epoch in range(cfg.epochs):
        tot = rev = conv = 0.0
        for b, idx in enumerate(length_batches(lengths, cfg.batch_size, rng)):
            bt = model.batch([journeys[i] for i in idx])
            with Tape() as tape:
                loss, parts = predictor_loss(bt, w[idx], model, cfg.gamma, cfg.delta)
            val = float(loss.value)
            if not np.isfinite(val):
                raise NumericError(f"predictor: non-finite loss at epoch {epoch} batch {b}")
            tape.backward(loss)
            clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            tot += val
            rev += parts["rev"]
            conv += parts["conv"]
        hist.loss.append(tot)
        hist.rev_ce.append(rev)
        hist.conv_ce.append(conv)
        log.info("predictor epoch %d loss %.4f rev-ce %.4f conv-ce %.4f", epoch, tot, rev, conv)
    return model, hist


def predict_conversion(journeys, model: Predictor, batch_size: int = 1024) -> np.ndarray:
    """p(convert) per journey. Journeys without touchpoints are the empty coalition."""
    journeys = list(journeys)
    out = np.empty(len(journeys))
    for idx in length_batches([len(j) for j in journeys], batch_size, None):
        out[idx] = model.conversion_probs(model.batch([journeys[i] for i in idx]))
    return out


def step_representations(journeys: list[Journey], model: Predictor, batch_size: int = 1024):
    """Frozen per-step outputs for real steps and their current channels."""
    xs, ys = [], []
    for idx in length_batches([len(j) for j in journeys], batch_size, None):
        bt = model.batch([journeys[i] for i in idx])
        outs, _ = model.trunk(bt)
        seq = np.stack([o.value for o in outs], axis=1)
        xs.append(seq[bt.rev_mask])
        ys.append(bt.targets[bt.rev_mask])
    return np.concatenate(xs), np.concatenate(ys)


def probe_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                   n_classes: int, hidden: int = 32, epochs: int = 20, batch_size: int = 256,
                   seed: int = 0) -> float:
    """Held-out accuracy of a fresh one-hidden-layer probe predicting the
    current channel from frozen step outputs."""
    rng = derive_rng(seed, "probe")
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    tx, vx = (train_x - mu) / sd, (test_x - mu) / sd
    probe = MLP([tx.shape[1], hidden, n_classes], rng, "probe")
    opt = Adam(probe.parameters(), lr=1e-2)
    for _ in range(epochs):
        order = rng.permutation(len(tx))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            with Tape() as tape:
                loss = ops.scale(ops.cross_entropy(ops.softmax(probe(Tensor(tx[idx]))), train_y[idx]), 1.0 / len(idx))
            tape.backward(loss)
            opt.step()
    pred = probe(Tensor(vx)).value.argmax(axis=-1)
    return float(np.mean(pred == test_y))
