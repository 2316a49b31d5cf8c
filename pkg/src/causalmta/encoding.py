"""Shared plumbing: seeds, padding, minibatch order, and user-attribute encoding."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Journey
from .nncore import Embedding, Module, Tensor, ops


def derive_rng(seed: int, tag: str, *extra: int) -> np.random.Generator:
    """Stage-local generator from ``(seed, tag)``; same inputs, same stream."""
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode()), *map(int, extra)])


def pad_channels(journeys: list[Journey], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad channel sequences. Returns ids (B, T) and a boolean mask."""
    t_max = max(len(j) for j in journeys)
    ids = np.full((len(journeys), t_max), pad_id, dtype=np.int64)
    mask = np.zeros((len(journeys), t_max), dtype=bool)
    for i, j in enumerate(journeys):
        ids[i, : len(j)] = j.channels
        mask[i, : len(j)] = True
    return ids, mask


def pad_features(journeys: list[Journey], n_features: int, t_max: int | None = None) -> np.ndarray:
    t_max = t_max or max(len(j) for j in journeys)
    out = np.zeros((len(journeys), t_max, n_features))
    for i, j in enumerate(journeys):
        if n_features:
            out[i, : len(j)] = [tp.features for tp in j.touchpoints]
    return out


def length_batches(lengths, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Index batches of similar length; batch order shuffled when ``rng`` is given.

    Sorting by length keeps padding small, which matters more than anything
    else for speed here.
    """
    lengths = np.asarray(lengths)
    if rng is None:
        order = np.argsort(lengths, kind="stable")
    else:
        # random tie-break so equal-length journeys mix across epochs
        order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


@dataclass
class UserEncoder:
    """Maps ``user_attrs`` to categorical ids (0 = unseen) and standardized numerics."""

    categorical: dict[str, list[str]]
    numeric: dict[str, tuple[float, float]]

    @classmethod
    def fit(cls, ds: Dataset) -> "UserEncoder":
        cats, nums = {}, {}
        for field, kind in sorted(ds.user_schema.items()):
            if kind == "categorical":
                cats[field] = sorted({str(j.user_attrs.get(field)) for j in ds})
            else:
                vals = np.array([float(j.user_attrs.get(field, 0.0)) for j in ds])
                sd = float(vals.std())
                nums[field] = (float(vals.mean()), sd if sd > 0 else 1.0)
        return cls(cats, nums)

    def encode(self, journeys) -> tuple[np.ndarray, np.ndarray]:
        lookup = {f: {v: i + 1 for i, v in enumerate(vs)} for f, vs in self.categorical.items()}
        cat = np.zeros((len(journeys), len(self.categorical)), dtype=np.int64)
        num = np.zeros((len(journeys), len(self.numeric)))
        for r, j in enumerate(journeys):
            for c, f in enumerate(self.categorical):
                cat[r, c] = lookup[f].get(str(j.user_attrs.get(f)), 0)
            for c, (f, (mu, sd)) in enumerate(self.numeric.items()):
                num[r, c] = (float(j.user_attrs.get(f, mu)) - mu) / sd
        return cat, num

    def to_meta(self) -> dict:
        return {"categorical": self.categorical, "numeric": {k: list(v) for k, v in self.numeric.items()}}

    @classmethod
    def from_meta(cls, meta: dict) -> "UserEncoder":
        return cls({k: list(v) for k, v in meta["categorical"].items()},
                   {k: (float(v[0]), float(v[1])) for k, v in meta["numeric"].items()})


class UserEmbed(Module):
    """One embedding table per categorical field plus numeric passthrough."""

    def __init__(self, encoder: UserEncoder, dim: int, rng: np.random.Generator, name: str):
        self.fields = list(encoder.categorical)
        self.n_numeric = len(encoder.numeric)
        self.tables = [Embedding(len(encoder.categorical[f]) + 1, dim, rng, f"{name}.{f}") for f in self.fields]
        self.out_dim = dim * len(self.fields) + self.n_numeric

    def __call__(self, cat: np.ndarray, num: np.ndarray) -> Tensor:
        parts = [tab(cat[:, i]) for i, tab in enumerate(self.tables)]
        if self.n_numeric:
            parts.append(Tensor(num))
        if not parts:
            return Tensor(np.zeros((cat.shape[0], 0)))
        return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "FeatureScaler":
        f = len(ds.feature_names)
        rows = [tp.features for j in ds for tp in j.touchpoints] if f else []
        arr = np.asarray(rows, dtype=float).reshape(-1, f)
        sd = arr.std(axis=0) if len(arr) else np.ones(f)
        return cls(arr.mean(axis=0) if len(arr) else np.zeros(f), np.where(sd > 0, sd, 1.0))

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean) / self.std
