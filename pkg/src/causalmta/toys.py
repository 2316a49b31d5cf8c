"""Small worlds with exactly known answers, used as oracles for the weighting code."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Journey, Touchpoint


@dataclass
class DiscreteWeightToy:
    """User types with i.i.d. per-position channel probabilities.

    ``p(C | u)`` and ``p(C)`` are enumerable, so the ideal journey weight
    ``p(C) / p(C | u)`` is known for every (user, sequence) cell.
    """

    channel_probs: dict[str, np.ndarray]
    user_probs: dict[str, float]
    length: int = 2

    @classmethod
    def default(cls) -> "DiscreteWeightToy":
        return cls({"a": np.array([0.5, 0.3, 0.2]), "b": np.array([0.2, 0.3, 0.5])}, {"a": 0.5, "b": 0.5})

    @property
    def n_channels(self) -> int:
        return len(next(iter(self.channel_probs.values())))

    def p_seq_given_user(self, user: str, channels) -> float:
        return float(np.prod(self.channel_probs[user][list(channels)]))

    def p_seq(self, channels) -> float:
        return sum(pu * self.p_seq_given_user(u, channels) for u, pu in self.user_probs.items())

    def true_weight(self, user: str, channels) -> float:
        return self.p_seq(channels) / self.p_seq_given_user(user, channels)

    def cells(self) -> list[tuple[str, tuple[int, ...]]]:
        seqs = list(itertools.product(range(self.n_channels), repeat=self.length))
        return [(u, s) for u in sorted(self.user_probs) for s in seqs]

    def cell_probs(self) -> np.ndarray:
        return np.array([self.user_probs[u] * self.p_seq_given_user(u, s) for u, s in self.cells()])

    def sample(self, n: int, seed: int, stratified: bool = False) -> Dataset:
        """``n`` journeys. Stratified samples hold each cell in exact
        proportion (largest-remainder rounding), in shuffled order, so the
        sample's empirical ratios equal the population ones."""
        rng = np.random.default_rng(seed)
        cells = self.cells()
        if stratified:
            exact = self.cell_probs() * n
            counts = np.floor(exact).astype(int)
            short = n - counts.sum()
            counts[np.argsort(-(exact - counts), kind="stable")[:short]] += 1
            picks = np.repeat(np.arange(len(cells)), counts)
            picks = picks[rng.permutation(n)]
        else:
            picks = rng.choice(len(cells), size=n, p=self.cell_probs())
        journeys = []
        for i, c in enumerate(picks):
            u, seq = cells[c]
            tps = tuple(Touchpoint(int(k), float(t)) for t, k in enumerate(seq))
            journeys.append(Journey(f"toy{i}", {"type": u}, tps, False))
        return Dataset(journeys, self.n_channels, [], {"type": "categorical"})


@dataclass
class LatentChainToy:
    """Discrete chain u -> z -> c with every distribution tabulated.

    ``W_z(u, z) = p(z) / p(z | u)`` and the posterior ``p(z | c)`` are exact,
    so the harmonic-mean weight can be compared with ``p(c) / p(c | u)``.
    """

    p_u: np.ndarray  # (U,)
    p_z_u: np.ndarray  # (U, Z)
    p_c_z: np.ndarray  # (Z, C)

    @classmethod
    def random(cls, rng: np.random.Generator, n_u: int = 2, n_z: int = 4, n_c: int = 5,
               concentration: float = 3.0) -> "LatentChainToy":
        return cls(rng.dirichlet(np.full(n_u, concentration)),
                   rng.dirichlet(np.full(n_z, concentration), size=n_u),
                   rng.dirichlet(np.full(n_c, concentration), size=n_z))

    @property
    def p_z(self) -> np.ndarray:
        return self.p_u @ self.p_z_u

    @property
    def p_c_u(self) -> np.ndarray:
        return self.p_z_u @ self.p_c_z

    @property
    def p_c(self) -> np.ndarray:
        return self.p_z @ self.p_c_z

    @property
    def p_z_c(self) -> np.ndarray:
        joint = self.p_z[:, None] * self.p_c_z  # (Z, C)
        return (joint / joint.sum(axis=0, keepdims=True)).T  # (C, Z)

    def w_z(self) -> np.ndarray:
        """(U, Z) density ratio p(z) / p(z | u)."""
        return self.p_z[None, :] / self.p_z_u

    def direct_weight(self) -> np.ndarray:
        """(U, C) p(c) / p(c | u)."""
        return self.p_c[None, :] / self.p_c_u

    def harmonic_weight(self, u: int, c: int, samples: int, rng: np.random.Generator) -> float:
        z = rng.choice(len(self.p_z), size=samples, p=self.p_z_c[c])
        return 1.0 / np.mean(1.0 / self.w_z()[u, z])

    def harmonic_weight_exact(self) -> np.ndarray:
        """The expectation in closed form (no sampling)."""
        inv = 1.0 / self.w_z()  # (U, Z)
        return 1.0 / (inv @ self.p_z_c.T)
