"""Confounded ad-journey simulator.

Exposure times follow a homogeneous Poisson process whose rate may depend on
a hidden user preference vector; each exposure gets a channel drawn from a
preference-dependent softmax. Conversions follow an inhomogeneous Poisson
process with log-intensity

    log lambda(t) = alpha_0 + w . preference + sum_j beta_{k_j} exp(-omega_{k_j} (t - t_j))

and a journey is labelled converted when at least one conversion falls in
the horizon. The four settings switch the two preference couplings on/off.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, Journey, Touchpoint

SECONDS_PER_DAY = 86400.0
EPOCH0 = 1_600_000_000.0
FEATURE_NAMES = ["gap_days", "position", "decayed_exposure"]
BUCKETS = ("lo", "mid", "hi")
# standard-normal terciles
BUCKET_EDGES = (-0.4307272992954576, 0.4307272992954576)


class Setting(str, enum.Enum):
    DYNAMIC_ONLY = "dynamic-only"
    STATIC_ONLY = "static-only"
    HYBRID = "hybrid"
    UNBIASED = "unbiased"

    @property
    def preference_rate(self) -> bool:
        return self in (Setting.DYNAMIC_ONLY, Setting.HYBRID)

    @property
    def preference_channels(self) -> bool:
        return self in (Setting.STATIC_ONLY, Setting.HYBRID)


@dataclass
class UserProfile:
    preference: np.ndarray
    attrs: dict

    def __post_init__(self):
        if self.preference.ndim != 1 or self.preference.size < 1:
            raise ValueError("preference must be a non-empty vector")


@dataclass
class ExposureParams:
    base_rate: float
    rate_coupling: np.ndarray  # (d_u,)
    affinity: np.ndarray  # (d_u, K)
    horizon: float

    def __post_init__(self):
        if self.base_rate <= 0 or self.horizon <= 0:
            raise ValueError("base_rate and horizon must be positive")

    @property
    def n_channels(self) -> int:
        return self.affinity.shape[1]


@dataclass
class ConversionParams:
    alpha0: float
    user_weights: np.ndarray  # (d_u,)
    beta: np.ndarray  # (K,)
    omega: np.ndarray  # (K,)

    def __post_init__(self):
        if np.any(self.omega <= 0):
            raise ValueError("kernel decay rates must be positive")

    def alpha_user(self, profile: UserProfile) -> float:
        return float(self.user_weights @ profile.preference)


@dataclass
class GeneratorConfig:
    """World parameters. Everything random here is drawn from ``world_seed``.

    Channels are laid out along a preference "intent" direction: channel k
    has alignment ``s_k`` evenly spaced in [-1, 1]; its affinity column is
    ``affinity_scale * s_k * intent`` and its causal kernel amplitude falls
    with ``s_k``, so high-intent users are steered toward weak channels.
    """

    n_channels: int = 10
    pref_dim: int = 4
    horizon: float = 14.0
    base_rate: float = 0.8
    rate_scale: float = 0.5
    affinity_scale: float = 2.0
    affinity_noise: float = 0.5
    alpha0: float = -5.4
    user_weight_scale: float = 0.8
    beta_low: float = 0.05
    beta_high: float = 0.6
    omega_low: float = 0.5
    omega_high: float = 1.5
    cost_low: float = 0.5
    cost_high: float = 2.0
    observed_dims: int = 4
    max_touchpoints: int = 40
    n_panels: int = 2000
    world_seed: int = 2022

    @classmethod
    def from_kv(cls, text: str) -> "GeneratorConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        known = {f.name: f.type for f in fields(cls)}
        vals = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in known:
                raise ValueError(f"config line {lineno}: unknown key {k!r}")
            vals[k] = int(v) if known[k] in ("int", int) else float(v)
        return cls(**vals)

    def build(self) -> "World":
        rng = np.random.default_rng([self.world_seed, 0x5E7])
        d, k = self.pref_dim, self.n_channels
        intent = rng.normal(size=d)
        intent /= np.linalg.norm(intent)
        align = np.linspace(-1.0, 1.0, k)
        affinity = self.affinity_scale * np.outer(intent, align) + self.affinity_noise * rng.normal(size=(d, k))
        rate_coupling = self.rate_scale * intent
        user_weights = self.user_weight_scale * intent
        beta = self.beta_high + (self.beta_low - self.beta_high) * (align + 1.0) / 2.0
        omega = rng.uniform(self.omega_low, self.omega_high, size=k)
        costs = rng.uniform(self.cost_low, self.cost_high, size=k)
        return World(
            ExposureParams(self.base_rate, rate_coupling, affinity, self.horizon),
            ConversionParams(self.alpha0, user_weights, beta, omega),
            costs, self,
        )


@dataclass
class World:
    exposure: ExposureParams
    conversion: ConversionParams
    channel_costs: np.ndarray
    config: GeneratorConfig = field(default_factory=GeneratorConfig)

    @property
    def n_channels(self) -> int:
        return self.exposure.n_channels


def sample_exposure_times(rate: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson arrivals on [0, horizon) from exponential gaps."""
    if rate < 0 or horizon < 0:
        raise ValueError("rate and horizon must be non-negative")
    if rate == 0 or horizon == 0:
        return np.empty(0)
    times = []
    t = rng.exponential(1.0 / rate)
    while t < horizon:
        times.append(t)
        t += rng.exponential(1.0 / rate)
    return np.asarray(times)


def channel_distribution(profile: UserProfile, setting: Setting, params: ExposureParams) -> np.ndarray:
    k = params.n_channels
    if not Setting(setting).preference_channels:
        return np.full(k, 1.0 / k)
    logits = params.affinity.T @ profile.preference
    e = np.exp(logits - logits.max())
    return e / e.sum()


def assign_channels(times: np.ndarray, profile: UserProfile, setting: Setting, params: ExposureParams,
                    rng: np.random.Generator) -> np.ndarray:
    probs = channel_distribution(profile, setting, params)
    if len(times) == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(params.n_channels, size=len(times), p=probs)


def exposure_rate(profile: UserProfile, setting: Setting, params: ExposureParams) -> float:
    if Setting(setting).preference_rate:
        return params.base_rate * math.exp(float(params.rate_coupling @ profile.preference))
    return params.base_rate


def conversion_intensity(t: float, history: Sequence[tuple[float, int]], profile: UserProfile,
                         params: ConversionParams) -> float:
    """lambda(t) for exposures ``(time, channel)`` strictly before ``t``."""
    s = params.alpha0 + params.alpha_user(profile)
    for tj, k in history:
        if tj >= t:
            raise ValueError("history must precede t")
        s += params.beta[k] * math.exp(-params.omega[k] * (t - tj))
    return math.exp(s)


def _log_intensity_grid(ts: np.ndarray, times: np.ndarray, channels: np.ndarray, base: float,
                        params: ConversionParams, left: np.ndarray | None = None) -> np.ndarray:
    """log lambda on a grid. ``left[i]`` marks points that sit on a piece's
    left edge, where an exposure at exactly that time has already arrived."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return np.full(ts.shape, base)
    channels = np.asarray(channels, dtype=np.int64)
    dt = ts[:, None] - times[None, :]
    on = dt > 0
    if left is not None:
        on |= (dt == 0) & left[:, None]
    kern = params.beta[channels] * np.exp(-params.omega[channels] * np.where(on, dt, 0.0))
    return base + np.where(on, kern, 0.0).sum(axis=1)


def integrated_intensity(times: np.ndarray, channels: np.ndarray, profile: UserProfile,
                         params: ConversionParams, horizon: float, n_panels: int = 10_000) -> float:
    """Composite Simpson integral of lambda over [0, horizon].

    The intensity jumps at each exposure, so the interval is cut there and
    each smooth piece gets an even number of panels in proportion to its
    length (at least two).
    """
    base = params.alpha0 + params.alpha_user(profile)
    times = np.asarray(times, dtype=float)
    cuts = np.unique(np.concatenate([[0.0], times[(times > 0) & (times < horizon)], [horizon]]))
    xs, ws, lefts = [], [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        m = max(2, int(round(n_panels * (b - a) / horizon)))
        m += m % 2
        x = np.linspace(a, b, m + 1)
        w = np.ones(m + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        lf = np.zeros(m + 1, dtype=bool)
        lf[0] = True
        xs.append(x)
        ws.append(w * (b - a) / (3.0 * m))
        lefts.append(lf)
    x, w, lf = np.concatenate(xs), np.concatenate(ws), np.concatenate(lefts)
    return float(w @ np.exp(_log_intensity_grid(x, times, channels, base, params, lf)))


def conversion_probability(times: np.ndarray, channels: np.ndarray, profile: UserProfile,
                           params: ConversionParams, horizon: float, n_panels: int = 10_000) -> float:
    """P(at least one conversion in [0, horizon]) = 1 - exp(-integral of lambda)."""
    lam = integrated_intensity(times, channels, profile, params, horizon, n_panels)
    return float(-math.expm1(-lam))


def sample_profile(rng: np.random.Generator, pref_dim: int, observed_dims: int | None = None) -> UserProfile:
    pref = rng.normal(size=pref_dim)
    nobs = pref_dim if observed_dims is None else observed_dims
    attrs = {f"pref{d}": BUCKETS[int(np.searchsorted(BUCKET_EDGES, pref[d]))] for d in range(nobs)}
    return UserProfile(pref, attrs)


def dynamic_features(times_days: np.ndarray) -> list[tuple[float, float, float]]:
    """Per-touchpoint (gap since previous touch, position, decayed count of earlier touches)."""
    out = []
    acc = 0.0
    prev = 0.0
    for t, tt in enumerate(times_days):
        gap = tt - prev
        acc = acc * math.exp(-gap) if t else 0.0
        out.append((float(gap), float(t), float(acc)))
        acc += 1.0
        prev = tt
    return out


@dataclass
class GeneratedData:
    dataset: Dataset
    truth: np.ndarray  # ground-truth conversion probability per journey
    setting: Setting
    profiles: list[UserProfile]
    world: World


def generate_journey(profile: UserProfile, setting: Setting, world: World, rng: np.random.Generator,
                     user_id: str, n_panels: int | None = None):
    exp_p, conv_p, cfg = world.exposure, world.conversion, world.config
    rate = exposure_rate(profile, setting, exp_p)
    times = sample_exposure_times(rate, exp_p.horizon, rng)
    while len(times) == 0:
        times = sample_exposure_times(rate, exp_p.horizon, rng)
    times = times[: cfg.max_touchpoints]
    channels = assign_channels(times, profile, setting, exp_p, rng)
    prob = conversion_probability(times, channels, profile, conv_p, exp_p.horizon, n_panels or cfg.n_panels)
    converted = bool(rng.random() < prob)
    start = EPOCH0 + rng.uniform(0, 30) * SECONDS_PER_DAY
    feats = dynamic_features(times)
    tps = tuple(
        Touchpoint(int(k), start + float(t) * SECONDS_PER_DAY, f, float(world.channel_costs[k]))
        for t, k, f in zip(times, channels, feats)
    )
    return Journey(user_id, dict(profile.attrs), tps, converted), prob


def generate_dataset(setting: Setting | str, n_users: int, journeys_per_user: int = 1,
                     config: GeneratorConfig | None = None, seed: int = 0, world: World | None = None) -> GeneratedData:
    """Simulate ``n_users * journeys_per_user`` journeys.

    Every user and every journey draws from its own generator seeded by
    ``(seed, index)``, so results do not depend on generation order. A
    prebuilt ``world`` (e.g. with edited kernel amplitudes) overrides the
    one ``config`` would build.
    """
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    setting = Setting(setting)
    if world is not None:
        config = world.config
    cfg = config or GeneratorConfig()
    world = world or cfg.build()
    journeys, probs, profiles = [], [], []
    for u in range(n_users):
        profile = sample_profile(np.random.default_rng([seed, 1, u]), cfg.pref_dim, cfg.observed_dims)
        profiles.append(profile)
        for r in range(journeys_per_user):
            idx = u * journeys_per_user + r
            j, p = generate_journey(profile, setting, world, np.random.default_rng([seed, 2, idx]), f"s{seed}u{u}")
            journeys.append(j)
            probs.append(p)
    user_schema = {f"pref{d}": "categorical" for d in range(cfg.observed_dims)}
    ds = Dataset(journeys, cfg.n_channels, list(FEATURE_NAMES), user_schema)
    return GeneratedData(ds, np.asarray(probs), setting, profiles, world)


def save_truth(gen: GeneratedData, path, seed: int) -> None:
    cfg = asdict(gen.world.config)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        meta = {"setting": gen.setting.value, "seed": seed, "config": cfg,
                "channel_costs": gen.world.channel_costs.tolist()}
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for i, p in enumerate(gen.truth):
            fh.write(json.dumps({"index": i, "prob": float(p), "setting": gen.setting.value}, sort_keys=True) + "\n")


def load_truth(path) -> tuple[np.ndarray, dict]:
    probs, meta = [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        obj = json.loads(line)
        if "meta" in obj:
            meta = obj["meta"]
        else:
            probs.append(obj["prob"])
    return np.asarray(probs), meta
