"""The synthetic ablation study: train every variant on one hybrid dataset
and score it on unbiased test journeys."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evaluation as ev
from . import predictor as pr
from . import reweighting as rw
from .synthgen import Setting, generate_dataset

log = logging.getLogger(__name__)

# label -> (train on unbiased data, use weights, gamma > 0)
VARIANTS = {
    "LSTM": (False, False, False),
    "CM-causal": (False, True, False),
    "CM-rw": (False, False, True),
    "CausalMTA": (False, True, True),
    "MTA-ub": (True, False, False),
}


@dataclass
class StudySetup:
    n_train: int = 20_000
    n_test: int = 5_000
    hidden: int = 32
    epochs: int = 10
    gamma: float = 0.5
    vrae_epochs: int = 10
    d_z: int = 8
    clf_epochs: int = 20
    probe_train: int = 4_000
    probe_test: int = 2_000

    def reweight_config(self, seed: int) -> rw.ReweightConfig:
        return rw.ReweightConfig(epochs=self.vrae_epochs, hidden=self.hidden, d_z=self.d_z,
                                 clf_epochs=self.clf_epochs, seed=seed)

    def predictor_config(self, seed: int, gamma: float) -> pr.PredictorConfig:
        return pr.PredictorConfig(epochs=self.epochs, hidden=self.hidden, mlp_hidden=self.hidden, gamma=gamma,
                                  seed=seed)


@dataclass
class SeedResult:
    seed: int
    auc: dict = field(default_factory=dict)
    logloss: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    truth_auc: float = float("nan")
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def calibration_gap(p: np.ndarray, truth: np.ndarray, buckets: int = 10) -> float:
    """Largest |mean prediction - mean true probability| over prediction deciles."""
    order = np.argsort(p, kind="stable")
    return float(max(abs(p[idx].mean() - truth[idx].mean()) for idx in np.array_split(order, buckets)))


def run_seed(seed: int, setup: StudySetup | None = None) -> SeedResult:
    s = setup or StudySetup()
    t0 = time.perf_counter()
    train = generate_dataset(Setting.HYBRID, s.n_train, seed=seed)
    ub = generate_dataset(Setting.UNBIASED, s.n_train, seed=seed + 500)
    test = generate_dataset(Setting.UNBIASED, s.n_test, seed=seed + 1000)
    y = test.dataset.labels
    out = SeedResult(seed, truth_auc=ev.auc(test.truth, y))
    _, weights = rw.fit_reweighter(train.dataset, s.reweight_config(seed))
    probe_js = train.dataset.journeys[: s.probe_train + s.probe_test]
    for label, (unbiased, weighted, reversal) in VARIANTS.items():
        data = ub if unbiased else train
        model, _ = pr.train_predictor(data.dataset, weights if weighted else None,
                                      s.predictor_config(seed, s.gamma if reversal else 0.0))
        p = pr.predict_conversion(test.dataset.journeys, model)
        out.auc[label] = ev.auc(p, y)
        out.logloss[label] = ev.logloss(p, y)
        out.calibration[label] = calibration_gap(p, test.truth)
        if label in ("CausalMTA", "CM-causal"):
            x, c = pr.step_representations(probe_js, model)
            n_tr = sum(len(j) for j in probe_js[: s.probe_train])
            out.probe[label] = pr.probe_accuracy(x[:n_tr], c[:n_tr], x[n_tr:], c[n_tr:], train.dataset.n_channels,
                                                 seed=seed)
        log.info("seed %d %s auc %.4f", seed, label, out.auc[label])
    out.seconds = time.perf_counter() - t0
    return out


def summarize(results: list[SeedResult]) -> dict:
    """Mean AUC per variant and the orderings the study is meant to show."""
    mean = {k: float(np.mean([r.auc[k] for r in results])) for k in VARIANTS}
    abl = max(mean["CM-rw"], mean["CM-causal"])
    return {
        "mean_auc": mean,
        "ub_ge_full": mean["MTA-ub"] >= mean["CausalMTA"],
        "full_ge_ablations": mean["CausalMTA"] >= abl,
        "ablations_ge_plain": min(mean["CM-rw"], mean["CM-causal"]) >= mean["LSTM"],
        "full_minus_plain": mean["CausalMTA"] - mean["LSTM"],
        "ub_minus_full": mean["MTA-ub"] - mean["CausalMTA"],
        "full_beats_cm_rw": sum(r.auc["CausalMTA"] > r.auc["CM-rw"] for r in results),
        "full_beats_cm_causal": sum(r.auc["CausalMTA"] > r.auc["CM-causal"] for r in results),
    }
