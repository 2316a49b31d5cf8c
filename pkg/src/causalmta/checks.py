"""Numerical self-checks shared by ``causalmta verify`` and the test suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import evaluation as ev
from . import predictor as pr
from . import reweighting as rw
from .data import Dataset, Journey, Touchpoint
from .encoding import FeatureScaler, UserEncoder, pad_channels
from .nncore import param_grad_check
from .toys import DiscreteWeightToy, LatentChainToy


@dataclass
class CheckResult:
    name: str
    ok: bool
    value: float
    limit: float

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.value:.3e} (limit {self.limit:.0e})"


def jsd_identity(n: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(2, 6))
        atoms = int(rng.integers(2, 12))
        lhs, rhs = ev.theory_jsd_identity(rng.dirichlet(np.ones(atoms), size=k))
        worst = max(worst, abs(lhs - rhs))
    return CheckResult("reverse-loss / JSD identity", worst <= 1e-10, worst, 1e-10)


def jsd_endpoints() -> CheckResult:
    same = ev.theory_jsd_identity([[0.25, 0.75], [0.25, 0.75]])
    apart = ev.theory_jsd_identity([[1.0, 0.0], [0.0, 1.0]])
    err = max(abs(same[0] + 2 * np.log(2)), abs(same[1] + 2 * np.log(2)), abs(apart[0]), abs(apart[1]))
    return CheckResult("JSD identity endpoint cases", err <= 1e-15, err, 1e-15)


def random_exact_world(rng: np.random.Generator):
    u, c = int(rng.integers(2, 5)), int(rng.integers(2, 9))
    return rng.dirichlet(np.ones(u)), rng.dirichlet(np.ones(c), size=u), rng.random((u, c))


def reweight_equality(n: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        e_cf, e_fw = ev.theory_reweight_equivalence(*random_exact_world(rng))
        worst = max(worst, abs(e_cf - e_fw))
    return CheckResult("weighted factual risk = counterfactual risk", worst <= 1e-12, worst, 1e-12)


def confounded_gap() -> CheckResult:
    """Unit weights on a confounded world must leave a visible gap."""
    e_cf, e_f = ev.theory_reweight_equivalence([0.5, 0.5], [[0.8, 0.2], [0.2, 0.8]], [[1.0, 0.0], [0.0, 1.0]],
                                               weights=1.0)
    gap = abs(e_cf - e_f)
    return CheckResult("unit weights leave a gap under confounding", gap > 0, gap, 0.0)


def harmonic_weight_identity(samples: int = 10_000, seed: int = 0) -> CheckResult:
    """Monte Carlo harmonic-mean weight against p(C)/p(C|u) on a tabulated chain."""
    rng = np.random.default_rng(seed)
    toy = LatentChainToy.random(rng)
    direct = toy.direct_weight()
    worst = 0.0
    for u in range(direct.shape[0]):
        for c in range(direct.shape[1]):
            est = toy.harmonic_weight(u, c, samples, rng)
            worst = max(worst, abs(est - direct[u, c]) / direct[u, c])
    return CheckResult(f"harmonic-mean weight vs direct ratio (S={samples})", worst <= 0.02, worst, 0.02)


def _tiny_journeys(rng, n, k, n_feat, kinds=("a", "b")):
    js = []
    for i in range(n):
        t = int(rng.integers(1, 5))
        tps = tuple(Touchpoint(int(rng.integers(k)), float(s), tuple(rng.normal(size=n_feat))) for s in range(t))
        js.append(Journey(f"u{i}", {"kind": kinds[i % len(kinds)], "age": float(rng.normal())}, tps,
                          bool(rng.random() < 0.4)))
    return Dataset(js, k, [f"f{i}" for i in range(n_feat)], {"kind": "categorical", "age": "numeric"})


def vrae_gradients(instances: int = 20, seed: int = 0) -> CheckResult:
    worst = 0.0
    for s in range(instances):
        rng = np.random.default_rng([seed, s])
        ds = _tiny_journeys(rng, 3, 3, 0)
        cfg = rw.ReweightConfig(d_z=2, hidden=3, emb_dim=2, seed=s)
        model = rw.Vrae(3, cfg, rng)
        ids, mask = pad_channels(ds.journeys, model.pad)
        eps = rng.standard_normal((len(ds), cfg.d_z))

        def loss():
            return rw.vrae_loss(ids, mask, model, 0.5, 0.5, rng, eps=eps)[0]
        worst = max(worst, param_grad_check(loss, model.parameters(), max_coords=25, rng=rng))
    return CheckResult(f"VRAE loss gradients ({instances} instances)", worst <= 1e-4, worst, 1e-4)


def domain_gradients(instances: int = 20, seed: int = 0) -> CheckResult:
    worst = 0.0
    for s in range(instances):
        rng = np.random.default_rng([seed, 100 + s])
        ds = _tiny_journeys(rng, 4, 3, 0)
        enc = UserEncoder.fit(ds)
        cat, num = enc.encode(ds.journeys)
        mu, ls = rng.normal(size=(4, 2)), 0.3 * rng.normal(size=(4, 2))
        samples = rw.build_domain_samples(cat, num, mu, ls, rng, "marginal")
        clf = rw.DomainClassifier(enc, 2, 4, 2, rng)
        idx = np.arange(len(samples))

        def loss():
            return rw.domain_loss(samples, idx, clf)
        worst = max(worst, param_grad_check(loss, clf.parameters(), max_coords=25, rng=rng))
    return CheckResult(f"domain classifier loss gradients ({instances} instances)", worst <= 1e-4, worst, 1e-4)


def predictor_gradients(instances: int = 20, seed: int = 0) -> CheckResult:
    """Full loss including the reversal layer and attention."""
    worst = 0.0
    for s in range(instances):
        rng = np.random.default_rng([seed, 200 + s])
        ds = _tiny_journeys(rng, 2, 3, 2)
        cfg = pr.PredictorConfig(emb_dim=2, feat_dim=2, hidden=3, mlp_hidden=3, user_emb_dim=2, seed=s)
        model = pr.Predictor(3, 2, UserEncoder.fit(ds), FeatureScaler.fit(ds), cfg, rng)
        bt = model.batch(ds.journeys)
        w = rng.uniform(0.2, 2.0, size=2)

        def loss():
            return pr.predictor_loss(bt, w, model, 0.5, 0.5, 1.0)[0]

        def trunk_ref():
            return pr.trunk_objective(bt, w, model, 0.5, 0.5, 1.0)
        trunk = pr.trunk_parameters(model)
        rest = [p for p in model.parameters() if all(p is not q for q in trunk)]
        worst = max(worst,
                    param_grad_check(loss, rest, max_coords=25, rng=rng),
                    param_grad_check(loss, trunk, max_coords=25, rng=rng, reference_fn=trunk_ref))
    return CheckResult(f"predictor loss gradients through GRL and attention ({instances} instances)",
                       worst <= 1e-4, worst, 1e-4)


def run_all(instances: int = 20) -> list[CheckResult]:
    return [jsd_identity(), jsd_endpoints(), reweight_equality(), confounded_gap(), harmonic_weight_identity(),
            vrae_gradients(instances), domain_gradients(instances), predictor_gradients(instances)]


@dataclass
class WeightOracleResult:
    spearman: dict  # S -> rank correlation with the true weights
    relerr: dict    # S -> frequency-weighted mean relative error
    seconds: float


def weight_oracle(seed: int = 0, n: int = 8000, sample_sizes=(32, 10_000)) -> WeightOracleResult:
    """Learned weights against p(C)/p(C|u) on the enumerable discrete toy.

    Each (user, sequence) cell is scored through one of its journeys;
    estimates and truth are both scaled to population mean 1.
    """
    t0 = time.perf_counter()
    toy = DiscreteWeightToy.default()
    ds = toy.sample(n, seed, stratified=True)
    cfg = rw.ReweightConfig(epochs=20, clf_epochs=200, hidden=32, d_z=8, batch_size=64, beta=0.01, seed=seed)
    vrae, _ = rw.train_vrae(ds, cfg)
    mu, ls = rw.encode_dataset(ds.journeys, vrae)
    enc = UserEncoder.fit(ds)
    cat, num = enc.encode(ds.journeys)
    samples = rw.build_domain_samples(cat, num, mu, ls, np.random.default_rng([seed, 1]), cfg.negatives)
    clf, _ = rw.train_domain_classifier(
        samples, enc, cfg, resample=lambda r: rw.build_domain_samples(cat, num, mu, ls, r, cfg.negatives))
    cells = toy.cells()
    keys = [(j.user_attrs["type"], tuple(j.channels)) for j in ds.journeys]
    idx = np.array([keys.index(c) for c in cells])
    freq = toy.cell_probs()
    truth = np.array([toy.true_weight(*c) for c in cells])
    relerr, spear = {}, {}
    for s in sample_sizes:
        z = rw.posterior_draws(mu[idx], ls[idx], s, seed)
        p = clf.predict(np.repeat(cat[idx], s, axis=0), np.repeat(num[idx], s, axis=0), z.reshape(len(idx) * s, -1))
        w = rw.harmonic_weight(1.0 / rw.density_ratio(p).reshape(len(idx), s))
        w = w / (freq @ w)
        relerr[s] = float(freq @ (np.abs(w - truth) / truth))
        spear[s] = float(spearmanr(w, truth).correlation)
    return WeightOracleResult(spear, relerr, time.perf_counter() - t0)
