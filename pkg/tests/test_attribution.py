import itertools
from math import factorial

import numpy as np
import pytest

from causalmta import attribution as at
from causalmta.attribution import ShapleyConfig
from causalmta.data import Dataset, Journey, Touchpoint


def _journey(channels, converted=True, uid="u"):
    return Journey(uid, {}, tuple(Touchpoint(int(c), float(t), (0.1 * t,)) for t, c in enumerate(channels)),
                   converted)


def _table_predict(table):
    """Predictor reading a value table indexed by the bitmask of surviving
    original positions (touchpoint timestamps are their positions)."""
    def predict(journeys):
        out = []
        for j in journeys:
            mask = sum(1 << int(tp.ts) for tp in j.touchpoints)
            out.append(table[mask])
        return np.array(out)
    return predict


def _brute_force(table, t_len):
    """Independent enumerator: the subset-sum definition with itertools."""
    def v(subset):
        return table[sum(1 << s for s in subset)]
    sv = []
    for t in range(t_len):
        others = [s for s in range(t_len) if s != t]
        total = 0.0
        for r in range(t_len):
            for sub in itertools.combinations(others, r):
                w = factorial(len(sub)) * factorial(t_len - len(sub) - 1) / factorial(t_len)
                total += w * (v(sub + (t,)) - v(sub))
        sv.append(total)
    return np.array(sv)


class TestExact:
    def test_singleton(self):
        j = _journey([2])
        sv = at.shapley_exact(j, _table_predict({0: 0.1, 1: 0.45}))
        assert sv.tolist() == [pytest.approx(0.35, abs=1e-15)]

    def test_null_game(self):
        sv = at.shapley_exact(_journey([0, 1, 2, 1]), lambda js: np.full(len(js), 0.3))
        assert np.all(sv == 0.0)

    def test_three_steps_by_hand_table(self):
        table = {0: 0.0, 1: 0.2, 2: 0.1, 3: 0.5, 4: 0.05, 5: 0.3, 6: 0.2, 7: 0.6}
        sv = at.shapley_exact(_journey([0, 1, 2]), _table_predict(table))
        np.testing.assert_allclose(sv, _brute_force(table, 3), rtol=0, atol=1e-15)
        # hand value for the first touchpoint
        hand = (2 * (0.2 - 0.0) + 1 * (0.5 - 0.1) + 1 * (0.3 - 0.05) + 2 * (0.6 - 0.2)) / 6
        assert sv[0] == pytest.approx(hand, abs=1e-15)

    @pytest.mark.parametrize("t_len", range(1, 11))
    def test_matches_brute_force(self, t_len):
        rng = np.random.default_rng(t_len)
        table = rng.random(1 << t_len)
        sv = at.shapley_exact(_journey(rng.integers(0, 4, t_len)), _table_predict(table))
        np.testing.assert_allclose(sv, _brute_force(table, t_len), rtol=0, atol=1e-12)

    def test_efficiency(self):
        rng = np.random.default_rng(3)
        table = rng.random(1 << 7)
        sv = at.shapley_exact(_journey(range(7)), _table_predict(table))
        assert abs(sv.sum() - (table[-1] - table[0])) <= 1e-12

    def test_dummy_player_gets_zero(self):
        rng = np.random.default_rng(4)
        base = rng.random(1 << 4)
        # touchpoint 2 never changes the value
        table = np.array([base[m & ~(1 << 2)] for m in range(1 << 4)])
        sv = at.shapley_exact(_journey([0, 1, 2, 3]), _table_predict(table))
        assert sv[2] == 0.0

    def test_symmetric_touchpoints_bitwise(self):
        def predict(js):
            return np.array([0.1 + 0.2 * sum(tp.channel == 1 for tp in j.touchpoints) ** 0.5
                             + 0.05 * len(j) for j in js])
        tp_a = Touchpoint(1, 1.0, (0.5,))
        j = Journey("u", {}, (Touchpoint(0, 0.0, (0.0,)), tp_a, tp_a, Touchpoint(2, 2.0, (0.2,))), True)
        sv = at.shapley_exact(j, predict)
        assert sv[1] == sv[2]

    def test_too_long_for_exact(self):
        with pytest.raises(ValueError, match="shapley_sampled"):
            at.shapley_exact(_journey(range(13)), lambda js: np.zeros(len(js)))


class TestSampled:
    def test_singleton_equals_exact(self):
        pred = _table_predict({0: 0.2, 1: 0.7})
        j = _journey([1])
        for n in (1, 7):
            assert at.shapley_sampled(j, pred, ShapleyConfig(n_permutations=n)).tolist() == \
                at.shapley_exact(j, pred).tolist()

    def test_close_to_exact_at_ten_thousand(self):
        rng = np.random.default_rng(8)
        table = rng.random(1 << 8)
        j = _journey(range(8))
        pred = _table_predict(table)
        est = at.shapley_sampled(j, pred, ShapleyConfig(n_permutations=10_000, seed=1))
        assert np.max(np.abs(est - at.shapley_exact(j, pred))) <= 0.01

    def test_identical_touchpoints_close(self):
        def predict(js):
            return np.array([1 - 0.8 ** sum(1 + tp.channel for tp in j.touchpoints) for j in js])
        tp_a = Touchpoint(3, 2.0, (1.0,))
        tps = (Touchpoint(0, 0.0, (0.0,)), Touchpoint(1, 1.0, (0.0,)), tp_a, tp_a,
               Touchpoint(2, 3.0, (0.0,)), Touchpoint(0, 4.0, (0.0,)))
        sv = at.shapley_sampled(Journey("u", {}, tps, True), predict, ShapleyConfig(n_permutations=10_000))
        assert abs(sv[2] - sv[3]) <= 0.005

    def test_seed_deterministic(self):
        pred = _table_predict(np.random.default_rng(0).random(1 << 5))
        j = _journey(range(5))
        a = at.shapley_sampled(j, pred, ShapleyConfig(n_permutations=300, seed=4))
        b = at.shapley_sampled(j, pred, ShapleyConfig(n_permutations=300, seed=4))
        assert a.tolist() == b.tolist()

    @pytest.mark.slow
    def test_unbiased_over_seeds(self):
        table = np.random.default_rng(2).random(1 << 8)
        j = _journey(range(8))
        pred = _table_predict(table)
        exact = at.shapley_exact(j, pred)
        runs = np.array([at.shapley_sampled(j, pred, ShapleyConfig(n_permutations=200, seed=s)) for s in range(50)])
        se = runs.std(axis=0, ddof=1) / np.sqrt(len(runs))
        assert np.all(np.abs(runs.mean(axis=0) - exact) <= 3 * se)

    def test_efficiency_per_permutation(self):
        table = np.random.default_rng(6).random(1 << 6)
        sv = at.shapley_sampled(_journey(range(6)), _table_predict(table), ShapleyConfig(n_permutations=50))
        assert sv.sum() == pytest.approx(table[-1] - table[0], abs=1e-12)


class TestNormalize:
    def test_clamp_and_normalize(self):
        np.testing.assert_allclose(at.normalize_credits([0.2, -0.1, 0.2]), [0.5, 0.0, 0.5])

    def test_all_zero_falls_back_to_uniform(self):
        assert at.normalize_credits([0, 0, 0, 0]).tolist() == [0.25] * 4

    def test_all_negative_falls_back_to_uniform(self):
        assert at.normalize_credits([-0.1, -0.3]).tolist() == [0.5, 0.5]

    def test_single(self):
        assert at.normalize_credits([0.3]).tolist() == [1.0]

    def test_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = at.normalize_credits(rng.normal(size=rng.integers(1, 15)))
            assert np.all(a >= 0) and abs(a.sum() - 1.0) <= 1e-9


class TestDataset:
    def test_single_journey_gets_full_credit(self):
        ds = Dataset([_journey([4])], 6, ["f"])
        res = at.attribute_dataset(ds, lambda js: np.array([0.3 * len(j) for j in js]))
        assert res.report.mean_credit[4] == 1.0
        assert res.report.n[4] == 1

    def test_regimes_and_selection(self):
        js = [_journey([0, 1], True), _journey([1, 2, 0], False), _journey(list(range(5)) * 3, True)]
        ds = Dataset(js, 5, ["f"])
        pred = lambda batch: np.array([1 - 0.9 ** (1 + len(j)) for j in batch])  # noqa: E731
        res = at.attribute_dataset(ds, pred, ShapleyConfig(exact_max_len=12, n_permutations=50))
        assert [(r.index, r.regime) for r in res.journeys] == [(0, "exact"), (2, "sampled")]
        res_all = at.attribute_dataset(ds, pred, ShapleyConfig(n_permutations=50), converted_only=False)
        assert len(res_all.journeys) == 3
        assert res.report.mean_credit.sum() == pytest.approx(1.0)

    def test_seeded_report_identical(self, tmp_path):
        js = [_journey(np.random.default_rng(i).integers(0, 3, 14), True, f"u{i}") for i in range(3)]
        ds = Dataset(js, 3, ["f"])
        pred = lambda batch: np.array([1 - 0.9 ** sum(1 + tp.channel for tp in j.touchpoints) for j in batch])  # noqa: E731
        cfg = ShapleyConfig(n_permutations=100, seed=9)
        a, b = at.attribute_dataset(ds, pred, cfg), at.attribute_dataset(ds, pred, cfg)
        a.save_jsonl(tmp_path / "a.jsonl", {"k": 1})
        b.save_jsonl(tmp_path / "b.jsonl", {"k": 1})
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        a.save_report_csv(tmp_path / "a.csv")
        b.save_report_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        back, meta = at.AttributionResult.load_jsonl(tmp_path / "a.jsonl")
        assert meta == {"k": 1} and [r.index for r in back.journeys] == [0, 1, 2]
        np.testing.assert_array_equal(back.journeys[1].sv, a.journeys[1].sv)
