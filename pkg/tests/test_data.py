import json

import numpy as np
import pytest

from causalmta import data
from causalmta.data import DataError, Dataset, Journey, RawImpression, SplitSpec, Touchpoint

DAY = 86400.0
T0 = 1_600_000_000.0


def _imp(day, uid, camp, conv="-1", click=0):
    return RawImpression(T0 + day * DAY, uid, camp, click, conv)


@pytest.fixture
def criteo_fixture():
    # Hand trace (top_n=3 keeps c1, c2, c3; c9 is dropped before gap splitting):
    #   A/-1 : 0d c1, 1d c2, 2d c1 | 6d c3, 6.5d c1, 7d c2   (4-day gap splits)
    #   B/77 : 1d c2, 1.2d c1, 1.5d c3                       (converted)
    #   B/-1 : 10d c2, 11d c1                                (length 2, dropped)
    # Surviving counts c1=4, c2=3, c3=2 -> channels 0, 1, 2.
    return [
        _imp(0, "A", "c1", click=1), _imp(1, "A", "c2"), _imp(2, "A", "c1"), _imp(3, "A", "c9"),
        _imp(6, "A", "c3"), _imp(6.5, "A", "c1"), _imp(7, "A", "c2", click=1),
        _imp(1, "B", "c2", "77"), _imp(1.5, "B", "c3", "77"), _imp(1.2, "B", "c1", "77"),
        _imp(10, "B", "c2"), _imp(11, "B", "c1"),
    ]


def _journey(channels, converted=False, uid="u", feats=None):
    tps = tuple(Touchpoint(c, float(i), tuple(feats or ())) for i, c in enumerate(channels))
    return Journey(uid, {"seg": "a"}, tps, converted)


class TestPreprocess:
    def test_hand_trace(self, criteo_fixture):
        ds = data.criteo_preprocess(criteo_fixture, top_n=3)
        assert len(ds) == 3
        assert ds.n_channels == 3
        assert [j.channels for j in ds] == [[0, 1, 0], [1, 0, 2], [2, 0, 1]]
        assert [j.converted for j in ds] == [False, True, False]
        assert [j.user_id for j in ds] == ["A", "B", "A"]
        first = ds[0]
        assert [tp.features for tp in first.touchpoints] == [(1.0, 0.0), (0.0, DAY), (0.0, 2 * DAY)]
        assert [tp.ts for tp in ds[1].touchpoints] == [T0 + DAY, T0 + 1.2 * DAY, T0 + 1.5 * DAY]

    def test_filter_runs_before_split(self, criteo_fixture):
        # keeping c9 closes the 4-day gap into two 3-day gaps, so A stays one group
        ds = data.criteo_preprocess(criteo_fixture, top_n=4)
        a_nonconv = [j for j in ds if j.user_id == "A"]
        assert len(a_nonconv) == 1 and len(a_nonconv[0]) == 7

    def test_two_impressions_dropped(self):
        recs = [_imp(0, "U", "c1"), _imp(1, "U", "c1"), _imp(0, "V", "c1"), _imp(0.1, "V", "c1"), _imp(0.2, "V", "c1")]
        ds = data.criteo_preprocess(recs, top_n=1)
        assert [j.user_id for j in ds] == ["V"]

    def test_four_day_gap_splits(self):
        recs = [_imp(d, "U", "c1") for d in (0, 0.5, 1, 5, 5.5, 6)]
        ds = data.criteo_preprocess(recs, top_n=1)
        assert [len(j) for j in ds] == [3, 3]

    def test_converted_groups_not_split(self):
        recs = [_imp(d, "U", "c1", conv="5") for d in (0, 0.5, 1, 5, 5.5, 6)]
        ds = data.criteo_preprocess(recs, top_n=1)
        assert [len(j) for j in ds] == [6]
        assert ds[0].converted

    def test_exactly_three_days_is_not_a_split(self):
        recs = [_imp(d, "U", "c1") for d in (0, 3, 6)]
        assert len(data.criteo_preprocess(recs, top_n=1)) == 1

    def test_few_campaigns_warns(self, criteo_fixture, caplog):
        with caplog.at_level("WARNING"):
            ds = data.criteo_preprocess(criteo_fixture, top_n=10)
        assert "distinct campaigns" in caplog.text
        assert ds.n_channels == 4

    def test_idempotent(self, criteo_fixture):
        once = data.criteo_preprocess(criteo_fixture, top_n=3)
        twice = data.criteo_preprocess(data.dataset_to_records(once), top_n=3)
        assert [j.channels for j in twice] == [j.channels for j in once]
        assert [j.converted for j in twice] == [j.converted for j in once]
        assert [j.touchpoints for j in twice] == [j.touchpoints for j in once]

    def test_cost_column(self, tmp_path):
        path = tmp_path / "raw.csv"
        rows = ["timestamp,uid,campaign,click,conversion_id,cost,cat1"]
        rows += [f"{T0 + i},U,7,0,-1,{0.5 * (i + 1)},x" for i in range(3)]
        path.write_text("\n".join(rows) + "\n")
        recs = data.read_raw_csv(path)
        assert recs[0].side == {"cat1": "x"}
        ds = data.criteo_preprocess(recs, top_n=1)
        assert [tp.cost for tp in ds[0].touchpoints] == [0.5, 1.0, 1.5]

    def test_csv_missing_columns(self, tmp_path):
        path = tmp_path / "raw.csv"
        path.write_text("timestamp,uid\n1,2\n")
        with pytest.raises(DataError, match="missing columns"):
            data.read_raw_csv(path)


class TestJsonl:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with pytest.raises(DataError, match="no journeys"):
            data.load_journeys(p)

    def test_single_line(self, tmp_path):
        p = tmp_path / "one.jsonl"
        rec = {"user_id": "u1", "user_attrs": {"age": "young"}, "converted": True,
               "touchpoints": [{"channel": 0, "ts": 1.0, "features": [0.5]},
                               {"channel": 2, "ts": 2.0, "features": [0.1]},
                               {"channel": 1, "ts": 2.0, "features": [0.0]}]}
        p.write_text(json.dumps(rec) + "\n")
        ds = data.load_journeys(p)
        assert len(ds) == 1 and len(ds[0]) == 3
        assert ds.n_channels == 3
        assert ds[0].channels == [0, 2, 1]
        assert ds.user_schema == {"age": "categorical"}

    def test_channel_out_of_range_names_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        good = {"user_id": "u", "user_attrs": {}, "converted": False, "touchpoints": [{"channel": 1, "ts": 0, "features": []}]}
        bad = dict(good, touchpoints=[{"channel": 3, "ts": 0, "features": []}])
        p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(DataError, match="line 2"):
            data.load_journeys(p, n_channels=3)

    def test_non_monotone(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        rec = {"user_id": "u", "user_attrs": {}, "converted": False,
               "touchpoints": [{"channel": 0, "ts": 5, "features": []}, {"channel": 0, "ts": 4, "features": []}]}
        p.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataError, match="line 1.*monotone"):
            data.load_journeys(p)

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"user_id": "u", "user_attrs": {}, "converted": false, "touchpoints": []}\n{oops\n')
        with pytest.raises(DataError, match="line 1"):
            data.load_journeys(p)
        p.write_text('{"user_id": "u", "user_attrs": {}, "converted": false, "touchpoints": [{"channel": 0, "ts": 0}]}\n{oops\n')
        with pytest.raises(DataError, match="line 2"):
            data.load_journeys(p)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        journeys = []
        for i in range(20):
            tps = tuple(Touchpoint(int(rng.integers(4)), float(t) + 0.1, tuple(rng.normal(size=2)),
                                   float(rng.uniform()) if i % 2 else None)
                        for t in sorted(rng.uniform(0, 100, size=rng.integers(1, 6))))
            journeys.append(Journey(f"u{i % 7}", {"seg": "x", "score": float(rng.normal())}, tps, bool(i % 3)))
        ds = Dataset(journeys, 4, ["a", "b"], {"score": "numeric", "seg": "categorical"})
        for with_schema in (True, False):
            path = tmp_path / f"rt{with_schema}.jsonl"
            data.save_journeys(ds, path, with_schema=with_schema)
            back = data.load_journeys(path, n_channels=4)
            assert back.journeys == ds.journeys
            assert back.n_channels == 4
            if with_schema:
                assert back.feature_names == ["a", "b"]
                assert back.user_schema == ds.user_schema


class TestSplit:
    def _many(self, n=1000, users=150, seed=0):
        rng = np.random.default_rng(seed)
        return Dataset([_journey([int(rng.integers(3))], uid=f"u{rng.integers(users)}") for _ in range(n)], 3)

    def test_single_user_single_journey_stays_in_train(self):
        ds = Dataset([_journey([0, 1])], 2)
        for seed in range(50):
            train, test = data.train_test_split(ds, SplitSpec(0.01, seed))
            assert len(train) == 1 and test is None

    def test_deterministic(self):
        ds = self._many()
        a = data.train_test_split(ds, SplitSpec(0.2, 3))
        b = data.train_test_split(ds, SplitSpec(0.2, 3))
        assert a[0].journeys == b[0].journeys and a[1].journeys == b[1].journeys

    def test_user_subset_and_partition(self):
        ds = self._many(users=900)
        train, test = data.train_test_split(ds, SplitSpec(0.2, 1))
        assert test.users() <= train.users()
        assert len(train) + len(test) == len(ds)
        ids = {id(j) for j in train} | {id(j) for j in test}
        assert ids == {id(j) for j in ds}
        assert 0.1 < len(test) / len(ds) < 0.25

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            SplitSpec(1.0)


def test_journey_costs():
    j = Journey("u", {}, (Touchpoint(0, 0.0), Touchpoint(1, 1.0, (), 7.0)), False)
    np.testing.assert_array_equal(data.journey_costs(j), [1.0, 7.0])
    np.testing.assert_array_equal(data.journey_costs(j, [2.0, 3.0]), [2.0, 7.0])
