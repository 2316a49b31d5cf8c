"""Journey data model, JSONL interchange, Criteo-style preprocessing and splitting.

A journey file holds one JSON object per line::

    {"user_id": "u17", "user_attrs": {"age": "mid", "score": 0.3},
     "touchpoints": [{"channel": 2, "ts": 1000.0, "features": [0.0, 1.0]}, ...],
     "converted": false}

Touchpoints may carry an optional ``"cost"``. The first line may instead be
a schema record ``{"schema": {"n_channels": K, "feature_names": [...],
"user_attrs": {...}}}``; without it K is inferred from the data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0


class DataError(ValueError):
    """Invalid journey data."""


@dataclass(frozen=True)
class Touchpoint:
    channel: int
    ts: float
    features: tuple[float, ...] = ()
    cost: float | None = None


@dataclass(frozen=True)
class Journey:
    user_id: str
    user_attrs: dict
    touchpoints: tuple[Touchpoint, ...]
    converted: bool

    @property
    def channels(self) -> list[int]:
        return [tp.channel for tp in self.touchpoints]

    def __len__(self) -> int:
        return len(self.touchpoints)


@dataclass
class Dataset:
    journeys: list[Journey]
    n_channels: int
    feature_names: list[str] = field(default_factory=list)
    user_schema: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.journeys:
            raise DataError("no journeys")
        validate(self)

    def __len__(self) -> int:
        return len(self.journeys)

    def __iter__(self):
        return iter(self.journeys)

    def __getitem__(self, i):
        return self.journeys[i]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([j.converted for j in self.journeys], dtype=np.int64)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.journeys[i] for i in idx], self.n_channels, list(self.feature_names),
                       dict(self.user_schema))

    def users(self) -> set[str]:
        return {j.user_id for j in self.journeys}


def infer_user_schema(journeys: Sequence[Journey]) -> dict[str, str]:
    kinds: dict[str, str] = {}
    for j in journeys:
        for k, v in j.user_attrs.items():
            kind = "categorical" if isinstance(v, str) else "numeric"
            if kinds.get(k, kind) != kind:
                raise DataError(f"user attribute {k!r} mixes strings and numbers")
            kinds[k] = kind
    return dict(sorted(kinds.items()))


def validate(ds: Dataset) -> None:
    nf = ds.n_features
    for i, j in enumerate(ds.journeys):
        _validate_journey(j, ds.n_channels, nf, f"journey {i}")


def _validate_journey(j: Journey, k: int, nf: int | None, where: str) -> None:
    if not j.touchpoints:
        raise DataError(f"{where}: journey has no touchpoints")
    prev = -math.inf
    for tp in j.touchpoints:
        if not 0 <= tp.channel < k:
            raise DataError(f"{where}: channel {tp.channel} outside [0, {k})")
        if tp.ts < prev:
            raise DataError(f"{where}: timestamps are not monotone")
        prev = tp.ts
        if nf is not None and len(tp.features) != nf:
            raise DataError(f"{where}: expected {nf} features, got {len(tp.features)}")


# -- JSONL -------------------------------------------------------------------

def _journey_from_obj(obj: dict) -> Journey:
    tps = tuple(
        Touchpoint(int(t["channel"]), float(t["ts"]), tuple(float(x) for x in t.get("features", ())),
                   None if t.get("cost") is None else float(t["cost"]))
        for t in obj["touchpoints"]
    )
    return Journey(str(obj["user_id"]), dict(obj.get("user_attrs", {})), tps, bool(obj["converted"]))


def journey_to_obj(j: Journey) -> dict:
    tps = []
    for tp in j.touchpoints:
        d = {"channel": tp.channel, "ts": tp.ts, "features": list(tp.features)}
        if tp.cost is not None:
            d["cost"] = tp.cost
        tps.append(d)
    return {"user_id": j.user_id, "user_attrs": j.user_attrs, "touchpoints": tps, "converted": j.converted}


def load_journeys(path, n_channels: int | None = None) -> Dataset:
    """Read and validate a journey JSONL file. Errors name the offending line."""
    journeys: list[Journey] = []
    schema: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if lineno == 1 and "schema" in obj:
                schema = obj["schema"]
                continue
            try:
                journeys.append(_journey_from_obj(obj))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: malformed journey record ({exc})") from None
            k = n_channels or schema.get("n_channels") or 2**62
            if "feature_names" in schema:
                nf = len(schema["feature_names"])
            else:
                first = journeys[0].touchpoints
                nf = len(first[0].features) if first else None
            _validate_journey(journeys[-1], k, nf, f"line {lineno}")
    if not journeys:
        raise DataError("no journeys")
    k = n_channels or schema.get("n_channels") or 1 + max(tp.channel for j in journeys for tp in j.touchpoints)
    names = schema.get("feature_names") or [f"f{i}" for i in range(len(journeys[0].touchpoints[0].features))]
    user_schema = schema.get("user_attrs") or infer_user_schema(journeys)
    return Dataset(journeys, int(k), list(names), dict(user_schema))


def save_journeys(ds: Dataset, path, with_schema: bool = True, meta: dict | None = None) -> None:
    """Write JSONL; the optional first line carries the schema and any ``meta``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if with_schema:
            schema = {"n_channels": ds.n_channels, "feature_names": ds.feature_names, "user_attrs": ds.user_schema}
            head = {"schema": schema} if meta is None else {"schema": schema, "meta": meta}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
        for j in ds.journeys:
            fh.write(json.dumps(journey_to_obj(j), sort_keys=True) + "\n")


# -- Criteo-style preprocessing ----------------------------------------------

@dataclass(frozen=True)
class RawImpression:
    timestamp: float
    user_id: str
    campaign: str
    click: int
    conversion_id: str
    side: dict = field(default_factory=dict)
    cost: float | None = None


NO_CONVERSION = "-1"
CRITEO_FEATURES = ["click", "elapsed_seconds"]


def read_raw_csv(path) -> list[RawImpression]:
    """Read impressions from a CSV with at least ``timestamp,uid,campaign,click,conversion_id``."""
    required = {"timestamp", "uid", "campaign", "click", "conversion_id"}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"raw CSV missing columns: {sorted(missing)}")
        for row in reader:
            cost = row.get("cost")
            side = {k: v for k, v in row.items() if k not in required | {"cost"}}
            out.append(RawImpression(float(row["timestamp"]), row["uid"], row["campaign"], int(float(row["click"])),
                                     str(int(float(row["conversion_id"]))) if _is_num(row["conversion_id"]) else row["conversion_id"],
                                     side, float(cost) if cost not in (None, "") else None))
    return out


def _is_num(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def criteo_preprocess(records: Sequence[RawImpression], top_n: int = 10, min_len: int = 3,
                      gap_days: float = 3) -> Dataset:
    """Turn raw impressions into journeys.

    Steps, in order: keep the ``top_n`` campaigns by impression count; group
    by (user, conversion id) and sort by time; split non-converting groups at
    gaps longer than ``gap_days``; drop journeys shorter than ``min_len``;
    label groups with a conversion id as converted. Channels are assigned by
    descending impression count over the surviving journeys, ties by
    campaign id.
    """
    if not records:
        raise DataError("no raw impressions")
    counts = Counter(r.campaign for r in records)
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    if len(ranked) < top_n:
        log.warning("only %d distinct campaigns (< top_n=%d); keeping all", len(ranked), top_n)
    keep = set(ranked[:top_n])

    groups: dict[tuple[str, str], list[tuple[int, RawImpression]]] = defaultdict(list)
    for order, r in enumerate(records):
        if r.campaign in keep:
            groups[(r.user_id, str(r.conversion_id))].append((order, r))

    gap = gap_days * SECONDS_PER_DAY
    pieces: list[tuple[str, bool, list[RawImpression]]] = []
    for (uid, conv), items in groups.items():
        seq = [r for _, r in sorted(items, key=lambda x: (x[1].timestamp, x[0]))]
        converted = conv != NO_CONVERSION
        if converted:
            pieces.append((uid, True, seq))
            continue
        cur = [seq[0]]
        for prev, r in zip(seq, seq[1:]):
            if r.timestamp - prev.timestamp > gap:
                pieces.append((uid, False, cur))
                cur = []
            cur.append(r)
        pieces.append((uid, False, cur))

    pieces = [p for p in pieces if len(p[2]) >= min_len]
    if not pieces:
        raise DataError("no journeys survive preprocessing")
    final_counts = Counter(r.campaign for _, _, seq in pieces for r in seq)
    channel_of = {c: k for k, c in enumerate(sorted(final_counts, key=lambda c: (-final_counts[c], c)))}

    pieces.sort(key=lambda p: (p[2][0].timestamp, p[0], not p[1], p[2][-1].timestamp))
    journeys = []
    for uid, converted, seq in pieces:
        t0 = seq[0].timestamp
        tps = tuple(Touchpoint(channel_of[r.campaign], r.timestamp, (float(r.click), r.timestamp - t0),
                               r.cost if r.cost is not None else 1.0) for r in seq)
        journeys.append(Journey(uid, {"user": uid}, tps, converted))
    return Dataset(journeys, len(channel_of), list(CRITEO_FEATURES), {"user": "categorical"})


def dataset_to_records(ds: Dataset) -> list[RawImpression]:
    """Inverse view of a preprocessed dataset, one record per touchpoint.

    Converted journeys get distinct conversion ids; the rest get -1.
    """
    out = []
    for i, j in enumerate(ds.journeys):
        conv = str(i) if j.converted else NO_CONVERSION
        for tp in j.touchpoints:
            out.append(RawImpression(tp.ts, j.user_id, str(tp.channel), int(tp.features[0]), conv, {}, tp.cost))
    return out


# -- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")


def _unit_hash(seed: int, index: int, user: str) -> float:
    h = hashlib.blake2b(f"{seed}:{index}:{user}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0**64


def train_test_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Hash-partition journeys; test journeys of users unseen in train move to train.

    Returns ``(train, test)``; ``test`` is None when the user-subset rule
    empties it.
    """
    test_idx = [i for i, j in enumerate(ds.journeys) if _unit_hash(spec.seed, i, j.user_id) < spec.test_fraction]
    test_set = set(test_idx)
    train_idx = [i for i in range(len(ds)) if i not in test_set]
    train_users = {ds.journeys[i].user_id for i in train_idx}
    moved = {i for i in test_idx if ds.journeys[i].user_id not in train_users}
    train_idx = sorted(set(train_idx) | moved)
    test_idx = [i for i in test_idx if i not in moved]
    train = ds.subset(train_idx)
    if not test_idx:
        log.warning("test split is empty after enforcing the user-subset rule")
        return train, None  # type: ignore[return-value]
    return train, ds.subset(test_idx)


def journey_costs(j: Journey, channel_costs: Sequence[float] | None = None) -> np.ndarray:
    """Per-touchpoint cost: explicit cost, else the channel's unit cost, else 1."""
    out = np.empty(len(j.touchpoints))
    for t, tp in enumerate(j.touchpoints):
        if tp.cost is not None:
            out[t] = tp.cost
        elif channel_costs is not None:
            out[t] = channel_costs[tp.channel]
        else:
            out[t] = 1.0
    return out
