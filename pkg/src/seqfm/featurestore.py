"""Sparse feature data model, event ingestion, leave-one-out split, negative sampling.

Static feature ids are laid out as ``[users | objects | side features]`` and
dynamic feature ids as ``[objects]``. An instance's static ids always start
with ``[user, candidate object]``.
"""

from __future__ import annotations

import logging
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import Rng

log = logging.getLogger(__name__)

PAD = -1  # distinguished padding marker; never a feature id


class ParseError(ValueError):
    def __init__(self, msg, line_no=None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {msg}" if line_no is not None else msg)


class FormatError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class FeatureSpace:
    m_static: int
    m_dynamic: int
    user_count: int
    object_count: int
    user_index: dict[str, int] = field(default_factory=dict)
    object_index: dict[str, int] = field(default_factory=dict)
    side_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.m_static < 1 or self.m_dynamic < 1:
            raise ValueError("feature space needs at least one static and one dynamic feature")

    @property
    def m(self) -> int:
        return self.m_static + self.m_dynamic

    def user_feature(self, user: int) -> int:
        return user

    def object_feature(self, obj: int) -> int:
        return self.user_count + obj

    def side_feature(self, key: str) -> int:
        return self.user_count + self.object_count + self.side_index[key]

    def to_dict(self) -> dict:
        return {
            "m_static": self.m_static,
            "m_dynamic": self.m_dynamic,
            "user_count": self.user_count,
            "object_count": self.object_count,
            "user_index": self.user_index,
            "object_index": self.object_index,
            "side_index": self.side_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        return cls(**d)


@dataclass(frozen=True)
class Instance:
    static_ids: tuple[int, ...]
    dynamic_ids: tuple[int, ...]
    label: float
    user_id: int
    timestamp: int
    object_id: int  # dense id of the candidate object (static slot 1)

    def with_candidate(self, space: "FeatureSpace", obj: int, label: float, side=None) -> "Instance":
        """Same user state and history, different candidate object."""
        ids = _static_ids(space, self.user_id, obj, side)
        return Instance(ids, self.dynamic_ids, float(label), self.user_id, self.timestamp, obj)


@dataclass(frozen=True)
class PaddedSequence:
    ids: tuple[int, ...]
    pad_count: int

    @property
    def real_entries(self) -> tuple[int, ...]:
        return self.ids[self.pad_count:]


@dataclass
class UserHistory:
    user_id: int
    events: list[tuple[int, int, float]]  # (object_id, timestamp, value)

    def objects(self) -> set[int]:
        return {e[0] for e in self.events}


@dataclass
class SplitDataset:
    train: list[Instance]
    validation: list[Instance]
    test: list[Instance]
    excluded_users: int = 0
    space: FeatureSpace | None = None
    visited: dict[int, set[int]] = field(default_factory=dict)  # user -> every object in the history
    side: dict | None = None


# ---------------------------------------------------------------------------
# ingestion


def _parse_events(path: Path):
    rows = []
    seen_data = False
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "user_id":
                if seen_data:
                    raise FormatError(f"line {line_no}: header repeated after data")
                seen_data = True
                continue
            seen_data = True
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", line_no)
            user, obj, ts, value = parts
            if not user or not obj:
                raise ParseError("empty user or object id", line_no)
            try:
                ts_i = int(ts)
            except ValueError:
                raise ParseError(f"timestamp {ts!r} is not an integer", line_no) from None
            try:
                val = float(value)
            except ValueError:
                raise ParseError(f"value {value!r} is not a number", line_no) from None
            if not np.isfinite(val):
                raise ParseError(f"value {value!r} is not finite", line_no)
            rows.append((user, obj, ts_i, val))
    return rows


def _parse_side_file(path: Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            key, *pairs = line.split("\t")
            for p in pairs:
                if "=" not in p:
                    raise ParseError(f"side feature {p!r} is not name=value", line_no)
                out.setdefault(key, []).append(p)
    return out


def filter_min_count(rows, min_count: int):
    """Drop users with fewer than ``min_count`` distinct objects and objects with
    fewer than ``min_count`` distinct users, repeating until nothing changes."""
    if min_count <= 1:
        return rows
    while True:
        user_objs: dict[str, set] = {}
        obj_users: dict[str, set] = {}
        for u, o, _, _ in rows:
            user_objs.setdefault(u, set()).add(o)
            obj_users.setdefault(o, set()).add(u)
        kept = [
            r for r in rows
            if len(user_objs[r[0]]) >= min_count and len(obj_users[r[1]]) >= min_count
        ]
        if len(kept) == len(rows):
            return kept
        rows = kept


def ingest_events(
    path,
    min_count: int = 10,
    user_features=None,
    object_features=None,
) -> tuple[FeatureSpace, list[UserHistory], dict[int, tuple[int, ...]]]:
    """Read a tab-separated event file into a feature space and per-user histories.

    Returns ``(space, histories, side)``. ``side`` maps a dense user id to that
    user's static side-feature ids, and ``-(obj + 1)`` to an object's.
    """
    rows = _parse_events(Path(path))
    if not rows:
        raise FormatError("no events")
    rows = filter_min_count(rows, min_count)
    if not rows:
        raise FormatError("no events left after min-count filtering")

    user_index: dict[str, int] = {}
    object_index: dict[str, int] = {}
    for u, o, _, _ in rows:
        user_index.setdefault(u, len(user_index))
        object_index.setdefault(o, len(object_index))

    side_index: dict[str, int] = {}
    raw_side: dict[int, list[str]] = {}
    for fpath, index, sign in ((user_features, user_index, 1), (object_features, object_index, -1)):
        if fpath is None:
            continue
        for key, pairs in _parse_side_file(Path(fpath)).items():
            if key not in index:
                continue
            tag = "u:" if sign > 0 else "o:"
            dense = index[key] if sign > 0 else -(index[key] + 1)
            for p in pairs:
                side_index.setdefault(tag + p, len(side_index))
                raw_side.setdefault(dense, []).append(tag + p)

    space = FeatureSpace(
        m_static=len(user_index) + len(object_index) + len(side_index),
        m_dynamic=len(object_index),
        user_count=len(user_index),
        object_count=len(object_index),
        user_index=user_index,
        object_index=object_index,
        side_index=side_index,
    )
    side = {k: tuple(space.side_feature(p) for p in v) for k, v in raw_side.items()}

    per_user: dict[int, list[tuple[int, int, float]]] = {}
    for u, o, ts, val in rows:
        per_user.setdefault(user_index[u], []).append((object_index[o], ts, val))
    # sorted() is stable, so equal timestamps keep file order
    histories = [
        UserHistory(uid, sorted(evts, key=lambda e: e[1])) for uid, evts in sorted(per_user.items())
    ]
    log.info("ingested %d events, %d users, %d objects", len(rows), space.user_count, space.object_count)
    return space, histories, side


# ---------------------------------------------------------------------------
# sequences and splits


def build_padded_sequence(history_prefix: Sequence[int], n_max: int) -> PaddedSequence:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    real = tuple(i for i in history_prefix if i != PAD)[-n_max:]
    pad = n_max - len(real)
    return PaddedSequence((PAD,) * pad + real, pad)


def _static_ids(space: FeatureSpace, user: int, obj: int, side) -> tuple[int, ...]:
    ids = (space.user_feature(user), space.object_feature(obj))
    if side:
        ids = ids + side.get(user, ()) + side.get(-(obj + 1), ())
    return ids


def make_instance(space, user, obj, history, label, timestamp, side=None) -> Instance:
    return Instance(
        _static_ids(space, user, obj, side), tuple(history), float(label), user, timestamp, obj
    )


def leave_one_out_split(
    histories: Iterable[UserHistory],
    space: FeatureSpace,
    min_events: int = 3,
    side=None,
) -> SplitDataset:
    """Per user: last event to test, second last to validation, the rest to train.

    Each instance's dynamic ids hold only events with a strictly earlier
    timestamp than its target.
    """
    if min_events < 3:
        raise ValueError("min_events must be >= 3")
    train, val, test = [], [], []
    excluded = 0
    visited = {}
    for h in histories:
        if len(h.events) < min_events:
            excluded += 1
            continue
        stamps = [e[1] for e in h.events]
        objs = [e[0] for e in h.events]
        insts = []
        for obj, ts, value in h.events:
            prior = objs[: bisect_left(stamps, ts)]
            insts.append(make_instance(space, h.user_id, obj, prior, value, ts, side))
        visited[h.user_id] = h.objects()
        train.extend(insts[:-2])
        val.append(insts[-2])
        test.append(insts[-1])
    if excluded:
        log.info("leave-one-out: excluded %d users with < %d events", excluded, min_events)
    return SplitDataset(train, val, test, excluded, space, visited, side)


def sample_negatives(user: UserHistory | set, pool, count: int, rng: Rng) -> list[int]:
    """Uniformly draw ``count`` objects from ``pool`` that the user never touched.

    Without replacement when the eligible pool is large enough, with
    replacement otherwise.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    positives = user.objects() if isinstance(user, UserHistory) else set(user)
    pool_arr = np.arange(pool) if isinstance(pool, (int, np.integer)) else np.asarray(sorted(pool))
    if positives:
        eligible = pool_arr[~np.isin(pool_arr, np.fromiter(positives, dtype=np.int64))]
    else:
        eligible = pool_arr
    if eligible.size == 0:
        raise SamplingError("no eligible negatives: every object in the pool is a positive")
    replace = eligible.size < count
    return [int(x) for x in rng.choice(eligible, size=count, replace=replace)]


def is_explicit_binary(instances: Iterable[Instance]) -> bool:
    """True when labels include 0 and are all 0/1, i.e. negatives are observed."""
    labels = Counter(i.label for i in instances)
    return 0.0 in labels and set(labels) <= {0.0, 1.0}


def user_objects(histories: Iterable[UserHistory]) -> dict[int, set[int]]:
    return {h.user_id: h.objects() for h in histories}
