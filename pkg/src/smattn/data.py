"""Event logs, per-user sequences and the strong-generalization split."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError, VocabularyError

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0
FORMATS = ("csv", "jsonl")


@dataclass(frozen=True)
class Event:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True, eq=False)
class EventSequence:
    """One user's events in time order.

    `times` are raw seconds straight out of `build_sequences` and days since
    the first event after `normalize_time`; `t0` keeps the raw timestamp of
    the first event so normalized times can be mapped back.
    """

    user_id: str
    times: np.ndarray
    items: np.ndarray
    t0: int = 0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        items = np.asarray(self.items, dtype=np.int64)
        if times.ndim != 1 or times.shape != items.shape:
            raise ValueError("times and items must be 1-D and equally long")
        if times.size == 0:
            raise ValueError("an event sequence needs at least one event")
        if np.any(np.diff(times) < 0):
            raise ValueError("event times must be nondecreasing")
        times.setflags(write=False)
        items.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "items", items)

    def __len__(self):
        return int(self.times.size)

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (self.user_id == other.user_id and self.t0 == other.t0
                and np.array_equal(self.times, other.times) and np.array_equal(self.items, other.items))

    __hash__ = None

    def prefix(self, length: int) -> "EventSequence":
        return EventSequence(self.user_id, self.times[:length], self.items[:length], self.t0)

    def to_dict(self) -> dict:
        return {
            "user": self.user_id,
            "t0": int(self.t0),
            "times": [float(t).hex() for t in self.times],
            "items": [int(i) for i in self.items],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EventSequence":
        return cls(d["user"], [float.fromhex(t) for t in d["times"]], d["items"], d.get("t0", 0))


@dataclass
class Vocabulary:
    item_ids: tuple[str, ...]
    groups: tuple[int, ...] | None = None
    group_ids: tuple[str, ...] | None = None
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.item_ids = tuple(self.item_ids)
        self._index = {item: k for k, item in enumerate(self.item_ids)}
        if len(self._index) != len(self.item_ids):
            raise VocabularyError("duplicate item ids in vocabulary")
        if self.groups is not None:
            self.groups = tuple(int(g) for g in self.groups)
            if len(self.groups) != len(self.item_ids):
                raise VocabularyError("group map must cover every item")
            if sorted(set(self.groups)) != list(range(max(self.groups) + 1)):
                raise VocabularyError("group indices must be dense in [0, G)")

    @property
    def n(self) -> int:
        return len(self.item_ids)

    @property
    def n_groups(self) -> int:
        return self.n if self.groups is None else max(self.groups) + 1

    def index(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise VocabularyError(f"unknown item {item_id!r}") from None

    def item(self, index: int) -> str:
        if not 0 <= index < self.n:
            raise VocabularyError(f"item index {index} outside [0, {self.n})")
        return self.item_ids[index]

    def with_groups(self, mapping: dict[str, str]) -> "Vocabulary":
        """Attach an item_id -> group_id map; group ids are densified in sorted order."""
        missing = [i for i in self.item_ids if i not in mapping]
        if missing:
            raise ConfigError(f"group map lacks {len(missing)} items, e.g. {missing[0]!r}")
        names = sorted({mapping[i] for i in self.item_ids}, key=_natural_key)
        dense = {g: k for k, g in enumerate(names)}
        return Vocabulary(self.item_ids, tuple(dense[mapping[i]] for i in self.item_ids), tuple(names))

    def to_dict(self) -> dict:
        return {"items": list(self.item_ids),
                "groups": None if self.groups is None else list(self.groups),
                "group_ids": None if self.group_ids is None else list(self.group_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["items"]), d.get("groups"), d.get("group_ids") and tuple(d["group_ids"]))


def _natural_key(s: str):
    digits = "".join(ch for ch in s if ch.isdigit())
    return (s.rstrip("0123456789"), int(digits) if digits else -1, s)


# -- parsing -----------------------------------------------------------------------

def _is_int(text: str) -> bool:
    try:
        int(text)
    except ValueError:
        return False
    return True


def parse_events(stream: TextIO | Iterable[str], fmt: str = "csv") -> list[Event]:
    """Read events from CSV (`user_id,item_id,timestamp`) or JSONL (`user`, `item`, `ts`)."""
    if fmt not in FORMATS:
        raise ConfigError(f"unknown event format {fmt!r}; expected one of {FORMATS}")
    events = []
    if fmt == "csv":
        for lineno, row in enumerate(csv.reader(stream), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", lineno)
            user, item, ts = (c.strip() for c in row)
            if lineno == 1 and not _is_int(ts):
                continue  # header
            if not _is_int(ts):
                raise ParseError(f"timestamp {ts!r} is not an integer", lineno)
            if not user or not item:
                raise ParseError("empty user or item id", lineno)
            if int(ts) < 0:
                raise ParseError(f"negative timestamp {ts}", lineno)
            events.append(Event(user, item, int(ts)))
        return events

    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            user, item, ts = obj["user"], obj["item"], obj["ts"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed JSONL record ({exc})", lineno) from None
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise ParseError(f"timestamp {ts!r} is not an integer", lineno)
        if ts < 0:
            raise ParseError(f"negative timestamp {ts}", lineno)
        events.append(Event(str(user), str(item), ts))
    return events


def write_events(events: Iterable[Event], stream: TextIO, fmt: str = "csv", header: bool = True):
    if fmt not in FORMATS:
        raise ConfigError(f"unknown event format {fmt!r}")
    if fmt == "csv":
        w = csv.writer(stream, lineterminator="\n")
        if header:
            w.writerow(["user_id", "item_id", "timestamp"])
        for e in events:
            w.writerow([e.user_id, e.item_id, e.timestamp])
    else:
        for e in events:
            stream.write(json.dumps({"user": e.user_id, "item": e.item_id, "ts": e.timestamp}) + "\n")


def events_to_text(events: Iterable[Event], fmt: str = "csv") -> str:
    buf = io.StringIO()
    write_events(events, buf, fmt)
    return buf.getvalue()


def parse_group_map(stream: TextIO | Iterable[str]) -> dict[str, str]:
    """CSV `item_id,group_id`, header optional."""
    mapping = {}
    for lineno, row in enumerate(csv.reader(stream), start=1):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 fields, got {len(row)}", lineno)
        item, group = (c.strip() for c in row)
        if lineno == 1 and (item, group) == ("item_id", "group_id"):
            continue
        mapping[item] = group
    return mapping


# -- sequences ---------------------------------------------------------------------

def build_sequences(
    events: Sequence[Event], min_user_events: int = 5, min_item_count: int = 1
) -> tuple[Vocabulary, list[EventSequence]]:
    """Filter users/items to a joint fixed point and build per-user sequences.

    Items are counted per occurrence. Within a user, events are ordered by
    timestamp with ties kept in input order.
    """
    if min_user_events < 1 or min_item_count < 1:
        raise ConfigError("filter thresholds must be >= 1")
    keep = list(range(len(events)))
    while True:
        users = Counter(events[i].user_id for i in keep)
        items = Counter(events[i].item_id for i in keep)
        nxt = [i for i in keep
               if users[events[i].user_id] >= min_user_events
               and items[events[i].item_id] >= min_item_count]
        if len(nxt) == len(keep):
            break
        keep = nxt
    if not keep:
        raise EmptyDatasetError("no events survive the user/item filters")

    vocab = Vocabulary(tuple(sorted({events[i].item_id for i in keep}, key=_natural_key)))
    per_user: dict[str, list[int]] = {}
    for i in keep:
        per_user.setdefault(events[i].user_id, []).append(i)
    seqs = []
    for user in sorted(per_user, key=_natural_key):
        rows = sorted(per_user[user], key=lambda i: (events[i].timestamp, i))
        seqs.append(EventSequence(
            user,
            [float(events[i].timestamp) for i in rows],
            [vocab.index(events[i].item_id) for i in rows],
            t0=events[rows[0]].timestamp,
        ))
    return vocab, seqs


def normalize_time(seq: EventSequence, scheme: str = "days_from_first") -> EventSequence:
    if scheme != "days_from_first":
        raise ConfigError(f"unknown time normalization {scheme!r}")
    days = (seq.times - seq.times[0]) / SECONDS_PER_DAY
    return EventSequence(seq.user_id, days, seq.items, int(seq.times[0]))


# -- split -------------------------------------------------------------------------

@dataclass(frozen=True)
class Holdout:
    context: EventSequence
    target_item: int
    target_time: float


@dataclass
class SplitPlan:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    holdouts: dict[str, Holdout]
    seed: int = 0

    def holdouts_for(self, which: str) -> list[Holdout]:
        users = {"validation": self.validation, "test": self.test}[which]
        return [self.holdouts[u] for u in users if u in self.holdouts]


def split_strong_generalization(
    sequences: Sequence[EventSequence], ratios: Sequence[float] = (8, 1, 1), seed: int = 0
) -> SplitPlan:
    """Partition users into train/validation/test; hold out each non-train user's last event.

    Validation and test sizes are floor(N * share); the remainder goes to
    training. Users with a single event stay in their set but get no holdout.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("split ratios must be three positive numbers")
    users = sorted({s.user_id for s in sequences}, key=_natural_key)
    if len(users) < 3:
        raise ConfigError("strong-generalization split needs at least 3 users")
    by_user = {s.user_id: s for s in sequences}
    order = np.random.default_rng(seed).permutation(len(users))
    shuffled = [users[i] for i in order]
    total = float(sum(ratios))
    n_val = int(np.floor(len(users) * ratios[1] / total))
    n_test = int(np.floor(len(users) * ratios[2] / total))
    n_train = len(users) - n_val - n_test
    train = tuple(shuffled[:n_train])
    val = tuple(shuffled[n_train:n_train + n_val])
    test = tuple(shuffled[n_train + n_val:])

    holdouts = {}
    for user in val + test:
        seq = by_user[user]
        if len(seq) < 2:
            log.warning("user %s has a single event and is excluded from holdout metrics", user)
            continue
        holdouts[user] = Holdout(seq.prefix(len(seq) - 1), int(seq.items[-1]), float(seq.times[-1]))
    return SplitPlan(train, val, test, holdouts, seed)


# -- persistence --------------------------------------------------------------------

def dataset_to_dict(vocab: Vocabulary, sequences: Sequence[EventSequence], plan: SplitPlan) -> dict:
    return {
        "vocabulary": vocab.to_dict(),
        "sequences": [s.to_dict() for s in sequences],
        "split": {
            "seed": plan.seed,
            "train": list(plan.train),
            "validation": list(plan.validation),
            "test": list(plan.test),
            "holdouts": {
                u: {"context_length": len(h.context), "target_item": h.target_item,
                    "target_time": float(h.target_time).hex()}
                for u, h in plan.holdouts.items()
            },
        },
    }


def dataset_from_dict(d: dict) -> tuple[Vocabulary, list[EventSequence], SplitPlan]:
    vocab = Vocabulary.from_dict(d["vocabulary"])
    seqs = [EventSequence.from_dict(s) for s in d["sequences"]]
    by_user = {s.user_id: s for s in seqs}
    sp = d["split"]
    holdouts = {}
    for user, h in sp["holdouts"].items():
        seq = by_user[user]
        n = h["context_length"]
        holdouts[user] = Holdout(seq.prefix(n), int(h["target_item"]), float.fromhex(h["target_time"]))
    plan = SplitPlan(tuple(sp["train"]), tuple(sp["validation"]), tuple(sp["test"]), holdouts, sp.get("seed", 0))
    return vocab, seqs, plan
