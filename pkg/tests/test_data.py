import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smattn.data import (
    Event, EventSequence, Vocabulary, build_sequences, dataset_from_dict, dataset_to_dict, events_to_text,
    normalize_time, parse_events, parse_group_map, split_strong_generalization,
)
from smattn.errors import ConfigError, EmptyDatasetError, ParseError, VocabularyError


def test_parse_single_line():
    assert parse_events(io.StringIO("u1,i3,1609459200\n")) == [Event("u1", "i3", 1609459200)]


def test_parse_empty():
    assert parse_events(io.StringIO("")) == []


def test_parse_preserves_order():
    text = "u1,a,5\nu2,b,3\nu1,c,1\nu3,a,9\nu2,a,2\nu1,b,7\n"
    ev = parse_events(io.StringIO(text))
    assert [(e.user_id, e.item_id, e.timestamp) for e in ev] == [
        ("u1", "a", 5), ("u2", "b", 3), ("u1", "c", 1), ("u3", "a", 9), ("u2", "a", 2), ("u1", "b", 7)]


def test_parse_header_detected():
    ev = parse_events(io.StringIO("user_id,item_id,timestamp\nu1,i1,10\n"))
    assert ev == [Event("u1", "i1", 10)]


def test_parse_errors_carry_line():
    with pytest.raises(ParseError, match="line 3"):
        parse_events(io.StringIO("u1,i1,1\nu1,i2,2\nu1,i3\n"))
    with pytest.raises(ParseError, match="line 2"):
        parse_events(io.StringIO("u1,i1,1\nu1,i2,-4\n"))
    with pytest.raises(ParseError, match="line 2"):
        parse_events(io.StringIO('{"user": "a", "item": "b", "ts": 1}\n{"user": "a"}\n'), "jsonl")


def test_parse_jsonl():
    ev = parse_events(io.StringIO('{"user": "u", "item": "i", "ts": 4}\n'), "jsonl")
    assert ev == [Event("u", "i", 4)]


def test_unknown_format():
    with pytest.raises(ConfigError):
        parse_events(io.StringIO(""), "xml")


ids = st.text(alphabet="abcxyz019_", min_size=1, max_size=6)
events_st = st.lists(st.builds(Event, ids, ids, st.integers(0, 2**40)), max_size=30)


@settings(max_examples=100, deadline=None)
@given(events_st, st.sampled_from(["csv", "jsonl"]))
def test_round_trip(events, fmt):
    assert parse_events(io.StringIO(events_to_text(events, fmt)), fmt) == events


def _events(rows):
    return [Event(u, i, t) for u, i, t in rows]


def test_build_boundary_kept():
    vocab, seqs = build_sequences(_events([("u", f"i{k}", k) for k in range(5)]), 5, 1)
    assert len(seqs) == 1 and len(seqs[0]) == 5


def test_build_boundary_dropped():
    with pytest.raises(EmptyDatasetError):
        build_sequences(_events([("u", f"i{k}", k) for k in range(4)]), 5, 1)


def test_build_fixed_point_by_hand():
    # item "rare" occurs twice and is dropped at min_item_count=3; that leaves
    # user B with 2 events (< 3), whose removal drops "b" below 3 as well, which
    # in turn shortens user C to 2 events and removes it. Only A survives.
    rows = [("A", "a", 1), ("A", "a", 2), ("A", "a", 3),
            ("B", "rare", 1), ("B", "rare", 2), ("B", "b", 3), ("B", "b", 4),
            ("C", "b", 1), ("C", "a", 2), ("C", "c", 3)]
    vocab, seqs = build_sequences(_events(rows), 3, 3)
    assert [s.user_id for s in seqs] == ["A"]
    assert vocab.item_ids == ("a",)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABCDE"), st.sampled_from("pqrst"), st.integers(0, 50)),
                min_size=1, max_size=60),
       st.integers(1, 4), st.integers(1, 4))
def test_build_thresholds_hold(rows, mu, mi):
    try:
        vocab, seqs = build_sequences(_events(rows), mu, mi)
    except EmptyDatasetError:
        return
    counts = {}
    for s in seqs:
        assert len(s) >= mu
        assert np.all(np.diff(s.times) >= 0)
        for i in s.items:
            counts[int(i)] = counts.get(int(i), 0) + 1
    assert all(c >= mi for c in counts.values())
    assert set(counts) == set(range(vocab.n))


def test_build_stable_ties():
    vocab, seqs = build_sequences(_events([("u", "z", 5), ("u", "a", 5), ("u", "m", 1)]), 1, 1)
    assert [vocab.item(int(i)) for i in seqs[0].items] == ["m", "z", "a"]


def test_normalize_units():
    s = normalize_time(EventSequence("u", [0, 86400], [0, 0]))
    assert list(s.times) == [0.0, 1.0]
    assert list(normalize_time(EventSequence("u", [77], [0])).times) == [0.0]
    assert list(normalize_time(EventSequence("u", [5, 5, 5], [0, 1, 2])).times) == [0.0, 0.0, 0.0]


def test_normalize_keeps_origin():
    s = normalize_time(EventSequence("u", [1000, 87400], [0, 0]))
    assert s.t0 == 1000


def _users(n):
    return [EventSequence(f"u{k}", [0.0, 1.0, 2.0], [0, 1, 2]) for k in range(n)]


def test_split_sizes():
    p = split_strong_generalization(_users(10), (8, 1, 1), 0)
    assert (len(p.train), len(p.validation), len(p.test)) == (8, 1, 1)
    p = split_strong_generalization(_users(12), (8, 1, 1), 0)
    assert (len(p.train), len(p.validation), len(p.test)) == (10, 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 60), st.integers(0, 1000))
def test_split_partition_and_determinism(n, seed):
    users = _users(n)
    a = split_strong_generalization(users, (8, 1, 1), seed)
    b = split_strong_generalization(users, (8, 1, 1), seed)
    assert a == b
    all_users = a.train + a.validation + a.test
    assert sorted(all_users) == sorted(s.user_id for s in users)
    assert len(set(all_users)) == n


def test_split_holdout_is_last_event():
    users = [EventSequence(f"u{k}", [0.0, 1.0, 2.5], [3, 1, k]) for k in range(10)]
    p = split_strong_generalization(users, (8, 1, 1), 4)
    for u in p.validation + p.test:
        h = p.holdouts[u]
        k = int(u[1:])
        assert h.target_item == k and h.target_time == 2.5 and len(h.context) == 2


def test_single_event_users_excluded_from_holdouts(caplog):
    users = [EventSequence(f"u{k}", [0.0], [0]) for k in range(10)]
    p = split_strong_generalization(users, (8, 1, 1), 0)
    assert p.holdouts == {}
    assert "single event" in caplog.text


def test_dataset_round_trip():
    vocab = Vocabulary(("a", "b", "c"))
    seqs = [EventSequence(f"u{k}", [0.0, 0.1 * k + 1 / 3, 2.0], [0, 1, 2], t0=k) for k in range(10)]
    plan = split_strong_generalization(seqs, (8, 1, 1), 2)
    doc = json.loads(json.dumps(dataset_to_dict(vocab, seqs, plan)))
    v2, s2, p2 = dataset_from_dict(doc)
    assert v2 == vocab
    assert all(np.array_equal(a.times, b.times) and a.t0 == b.t0 for a, b in zip(seqs, s2))
    assert p2 == plan


def test_group_map_and_vocab():
    mapping = parse_group_map(io.StringIO("item_id,group_id\na,g2\nb,g1\nc,g2\n"))
    v = Vocabulary(("a", "b", "c")).with_groups(mapping)
    assert v.groups == (1, 0, 1) and v.n_groups == 2
    with pytest.raises(VocabularyError):
        v.index("zz")
    with pytest.raises(ConfigError):
        Vocabulary(("a", "q")).with_groups(mapping)
