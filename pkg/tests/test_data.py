from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iagnn.data import (
    DataError,
    Example,
    RawSession,
    Vocabulary,
    augment_sessions,
    dataset_stats,
    filter_and_index,
    filter_sessions,
    load_dataset,
    most_recent_fraction,
    parse_interactions,
    preprocess,
    read_examples,
    save_dataset,
    split_dataset,
    split_sessions,
    write_examples,
)


def session(sid, items, cats=None, t0=0):
    cats = cats or ["x"] * len(items)
    return RawSession(sid, [(v, c, t0 + k) for k, (v, c) in enumerate(zip(items, cats))])


# parsing ----------------------------------------------------------------------


def test_empty_stream():
    assert parse_interactions([]).sessions == []


def test_events_sorted_by_timestamp():
    res = parse_interactions(["s1,a,x,3", "s1,b,y,1"])
    assert len(res.sessions) == 1
    assert res.sessions[0].events == [("b", "y", 1), ("a", "x", 3)]


def test_one_malformed_line_is_skipped():
    lines = [f"s{k % 3},i{k},c1,{k}" for k in range(10)] + ["garbage line"]
    res = parse_interactions(lines)
    assert sum(len(s.events) for s in res.sessions) == 10
    assert res.malformed_count == 1


def test_mostly_malformed_is_fatal():
    with pytest.raises(DataError, match="malformed"):
        parse_interactions(["s1,a,x,1", "bad", "worse", "s2;b;y;2"])


def test_tab_separator():
    res = parse_interactions(["s1\ta\tx\t1", "s1\tb\tx\t2"], sep="tab")
    assert res.sessions[0].items == ["a", "b"]


def test_timestamp_ties_keep_file_order():
    res = parse_interactions(["s,b,x,5", "s,a,x,5", "s,c,x,1"])
    assert res.sessions[0].items == ["c", "b", "a"]


# augmentation ----------------------------------------------------------------------


def test_augment_rule():
    exs = augment_sessions([session("s", ["a", "b", "c"], ["x", "y", "x"])])
    assert [(e.prefix_items, e.label_item, e.target_category) for e in exs] == [
        (("a",), "b", "y"),
        (("a", "b"), "c", "x"),
    ]


def test_single_event_session_has_no_examples():
    assert augment_sessions([session("s", ["a"])]) == []


def test_repeated_item_allowed():
    exs = augment_sessions([session("s", ["a", "a"], ["x", "x"])])
    assert [(e.prefix_items, e.label_item, e.target_category) for e in exs] == [(("a",), "a", "x")]


def test_prefix_cap_keeps_most_recent():
    exs = augment_sessions([session("s", [str(k) for k in range(60)])], max_prefix_len=50)
    assert len(exs[-1].prefix_items) == 50
    assert exs[-1].prefix_items[-1] == "58" and exs[-1].prefix_items[0] == "9"


# filtering ----------------------------------------------------------------------


def test_rare_item_removed_and_short_session_dropped():
    common = [session(f"s{k}", ["a", "b", "c"]) for k in range(5)]
    rare = session("r", ["a", "z", "b"])  # z occurs once; r shrinks to 2 events
    kept = filter_sessions(common + [rare], min_occurrence=5, min_session_len=3)
    assert {s.session_id for s in kept} == {f"s{k}" for k in range(5)}


def test_item_with_four_occurrences_absent_from_vocabulary():
    sessions = [session(f"s{k}", ["a", "b", "c"]) for k in range(5)]
    sessions += [session(f"t{k}", ["a", "b", "d"]) for k in range(4)]
    vocab, _ = filter_and_index(sessions)
    assert "d" not in vocab.item_to_index


def test_filter_reaches_fixpoint(small_corpus):
    sessions = small_corpus.sessions
    freq = Counter(v for s in sessions for v in s.items)
    assert min(freq.values()) >= 5
    assert min(len(s.events) for s in sessions) >= 3


def test_all_filtered_is_fatal():
    with pytest.raises(DataError, match="no sessions"):
        preprocess([session(f"s{k}", ["a", "b"]) for k in range(20)])


# corpus invariants -------------------------------------------------------------------


def test_label_category_matches_target(small_corpus):
    ic = small_corpus.vocab.item_category_array()
    for split in (small_corpus.train, small_corpus.valid, small_corpus.test):
        for ex in split:
            assert ic[ex.label_item] == ex.target_category
            assert all(ic[v] == c for v, c in zip(ex.prefix_items, ex.prefix_categories))


def test_augmentation_count(small_corpus):
    total = sum(len(s.events) - 1 for s in small_corpus.sessions)
    n = len(small_corpus.train) + len(small_corpus.valid) + len(small_corpus.test)
    assert n + small_corpus.dropped["valid"] + small_corpus.dropped["test"] == total


def test_candidates_partition_items(small_corpus):
    v = small_corpus.vocab
    all_items = sorted(i for c in v.candidates_by_category.values() for i in c)
    assert all_items == list(range(v.n_items))
    for c, members in v.candidates_by_category.items():
        assert members == sorted(members)
        assert all(v.item_category[i] == c for i in members)


def test_splits_are_session_disjoint(small_corpus):
    ids = [{ex.session_id for ex in part} for part in (small_corpus.train, small_corpus.valid, small_corpus.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


# splitting ----------------------------------------------------------------------------


def test_split_is_deterministic():
    sessions = [session(f"s{k:03d}", ["a", "b", "c"]) for k in range(100)]
    a = split_sessions(sessions, seed=7)
    b = split_sessions(sessions, seed=7)
    assert [[s.session_id for s in p] for p in a] == [[s.session_id for s in p] for p in b]


def test_split_sizes():
    sessions = [session(f"s{k:04d}", ["a", "b", "c"]) for k in range(1000)]
    train, val, test = split_sessions(sessions)
    assert abs(len(train) - 800) <= 1
    assert len(train) + len(val) + len(test) == 1000


def test_split_needs_ten_sessions():
    with pytest.raises(DataError):
        split_sessions([session(f"s{k}", ["a"]) for k in range(9)])


def test_split_dataset_keeps_sessions_together():
    exs = [Example((1,), (0,), 0, 1, f"s{k // 3}") for k in range(120)]
    parts = split_dataset(exs, seed=1)
    owner = {}
    for i, part in enumerate(parts):
        for ex in part:
            owner.setdefault(ex.session_id, i)
            assert owner[ex.session_id] == i
    assert sum(len(p) for p in parts) == 120
    s42 = [i for i, p in enumerate(parts) if any(ex.session_id == "s12" for ex in p)]
    assert len(s42) == 1


# fraction ----------------------------------------------------------------------------


def test_fraction_keeps_most_recent_quarter():
    sessions = [session(f"s{k}", ["a", "b", "c"], t0=100 * k) for k in range(8)]
    kept = most_recent_fraction(sessions, 0.25)
    assert {s.session_id for s in kept} == {"s6", "s7"}


# statistics ----------------------------------------------------------------------------


def test_stats_hand_counts():
    sessions = [
        session("a", ["i1", "i2", "i3"], ["x", "x", "y"]),
        session("b", ["i2", "i4", "i1", "i5"], ["x", "z", "x", "z"]),
        session("c", ["i3", "i3", "i1"], ["y", "y", "x"]),
        session("d", ["i6", "i2", "i4"], ["w", "x", "z"]),
        session("e", ["i1", "i5", "i6", "i2", "i3"], ["x", "z", "w", "x", "y"]),
    ]
    st_ = dataset_stats(sessions)
    assert st_["items"] == 6
    assert st_["sessions"] == 5
    assert st_["avg_session_length"] == pytest.approx(18 / 5)
    assert st_["categories"] == 4
    assert st_["avg_categories_per_session"] == pytest.approx((2 + 2 + 2 + 3 + 4) / 5)


# file formats ------------------------------------------------------------------------------


def test_examples_round_trip(tmp_path):
    vocab = Vocabulary.from_items({"a": "x", "b": "y"})
    exs = [Example((0, 1), (0, 1), 1, 1)]
    write_examples(tmp_path / "e.txt", exs, vocab)
    back, n_items, n_cats = read_examples(tmp_path / "e.txt")
    assert back == exs and (n_items, n_cats) == (2, 2)


def test_empty_examples_file(tmp_path):
    vocab = Vocabulary.from_items({"a": "x"})
    write_examples(tmp_path / "e.txt", [], vocab)
    assert (tmp_path / "e.txt").read_text().count("\n") == 1
    assert read_examples(tmp_path / "e.txt")[0] == []


def test_corrupted_line_names_line_number(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("IAGNN-EX v1 2 2\n0 1|0 1|1|1\n0|zz|1|1\n")
    with pytest.raises(DataError, match="line 3"):
        read_examples(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("IAGNN-EX v9 2 2\n")
    with pytest.raises(DataError, match="version"):
        read_examples(p)


def test_dataset_round_trip_is_byte_stable(tmp_path, small_corpus):
    save_dataset(tmp_path / "a", small_corpus)
    vocab, splits = load_dataset(tmp_path / "a")
    assert splits["train"] == small_corpus.train
    assert vocab.item_category == small_corpus.vocab.item_category
    save_dataset(tmp_path / "b", small_corpus)
    for name in ("vocab.tsv", "train.txt", "valid.txt", "test.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8), min_size=1, max_size=10))
def test_augmentation_count_property(seqs):
    sessions = [session(f"s{k}", items) for k, items in enumerate(seqs)]
    assert len(augment_sessions(sessions)) == sum(len(s) - 1 for s in seqs)
