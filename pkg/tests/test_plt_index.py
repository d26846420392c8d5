import itertools
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_best_match, naive_seq_prob
from seqkv.plt_index import (
    DISTANCE,
    SHARED_INFORMATION,
    DuplicateSession,
    PrefixIndex,
    UnknownSession,
    cluster,
    cluster_table,
    common_prefix_length,
    prefix_probs,
    trie_metric,
)
from seqkv.toy_lm import ModelConfig, build_model, sequence_prob

seq4 = st.lists(st.integers(0, 3), min_size=0, max_size=6)


def test_common_prefix_length():
    assert common_prefix_length([1, 2, 3], [1, 2, 4]) == 2
    assert common_prefix_length([], [1]) == 0
    assert common_prefix_length([1, 2], [1, 2, 3]) == 2


def test_metric_is_lcp_description_length(model):
    s, s2 = [3, 1, 4, 1], [3, 1, 5]
    assert trie_metric(model, s, s2) == pytest.approx(-math.log2(naive_seq_prob(model, [3, 1])), rel=1e-12)
    assert trie_metric(model, [0, 1], [1, 0]) == 0.0
    assert trie_metric(model, s, s2) == trie_metric(model, s2, s)


def test_prefix_probs(model):
    pp = prefix_probs(model, [6, 2, 2])
    assert pp[0] == 1.0
    assert pp[3] == pytest.approx(sequence_prob(model, [6, 2, 2]), rel=1e-14)
    assert np.all(np.diff(pp) < 0)


@settings(max_examples=60, deadline=None)
@given(seq4, seq4, seq4)
def test_metric_reverse_ultrametric(a, b, c):
    # a longer shared prefix means more bits, so d(a, c) >= min(d(a, b), d(b, c))
    model = build_model(ModelConfig(vocab_size=4))
    dab, dbc, dac = (trie_metric(model, x, y) for x, y in ((a, b), (b, c), (a, c)))
    assert dac >= min(dab, dbc) - 1e-12


def test_metric_not_ultrametric(model4):
    # the max-form inequality fails: a and c share a long prefix, b shares nothing
    a, b, c = [1, 2, 3], [0], [1, 2, 0]
    dab, dbc, dac = (trie_metric(model4, x, y) for x, y in ((a, b), (b, c), (a, c)))
    assert dab == dbc == 0.0
    assert dac > max(dab, dbc)
    assert trie_metric(model4, a, a) > 0  # d(s, s) is not zero either


def _filled(model, sessions):
    idx = PrefixIndex(model)
    for sid, s in sessions.items():
        idx.insert(sid, s)
    return idx


def test_insert_and_match(model4):
    idx = _filled(model4, {5: [1, 2, 3], 2: [1, 2, 0], 9: [3]})
    m = idx.best_match([1, 2, 3, 3])
    assert (m.session_id, m.shared_prefix_length) == (5, 3)
    m = idx.best_match([1, 2])
    assert (m.session_id, m.shared_prefix_length) == (2, 2)  # both continue below; lowest id
    m = idx.best_match([0, 0])
    assert (m.session_id, m.shared_prefix_length, m.metric) == (2, 0, 0.0)
    assert idx.node_count() == 6
    idx.check_invariants()


def test_duplicate_and_unknown(model4):
    idx = _filled(model4, {1: [0, 1]})
    with pytest.raises(DuplicateSession):
        idx.insert(1, [2])
    with pytest.raises(UnknownSession):
        idx.evict(4)
    assert PrefixIndex(model4).best_match([1]) is None


def test_evict_prunes(model4):
    idx = _filled(model4, {1: [0, 1, 2], 2: [0, 1, 3], 3: [2]})
    before = idx.node_count()
    idx.evict(2)
    assert idx.node_count() == before - 1
    assert idx.best_match([0, 1, 3]).session_id == 1
    idx.evict(1)
    idx.evict(3)
    assert idx.node_count() == 1
    idx.check_invariants()


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.integers(0, 40), seq4, min_size=1, max_size=12), st.lists(seq4, min_size=1, max_size=8))
def test_best_match_equals_brute_force(stored, queries):
    model = build_model(ModelConfig(vocab_size=4))
    idx = _filled(model, stored)
    for q in queries:
        got = idx.best_match(q)
        sid, n, metric = brute_best_match(model, stored, q)
        assert (got.session_id, got.shared_prefix_length) == (sid, n)
        assert got.metric == pytest.approx(metric, rel=1e-9, abs=1e-12)


def test_concurrent_readers_and_writer(model4):
    idx = _filled(model4, {i: list(s) for i, s in enumerate(itertools.product(range(4), repeat=3))})
    errors = []

    def reader():
        try:
            for q in itertools.product(range(4), repeat=3):
                assert idx.best_match(q) is not None
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    def writer():
        for i in range(64, 80):
            idx.insert(i, [i % 4, 3, 3, 3])
        for i in range(64, 80):
            idx.evict(i)

    threads = [threading.Thread(target=reader) for _ in range(3)] + [threading.Thread(target=writer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    idx.check_invariants()


def test_cluster_greedy(model4):
    sessions = {0: [1, 2, 3, 0], 1: [1, 2, 3, 1], 2: [1, 2, 0, 0], 3: [0, 0, 0, 0]}
    shared = -math.log2(sequence_prob(model4, [1, 2, 3]))
    recs = cluster(model4, sessions, delta=shared - 1e-9)
    big = [r for r in recs if len(r.members) > 1]
    assert len(big) == 1 and big[0].members == (0, 1)
    probs = {i: sequence_prob(model4, s) for i, s in sessions.items()}
    assert big[0].centroid == max((0, 1), key=lambda i: (probs[i], -i))
    other = 1 - big[0].centroid
    assert big[0].divergence[other] == 3
    assert big[0].metric[other] == pytest.approx(shared, rel=1e-12)
    assert sorted(sid for r in recs for sid in r.members) == [0, 1, 2, 3]


def test_cluster_distance_criterion(model4):
    sessions = {0: [1, 2], 1: [0, 3], 2: [1, 2, 3]}
    # as a distance, sessions with no shared prefix are 0 bits apart
    recs = cluster(model4, sessions, delta=0.0, criterion=DISTANCE)
    assert sorted(r.members for r in recs) == [(0, 1), (2,)]
    recs = cluster(model4, sessions, delta=0.0, criterion=SHARED_INFORMATION)
    assert len(recs) == 1


def test_cluster_rejects_bad_args(model4):
    with pytest.raises(ValueError):
        cluster(model4, [[1]], delta=-1)
    with pytest.raises(ValueError):
        cluster(model4, [[1]], delta=1, criterion="nearest")
    assert cluster(model4, {}, 1.0) == []


def test_cluster_table_format(model4):
    recs = cluster(model4, {4: [1, 2, 3], 7: [1, 2, 0]}, delta=0.5)
    lines = cluster_table(recs).splitlines()
    assert lines[0].split("\t") == [
        "session_id", "cluster_id", "centroid_id", "divergence_position", "pairwise_metric_bits",
    ]
    assert [l.split("\t")[0] for l in lines[1:]] == ["4", "7"]
