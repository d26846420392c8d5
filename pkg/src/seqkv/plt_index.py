"""Probabilistic language trie over stored session prefixes.

Nodes are token prefixes; each edge carries P_M(t | prefix) and each node the
chain-rule probability of its prefix.  The distance between two sequences is
the description length of their longest common prefix, -log2 P_M(s ^ s').
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .toy_lm import Model, forward, forward_batch, sequence_prob

SHARED_INFORMATION = "shared_information"  # cluster when -log2 P(lcp) >= delta
DISTANCE = "distance"  # cluster when -log2 P(lcp) <= delta


def common_prefix_length(a, b) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def trie_metric(model: Model, s, s2) -> float:
    """-log2 P_M(longest common prefix); 0 bits for an empty common prefix."""
    s, s2 = list(s), list(s2)
    lcp = s[: common_prefix_length(s, s2)]
    if not lcp:
        return 0.0
    return -math.log2(sequence_prob(model, lcp))


def prefix_probs(model: Model, seq) -> np.ndarray:
    """P_M of every prefix of ``seq``, lengths 0..n, by sequential product."""
    seq = list(seq)
    _, probs = forward(model, seq)
    out = np.empty(len(seq) + 1)
    p = 1.0
    out[0] = p
    for i, t in enumerate(seq):
        p *= probs[i, t]
        out[i + 1] = p
    return out


def prefix_probs_many(model: Model, sessions: dict) -> dict:
    """``prefix_probs`` for every session, batching equal lengths."""
    by_len: dict[int, list] = {}
    for sid, seq in sessions.items():
        by_len.setdefault(len(seq), []).append(sid)
    out = {}
    for n, ids in by_len.items():
        toks = np.array([sessions[i] for i in ids], dtype=np.int64).reshape(len(ids), n)
        probs = forward_batch(model, toks).probs
        pp = np.ones((len(ids), n + 1))
        for i in range(n):
            pp[:, i + 1] = pp[:, i] * probs[np.arange(len(ids)), i, toks[:, i]]
        out.update(zip(ids, pp))
    return out


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass(eq=False)
class TrieNode:
    token: int | None = None
    parent: "TrieNode | None" = None
    depth: int = 0
    edge_prob: float = 1.0  # P_M(token | parent prefix)
    prob: float = 1.0  # P_M(prefix)
    children: dict = field(default_factory=dict)
    markers: set = field(default_factory=set)  # sessions ending exactly here
    subtree: set = field(default_factory=set)  # sessions ending at or below
    next_dist: np.ndarray | None = None  # cached P_M(. | prefix)


class DuplicateSession(KeyError):
    pass


class UnknownSession(KeyError):
    pass


@dataclass(frozen=True)
class Match:
    session_id: int
    shared_prefix_length: int
    metric: float


class PrefixIndex:
    def __init__(self, model: Model, epsilon: float = 1e-9):
        self.model = model
        self.epsilon = epsilon
        self.root = TrieNode()
        self.sessions: dict[int, tuple[int, ...]] = {}
        self.lock = RWLock()

    def __len__(self):
        return len(self.sessions)

    def node_count(self) -> int:
        count, stack = 0, [self.root]
        while stack:
            node = stack.pop()
            count += 1
            stack.extend(node.children.values())
        return count

    def insert(self, session_id: int, seq) -> None:
        seq = tuple(int(t) for t in seq)
        with self.lock.write():
            if session_id in self.sessions:
                raise DuplicateSession(session_id)
            probs = None
            node = self.root
            node.subtree.add(session_id)
            for i, t in enumerate(seq):
                child = node.children.get(t)
                if child is None:
                    if node.next_dist is None:
                        if probs is None:
                            _, probs = forward(self.model, seq)
                        node.next_dist = probs[i]
                    w = float(node.next_dist[t])
                    child = TrieNode(t, node, i + 1, w, node.prob * w)
                    node.children[t] = child
                node = child
                node.subtree.add(session_id)
            node.markers.add(session_id)
            self.sessions[session_id] = seq

    def best_match(self, query) -> Match | None:
        """Stored session sharing the most prefix information with ``query``.

        The deepest trie node on the query path with any stored session below
        it has the largest -log2 P(lcp) and the longest lcp; ties between the
        sessions under it go to the lowest id.
        """
        with self.lock.read():
            if not self.sessions:
                return None
            node = self.root
            for t in query:
                child = node.children.get(int(t))
                if child is None or not child.subtree:
                    break
                node = child
            metric = -math.log2(node.prob) if node.depth else 0.0
            return Match(min(node.subtree), node.depth, metric)

    def evict(self, session_id: int) -> None:
        with self.lock.write():
            if session_id not in self.sessions:
                raise UnknownSession(session_id)
            seq = self.sessions.pop(session_id)
            path = [self.root]
            for t in seq:
                path.append(path[-1].children[t])
            path[-1].markers.discard(session_id)
            for node in path:
                node.subtree.discard(session_id)
            # Unmarked nodes off every stored path are dropped; nodes still on
            # a stored path are kept regardless of epsilon.
            for node in reversed(path[1:]):
                if node.subtree:
                    break
                if not node.children or node.prob < self.epsilon:
                    del node.parent.children[node.token]
            if not self.root.children:
                self.root.next_dist = None

    def check_invariants(self, rel_tol: float = 1e-12) -> None:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.children:
                assert sum(c.edge_prob for c in node.children.values()) <= 1.0 + rel_tol
            for c in node.children.values():
                assert math.isclose(c.prob, node.prob * c.edge_prob, rel_tol=rel_tol)
                assert c.subtree <= node.subtree
                stack.append(c)
            for sid in node.markers:
                assert sid in self.sessions
            if node.prob < self.epsilon:
                assert node.subtree, "low-probability node retained without a stored session"


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: int
    members: tuple[int, ...]
    centroid: int
    delta: float
    divergence: dict  # member id -> first index where it differs from the centroid
    metric: dict  # member id -> -log2 P(lcp with centroid)


def cluster(
    model: Model,
    sessions,
    delta: float,
    criterion: str = SHARED_INFORMATION,
) -> list[ClusterRecord]:
    """Greedy maximal clustering of sessions by the trie metric.

    ``sessions`` maps session id -> token sequence (a list is keyed by index).
    Sessions are visited by descending P_M(s), ties to the lower id; each
    unassigned session seeds a cluster and absorbs every later session whose
    pairwise metric with all current members meets the criterion.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if criterion not in (SHARED_INFORMATION, DISTANCE):
        raise ValueError(f"unknown criterion {criterion!r}")
    if not isinstance(sessions, dict):
        sessions = dict(enumerate(sessions))
    ids = sorted(sessions)
    if not ids:
        return []
    seqs = {i: tuple(int(t) for t in sessions[i]) for i in ids}
    pp = prefix_probs_many(model, seqs)

    n_max = max(len(s) for s in seqs.values())
    pad = np.full((len(ids), n_max), -1, dtype=np.int64)
    for row, i in enumerate(ids):
        pad[row, : len(seqs[i])] = seqs[i]
    row_of = {i: r for r, i in enumerate(ids)}

    def lcp_with(i, members):
        eq = pad[[row_of[j] for j in members]] == pad[row_of[i]]
        eq &= pad[row_of[i]] >= 0
        return np.cumprod(eq, axis=1).sum(axis=1)

    def metric_of(i, lcp):
        p = pp[i][lcp]
        with np.errstate(divide="ignore"):
            return np.where(lcp > 0, -np.log2(p), 0.0)

    order = sorted(ids, key=lambda i: (-pp[i][-1], i))
    assigned: set[int] = set()
    records = []
    for seed in order:
        if seed in assigned:
            continue
        members = [seed]
        assigned.add(seed)
        for cand in order:
            if cand in assigned:
                continue
            m = metric_of(cand, lcp_with(cand, members))
            ok = np.all(m >= delta) if criterion == SHARED_INFORMATION else np.all(m <= delta)
            if ok:
                members.append(cand)
                assigned.add(cand)
        lcp = lcp_with(seed, members)
        met = metric_of(seed, lcp)
        records.append(
            ClusterRecord(
                cluster_id=len(records),
                members=tuple(sorted(members)),
                centroid=seed,
                delta=delta,
                divergence={j: int(l) for j, l in zip(members, lcp)},
                metric={j: float(x) for j, x in zip(members, met)},
            )
        )
    return records


def cluster_table(records: list[ClusterRecord]) -> str:
    lines = ["session_id\tcluster_id\tcentroid_id\tdivergence_position\tpairwise_metric_bits"]
    rows = []
    for rec in records:
        for sid in rec.members:
            rows.append((sid, rec.cluster_id, rec.centroid, rec.divergence[sid], rec.metric[sid]))
    for sid, cid, cen, div, met in sorted(rows):
        lines.append(f"{sid}\t{cid}\t{cen}\t{div}\t{met:.6f}")
    return "\n".join(lines) + "\n"
