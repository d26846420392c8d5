"""Cluster-relative KV storage with exact bit accounting.

Each cluster stores its centroid's cache once.  A member stores only the
positions after it diverges from the centroid; the shared prefix costs zero
payload bits and is read back from the centroid.  Tail positions are stored as
quantized residuals against the member's own predicted KV (or, as an A/B
option, against the centroid's KV at the same position).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .codec.quant import (
    ADAPTIVE,
    UNIFORM,
    WATERFILL,
    CodecError,
    PositionRecord,
    QuantizerConfig,
    adaptive_depth,
    decode_residual,
    encode_residual,
    error_bound,
    record_nbytes,
    waterfill_depth,
)
from .plt_index import ClusterRecord, common_prefix_length
from .predictor import candidate_table, linear_fit, topk_weights, weighted_mean
from .toy_lm import Model

CENTROID_HEADER_BYTES = 4 + 2  # session id u32, token count u16
MEMBER_HEADER_BYTES = 4 + 4 + 2 + 2  # session id, centroid id, divergence, position count
TOKEN_BYTES = 2


class FingerprintMismatch(ValueError):
    pass


class UnknownSession(KeyError):
    pass


@dataclass
class SessionAnalysis:
    """Exact per-position quantities of one session at toy scale."""

    tokens: tuple[int, ...]
    kv: np.ndarray  # (n, L, 2, D)
    cand: np.ndarray  # (n, V, L, 2, D)
    probs: np.ndarray  # (n, V)

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def surprisal(self) -> np.ndarray:
        return -np.log2(self.probs[np.arange(self.n), list(self.tokens)])

    @property
    def variance(self) -> np.ndarray:
        """Var_{t~P}[F(context, t)] per position, summed over components."""
        flat = self.cand.reshape(self.n, self.cand.shape[1], -1)
        mean = np.einsum("nt,ntc->nc", self.probs, flat)
        return np.einsum("nt,nt->n", self.probs, (flat**2).sum(-1)) - (mean**2).sum(-1)


def analyze_sessions(model: Model, sessions: dict) -> dict[int, SessionAnalysis]:
    """Forward every session and evaluate all candidate tokens at each position."""
    by_len: dict[int, list[int]] = {}
    for sid, seq in sessions.items():
        by_len.setdefault(len(seq), []).append(sid)
    out = {}
    for n, ids in sorted(by_len.items()):
        toks = np.array([list(sessions[i]) for i in ids], dtype=np.int64).reshape(len(ids), n)
        kv, cand, probs = candidate_table(model, toks)
        for row, sid in enumerate(ids):
            out[sid] = SessionAnalysis(tuple(int(t) for t in toks[row]), kv[row], cand[row], probs[row])
    return out


def predictions(model: Model, a: SessionAnalysis, config: QuantizerConfig) -> np.ndarray:
    """Predicted KV at every position under the configured method, (n, L, 2, D)."""
    if config.predictor == "exact":
        return weighted_mean(a.cand, a.probs)
    pred = np.empty_like(a.kv)
    for i in range(a.n):
        if config.predictor == "top_k":
            k = min(config.top_k, model.vocab_size)
            w = a.probs[i] if k == model.vocab_size else topk_weights(a.probs[i], k)[0]
            pred[i] = weighted_mean(a.cand[i], w)
        else:
            coef, _, full_rank = linear_fit(model.token_embeddings, a.cand[i])
            if full_rank:
                e_bar = a.probs[i] @ model.token_embeddings
                flat = np.concatenate([[1.0], e_bar]) @ coef.reshape(coef.shape[0], -1)
                pred[i] = flat.reshape(a.kv.shape[1:])
            else:
                pred[i] = weighted_mean(a.cand[i], a.probs[i])
    return pred


def calibrate(config: QuantizerConfig, analyses) -> QuantizerConfig:
    """Fill in the corpus mean surprisal for adaptive mode when unset."""
    if config.mode == ADAPTIVE and not config.mean_surprisal > 0:
        h = np.concatenate([a.surprisal for a in analyses] or [np.zeros(0)])
        h_bar = float(h.mean()) if h.size else 0.0
        if not h_bar > 0:
            raise CodecError("cannot calibrate mean surprisal on an empty or certain corpus")
        config = replace(config, mean_surprisal=h_bar)
    config.validate()
    return config


def depths(a: SessionAnalysis, config: QuantizerConfig) -> np.ndarray:
    n_comp = a.kv[0].size
    if config.mode == UNIFORM:
        return np.full(a.n, config.base_depth, dtype=np.int64)
    if config.mode == ADAPTIVE:
        return np.array(
            [adaptive_depth(h, config.base_depth, config.mean_surprisal) for h in a.surprisal],
            dtype=np.int64,
        )
    if config.mode == WATERFILL:
        per_comp = a.variance / n_comp
        return np.array(
            [waterfill_depth(s, config.distortion, n_comp) for s in per_comp], dtype=np.int64
        )
    raise CodecError(f"unknown mode {config.mode!r}")


def encode_positions(residuals: np.ndarray, depth: np.ndarray) -> list[PositionRecord]:
    return [encode_residual(r.reshape(-1), int(b)) for r, b in zip(residuals, depth)]


def decode_positions(records, base: np.ndarray) -> np.ndarray:
    """base + dequantized residual for each record, shape of ``base``."""
    shape = base.shape[1:]
    n_comp = int(np.prod(shape))
    out = np.empty_like(base)
    for i, rec in enumerate(records):
        out[i] = base[i] + decode_residual(rec, n_comp).reshape(shape)
    return out


@dataclass
class CentroidCache:
    session_id: int
    tokens: tuple[int, ...]
    kv: np.ndarray  # exact forward output
    fingerprint: int
    payload: str  # codec | f32 | f64
    records: list[PositionRecord] = field(default_factory=list)  # codec payload

    @property
    def n(self) -> int:
        return len(self.tokens)

    def payload_bits(self) -> int:
        n_comp = self.kv[0].size if self.n else 0
        if self.payload == "codec":
            return sum(r.payload_bits(n_comp) for r in self.records)
        width = 32 if self.payload == "f32" else 64
        return width * self.n * n_comp

    def stored_bits(self) -> int:
        return 8 * (CENTROID_HEADER_BYTES + TOKEN_BYTES * self.n) + self.payload_bits()


@dataclass
class DeltaCache:
    session_id: int
    centroid_id: int
    divergence: int  # d-bar: positions 1..d-bar are read from the centroid
    tail_tokens: tuple[int, ...]
    records: list[PositionRecord]
    n_components: int

    @property
    def n(self) -> int:
        return self.divergence + len(self.tail_tokens)

    def position_bits(self) -> np.ndarray:
        """Payload bits at each of the n positions; zero on the shared prefix."""
        bits = np.zeros(self.n, dtype=np.int64)
        for j, rec in enumerate(self.records):
            bits[self.divergence + j] = rec.payload_bits(self.n_components)
        return bits

    def payload_bits(self) -> int:
        return int(self.position_bits().sum())

    def stored_bits(self) -> int:
        return 8 * (MEMBER_HEADER_BYTES + TOKEN_BYTES * len(self.tail_tokens)) + self.payload_bits()


def _centroid_cache(model, a: SessionAnalysis, sid: int, config: QuantizerConfig) -> CentroidCache:
    cache = CentroidCache(sid, a.tokens, a.kv, model.fingerprint(), config.centroid_payload)
    if config.centroid_payload == "codec":
        pred = predictions(model, a, config)
        cache.records = encode_positions(a.kv - pred, depths(a, config))
    return cache


def decoded_centroid(
    model: Model, cache: CentroidCache, config: QuantizerConfig, analysis: SessionAnalysis | None = None
) -> np.ndarray:
    """The centroid KV as a reader of the store sees it."""
    if cache.payload == "f64":
        return cache.kv.copy()
    if cache.payload == "f32":
        return cache.kv.astype(np.float32).astype(np.float64)
    a = analysis or analyze_sessions(model, {cache.session_id: cache.tokens})[cache.session_id]
    return decode_positions(cache.records, predictions(model, a, config))


def _tail_base(model, a: SessionAnalysis, d: int, centroid_kv: np.ndarray, config) -> np.ndarray:
    """Reference each tail position's residual is taken against."""
    base = predictions(model, a, config)[d:]
    if config.tail_mode == "centroid":
        overlap = min(a.n, len(centroid_kv)) - d
        if overlap > 0:
            base[:overlap] = centroid_kv[d : d + overlap]
    return base


def store_cluster(
    model: Model,
    cluster: ClusterRecord,
    sessions: dict,
    config: QuantizerConfig,
    analyses: dict | None = None,
) -> tuple[CentroidCache, list[DeltaCache]]:
    """Encode one cluster: the centroid in full, members as tails after divergence."""
    if not cluster.members:
        raise ValueError("empty cluster")
    needed = {sid: sessions[sid] for sid in cluster.members}
    if analyses is None:
        analyses = analyze_sessions(model, needed)
    centroid = _centroid_cache(model, analyses[cluster.centroid], cluster.centroid, config)
    centroid_kv = decoded_centroid(model, centroid, config, analyses[cluster.centroid])
    deltas = []
    for sid in cluster.members:
        if sid == cluster.centroid:
            continue
        a = analyses[sid]
        d = common_prefix_length(a.tokens, centroid.tokens)
        base = _tail_base(model, a, d, centroid_kv, config)
        recs = encode_positions(a.kv[d:] - base, depths(a, config)[d:])
        deltas.append(DeltaCache(sid, cluster.centroid, d, a.tokens[d:], recs, a.kv[0].size))
    return centroid, deltas


@dataclass(frozen=True)
class StorageReport:
    stack_bits: int  # every stored bit, headers and metadata included
    baseline_bits: int  # every session stored as a full cache at the same settings
    n_sessions: int
    clustered_fraction: float  # f
    tail_ratio: float  # l-bar / n over non-centroid members
    target_fraction: float | None = None
    target_tail_ratio: float | None = None

    @property
    def measured(self) -> float:
        return self.stack_bits / self.baseline_bits

    @staticmethod
    def formula(f: float, tail_ratio: float) -> float:
        return 1.0 - f * (1.0 - tail_ratio)

    @property
    def predicted(self) -> float:
        return self.formula(self.clustered_fraction, self.tail_ratio)

    @property
    def predicted_target(self) -> float | None:
        if self.target_fraction is None:
            return None
        return self.formula(self.target_fraction, self.target_tail_ratio)

    def rows(self) -> list[tuple[str, str]]:
        rows = [
            ("sessions", str(self.n_sessions)),
            ("stack_bits", str(self.stack_bits)),
            ("baseline_bits", str(self.baseline_bits)),
            ("f", f"{self.clustered_fraction:.4f}"),
            ("tail_ratio", f"{self.tail_ratio:.4f}"),
            ("relative_cost_measured", f"{self.measured:.4f}"),
            ("relative_cost_predicted", f"{self.predicted:.4f}"),
        ]
        if self.target_fraction is not None:
            rows.append(("relative_cost_target", f"{self.predicted_target:.4f}"))
        return rows

    def text(self) -> str:
        rows = self.rows()
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows) + "\n"

    def records(self) -> str:
        return "\n".join(f"storage {k}={v}" for k, v in self.rows()) + "\n"


class DedupStore:
    """Clustered KV store; single writer, concurrent readers."""

    def __init__(self, model: Model, config: QuantizerConfig):
        self.model = model
        self.config = config
        self.fingerprint = model.fingerprint()
        self.centroids: dict[int, CentroidCache] = {}
        self.deltas: dict[int, DeltaCache] = {}
        self._decoded: dict[int, np.ndarray] = {}
        self.full_bits: dict[int, int] = {}

    @classmethod
    def build(cls, model, sessions: dict, clusters, config: QuantizerConfig) -> "DedupStore":
        analyses = analyze_sessions(model, sessions)
        config = calibrate(config, analyses.values())
        store = cls(model, config)
        for rec in clusters:
            centroid, deltas = store_cluster(model, rec, sessions, config, analyses)
            store.add(centroid, deltas)
        for sid, a in analyses.items():
            store.full_bits[sid] = _centroid_cache(model, a, sid, config).stored_bits()
        return store

    def add(self, centroid: CentroidCache, deltas) -> None:
        if centroid.fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"centroid {centroid.session_id} was encoded by model {centroid.fingerprint:#x}"
            )
        self.centroids[centroid.session_id] = centroid
        for d in deltas:
            if d.centroid_id != centroid.session_id:
                raise ValueError(f"member {d.session_id} points at centroid {d.centroid_id}")
            self.deltas[d.session_id] = d

    def session_ids(self) -> list[int]:
        return sorted(set(self.centroids) | set(self.deltas))

    def centroid_kv(self, cid: int, analysis: SessionAnalysis | None = None) -> np.ndarray:
        if cid not in self._decoded:
            self._decoded[cid] = decoded_centroid(self.model, self.centroids[cid], self.config, analysis)
        return self._decoded[cid]

    def reconstruct_all(self) -> dict[int, np.ndarray]:
        """Every stored session, with one batched forward pass for the lot."""
        analyses = analyze_sessions(self.model, {sid: self.tokens(sid) for sid in self.session_ids()})
        for cid in self.centroids:
            self.centroid_kv(cid, analyses[cid])
        return {sid: self.reconstruct(sid, analyses[sid]) for sid in self.session_ids()}

    def reconstruct(self, session_id: int, analysis: SessionAnalysis | None = None) -> np.ndarray:
        if session_id in self.centroids:
            return self.centroid_kv(session_id).copy()
        if session_id not in self.deltas:
            raise UnknownSession(session_id)
        delta = self.deltas[session_id]
        centroid = self.centroids[delta.centroid_id]
        ckv = self.centroid_kv(delta.centroid_id)
        d = delta.divergence
        tokens = centroid.tokens[:d] + delta.tail_tokens
        if len(delta.records) != len(delta.tail_tokens):
            raise CodecError(f"member {session_id}: {len(delta.records)} records for {len(delta.tail_tokens)} tail tokens")
        a = analysis or analyze_sessions(self.model, {session_id: tokens})[session_id]
        out = np.empty_like(a.kv)
        out[:d] = ckv[:d]
        if delta.tail_tokens:
            base = _tail_base(self.model, a, d, ckv, self.config)
            out[d:] = decode_positions(delta.records, base)
        return out

    def error_bounds(self, session_id: int) -> np.ndarray:
        """Guaranteed max-abs component error at each position."""
        if session_id in self.centroids:
            return self._centroid_bounds(self.centroids[session_id])
        delta = self.deltas[session_id]
        cb = self._centroid_bounds(self.centroids[delta.centroid_id])
        tail = [error_bound(r) for r in delta.records]
        return np.concatenate([cb[: delta.divergence], tail])

    def _centroid_bounds(self, c: CentroidCache) -> np.ndarray:
        if c.payload == "f64":
            return np.zeros(c.n)
        if c.payload == "f32":
            as32 = np.abs(c.kv.astype(np.float32)).reshape(c.n, -1).max(axis=1)
            return np.spacing(as32).astype(np.float64) / 2
        return np.array([error_bound(r) for r in c.records])

    def tokens(self, session_id: int) -> tuple[int, ...]:
        if session_id in self.centroids:
            return self.centroids[session_id].tokens
        d = self.deltas[session_id]
        return self.centroids[d.centroid_id].tokens[: d.divergence] + d.tail_tokens

    def stored_bits(self) -> int:
        return sum(c.stored_bits() for c in self.centroids.values()) + sum(
            d.stored_bits() for d in self.deltas.values()
        )

    def storage_report(self, target=None, framing_bits: int = 0) -> StorageReport:
        """Measured vs predicted relative cost.

        ``framing_bits`` (container header and section counts) is added to
        both sides, since a store of full caches would carry it too.
        """
        ids = self.session_ids()
        if not ids:
            raise ValueError("store is empty")
        clustered = [d for d in self.deltas.values()]
        clustered_centroids = {d.centroid_id for d in clustered}
        f = (len(clustered) + len(clustered_centroids)) / len(ids)
        tail = (
            float(np.mean([len(d.tail_tokens) / d.n for d in clustered if d.n])) if clustered else 0.0
        )
        baseline = sum(self.full_bits[s] for s in ids) if self.full_bits else None
        if baseline is None:
            raise ValueError("store was not built with full-cache accounting")
        return StorageReport(
            stack_bits=self.stored_bits() + framing_bits,
            baseline_bits=baseline + framing_bits,
            n_sessions=len(ids),
            clustered_fraction=f,
            tail_ratio=tail,
            target_fraction=None if target is None else target[0],
            target_tail_ratio=None if target is None else target[1],
        )


def layer_savings(store: DedupStore, raw_bits_per_component: int = 32) -> dict:
    """Per-layer payload savings against raw float storage of every position.

    Layer 1 saves the raw cost of each member's shared prefix (those positions
    carry no payload).  Layer 2/3 saves raw minus coded bits at every position
    that is actually encoded.  The two position sets are disjoint and cover
    every position of every session.
    """
    n_comp = None
    raw_total = coded_total = l1 = l2 = 0
    covered = 0
    for sid in store.session_ids():
        if sid in store.centroids:
            c = store.centroids[sid]
            n_comp = c.kv[0].size
            raw = raw_bits_per_component * n_comp
            pos_bits = (
                [r.payload_bits(n_comp) for r in c.records]
                if c.payload == "codec"
                else [c.payload_bits() // max(c.n, 1)] * c.n
            )
            prefix = 0
        else:
            d = store.deltas[sid]
            n_comp = d.n_components
            raw = raw_bits_per_component * n_comp
            pos_bits = list(d.position_bits())
            prefix = d.divergence
        layer1_positions = set(range(prefix))
        layer2_positions = set(range(prefix, len(pos_bits)))
        assert not (layer1_positions & layer2_positions)
        assert len(layer1_positions | layer2_positions) == len(pos_bits)
        covered += len(pos_bits)
        raw_total += raw * len(pos_bits)
        coded_total += int(sum(pos_bits))
        l1 += raw * len(layer1_positions)
        l2 += sum(raw - int(pos_bits[i]) for i in layer2_positions)
    return {
        "positions": covered,
        "raw_bits": raw_total,
        "stored_payload_bits": coded_total,
        "total_saved": raw_total - coded_total,
        "layer1_saved": l1,
        "layer2_saved": l2,
    }


def predicted_lipschitz_check(model, a: SessionAnalysis, other: SessionAnalysis, kappa: float) -> list[bool]:
    """At the divergence position, ||dKV^(l)|| <= kappa^l ||dE|| for each layer."""
    d = common_prefix_length(a.tokens, other.tokens)
    if d >= min(a.n, other.n):
        return []
    de = np.linalg.norm(model.token_embeddings[a.tokens[d]] - model.token_embeddings[other.tokens[d]])
    out = []
    for l in range(a.kv.shape[1]):
        dkv = np.linalg.norm(a.kv[d, l] - other.kv[d, l])
        out.append(bool(dkv <= kappa ** (l + 1) * de * (1 + 1e-12)))
    return out

