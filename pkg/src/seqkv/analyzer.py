"""Exhaustive-enumeration checks of the entropy and residual bounds, plus workloads.

Everything here is exact at toy scale: distributions come from the model's own
chain-rule probabilities over every sequence of a given length, never from
samples.  The one sampled thing is ``generate_workload``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .plt_index import common_prefix_length
from .predictor import acceptance_rate, topk_weights, variance_stats
from .toy_lm import (
    Model,
    StepState,
    _step,
    embedding_diameter,
    entropy_bits,
    forward_batch,
    lipschitz_estimate,
)

BUDGET = 10**7  # forward calls an enumeration may spend
CHUNK = 1 << 14


class EnumerationBudgetExceeded(ValueError):
    pass


def _check_budget(calls: int) -> None:
    if calls > BUDGET:
        raise EnumerationBudgetExceeded(f"enumeration needs {calls} forward calls, budget is {BUDGET}")


def _sequences(V: int, length: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Rows ``start:stop`` of the lexicographic list of all length-``length`` sequences."""
    total = V**length
    stop = total if stop is None else min(stop, total)
    idx = np.arange(start, stop)
    if length == 0:
        return np.zeros((len(idx), 0), dtype=np.int64)
    return np.stack(np.unravel_index(idx, (V,) * length), axis=1).astype(np.int64)


def _chain_prob(tokens: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """P_M of each row of ``tokens`` from the per-position distributions."""
    B, n = tokens.shape
    p = np.ones(B)
    for i in range(n):
        p = p * probs[np.arange(B), i, tokens[:, i]]
    return p


@dataclass
class Level:
    contexts: np.ndarray  # (B, c)
    prob: np.ndarray  # P_M(context)
    next_probs: np.ndarray  # (B, V)
    state: StepState


def iter_contexts(model: Model, length: int, chunk: int = CHUNK):
    """Every context of ``length`` tokens, in lexicographic chunks."""
    V = model.vocab_size
    for start in range(0, V**length, chunk):
        ctx = _sequences(V, length, start, start + chunk)
        out = forward_batch(model, ctx)
        yield Level(ctx, _chain_prob(ctx, out.probs), out.probs[:, -1], out.state)


def next_candidates(model: Model, level: Level) -> np.ndarray:
    """F_M(context, t) for every context in ``level`` and token t: (B, V, L, 2, D)."""
    V = model.vocab_size
    B = len(level.contexts)
    rows = np.repeat(np.arange(B), V)
    _, kv, _, _ = _step(model, level.state.take(rows), np.tile(np.arange(V), B))
    return kv.reshape((B, V) + kv.shape[1:])


def _row_groups(a: np.ndarray) -> np.ndarray:
    """Group index per row, rows equal iff their bytes are equal."""
    a = np.ascontiguousarray(a.reshape(len(a), -1))
    if a.shape[1] == 0:
        return np.zeros(len(a), dtype=np.int64)
    view = a.view(np.dtype((np.void, a.dtype.itemsize * a.shape[1]))).ravel()
    _, inv = np.unique(view, return_inverse=True)
    return inv.reshape(-1)


def conditional_entropy(prob: np.ndarray, given: np.ndarray, value: np.ndarray) -> float:
    """H(value | given) in bits for a joint law over rows with group labels."""
    pg = np.bincount(given, weights=prob)
    pair = given * (int(value.max()) + 1) + value
    _, pair_id = np.unique(pair, return_inverse=True)
    pair_id = pair_id.reshape(-1)
    pp = np.bincount(pair_id, weights=prob)
    pair_given = np.zeros(len(pp), dtype=np.int64)
    pair_given[pair_id] = given
    keep = pp > 0
    return float(np.sum(pp[keep] * (np.log2(pg[pair_given[keep]]) - np.log2(pp[keep]))))


@dataclass
class EnumerationReport:
    token_entropy: np.ndarray  # H(t_i | t_<i), bits, i = 1..n
    kv_entropy: np.ndarray  # H(KV_i | KV_<i), bits
    collisions: np.ndarray  # per position, distinct sequences sharing KV_<=i
    log2_perplexity: float  # from the joint law of length-n sequences

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.kv_entropy - self.token_entropy)

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max()) if len(self.gaps) else 0.0

    @property
    def injective(self) -> bool:
        return not np.any(self.collisions)

    def records(self) -> str:
        lines = [
            f"position={i + 1} token_entropy={t:.12f} kv_entropy={k:.12f} gap={abs(k - t):.3e} collisions={c}"
            for i, (t, k, c) in enumerate(zip(self.token_entropy, self.kv_entropy, self.collisions))
        ]
        return "\n".join(lines) + "\n"


def verify_sequential_bound(model: Model, max_len: int = 5) -> EnumerationReport:
    """Compare H(t_i | t_<i) with H(KV_i | KV_<i) at every position up to ``max_len``.

    The token side is the expected entropy of each context's next-token
    distribution.  The KV side groups every length-i KV tensor by the bytes of
    its first i - 1 positions and takes the Shannon entropy of the distinct
    KV_i values inside each group.
    """
    V = model.vocab_size
    _check_budget(V**max_len)
    tok_h, kv_h, coll = [], [], []
    for i in range(1, max_len + 1):
        h = 0.0
        for level in iter_contexts(model, i - 1):
            h += float(level.prob @ entropy_bits(level.next_probs))
        tok_h.append(h)

        seqs = _sequences(V, i)
        out = forward_batch(model, seqs)
        prob = _chain_prob(seqs, out.probs)
        given = _row_groups(out.kv[:, : i - 1])
        value = _row_groups(out.kv[:, i - 1])
        kv_h.append(conditional_entropy(prob, given, value))
        distinct = len(np.unique(given * (int(value.max()) + 1) + value))
        coll.append(len(seqs) - distinct)
        if i == max_len:
            keep = prob > 0
            log2_pp = float(-(prob[keep] @ np.log2(prob[keep])) / max_len)
    return EnumerationReport(np.array(tok_h), np.array(kv_h), np.array(coll), log2_pp)


@dataclass
class ResidualBoundsReport:
    contexts: list  # tuples
    entropy: np.ndarray
    identity_gap: np.ndarray  # |E||R||^2 - Var[F]|
    residual_norm: np.ndarray  # E||R||
    norm_bound: np.ndarray
    embedding_variance: np.ndarray
    c_e: float
    f_lip: float

    @property
    def popoviciu_bound(self) -> float:
        return self.c_e**2 / 4

    @property
    def coupling_bound(self) -> np.ndarray:
        return self.c_e**2 * self.entropy * math.log(2)

    def checks(self, identity_tol: float = 1e-10) -> dict:
        """Per inequality: (fraction of contexts passing, worst lhs - rhs)."""
        sides = {
            "identity": (self.identity_gap, np.full(len(self.entropy), identity_tol)),
            "norm_bound": (self.residual_norm, self.norm_bound),
            "popoviciu": (self.embedding_variance, np.full(len(self.entropy), self.popoviciu_bound)),
            "coupling": (self.embedding_variance, self.coupling_bound),
        }
        out = {}
        for name, (lhs, rhs) in sides.items():
            # the coupling bound is 0 = 0 at point-mass contexts
            ok = (lhs <= rhs) | np.isclose(lhs, rhs, rtol=0, atol=1e-12)
            out[name] = (float(ok.mean()), float(np.max(lhs - rhs)))
        return out

    def records(self) -> str:
        lines = []
        for j, ctx in enumerate(self.contexts):
            lines.append(
                f"context={' '.join(map(str, ctx)) or '-'} entropy={self.entropy[j]:.9f} "
                f"identity_gap={self.identity_gap[j]:.3e} residual_norm={self.residual_norm[j]:.9f} "
                f"norm_bound={self.norm_bound[j]:.9f} embedding_variance={self.embedding_variance[j]:.9f} "
                f"popoviciu_bound={self.popoviciu_bound:.9f} coupling_bound={self.coupling_bound[j]:.9f}"
            )
        return "\n".join(lines) + "\n"


def verify_residual_bounds(model: Model, max_len: int = 4) -> ResidualBoundsReport:
    """The residual identity and the three variance bounds on every context up to ``max_len``."""
    V = model.vocab_size
    _check_budget(sum(V**c for c in range(max_len + 1)))
    lip = lipschitz_estimate(model, max(3, max_len))
    c_e = embedding_diameter(model)
    E = model.token_embeddings
    ctxs, cols = [], {k: [] for k in ("entropy", "gap", "norm", "bound", "evar")}
    for c in range(max_len + 1):
        for level in iter_contexts(model, c):
            cand = next_candidates(model, level)
            for b in range(len(level.contexts)):
                r = variance_stats(cand[b], level.next_probs[b], E, c_e, lip.f_lipschitz)
                ctxs.append(tuple(int(t) for t in level.contexts[b]))
                cols["entropy"].append(r.entropy)
                cols["gap"].append(abs(r.expected_sq_residual - r.variance))
                cols["norm"].append(r.expected_residual_norm)
                cols["bound"].append(r.norm_bound)
                cols["evar"].append(r.embedding_variance)
    a = {k: np.array(v) for k, v in cols.items()}
    return ResidualBoundsReport(ctxs, a["entropy"], a["gap"], a["norm"], a["bound"], a["evar"], c_e, lip.f_lipschitz)


def distribution_with_entropy(h: float, V: int) -> np.ndarray:
    """p_j proportional to exp(-beta j) with entropy exactly ``h`` bits (0 <= h <= log2 V)."""
    top = math.log2(V)
    if not -1e-12 <= h <= top + 1e-12:
        raise ValueError(f"entropy {h} outside [0, {top}]")
    if h >= top - 1e-12:
        return np.full(V, 1.0 / V)
    if h <= 1e-12:
        p = np.zeros(V)
        p[0] = 1.0
        return p

    def law(beta):
        w = np.exp(-beta * np.arange(V))
        return w / w.sum()

    beta = brentq(lambda b: float(entropy_bits(law(b))) - h, 0.0, 800.0, xtol=1e-15)
    return law(beta)


@dataclass(frozen=True)
class MarkovSource:
    """First-order chain with hand-set conditionals.

    At position i the next token is ``(prev + j) mod V`` with probability
    ``base_i[j]``, so every row of the transition matrix is a shift of one law
    and H(t_i | t_<i) = H(base_i) whatever the history.
    """

    vocab_size: int
    laws: tuple  # base law per position, indexes 1..n

    @classmethod
    def from_entropies(cls, entropies, vocab_size: int = 8) -> "MarkovSource":
        return cls(vocab_size, tuple(distribution_with_entropy(h, vocab_size) for h in entropies))

    def transition(self, i: int) -> np.ndarray:
        base = self.laws[i - 1]
        return np.stack([np.roll(base, prev) for prev in range(self.vocab_size)])

    def conditional_entropies(self, n: int) -> np.ndarray:
        """Exact H(t_i | t_<i) from the forward marginals, i = 1..n."""
        V = self.vocab_size
        marginal = np.zeros(V)
        marginal[0] = 1.0  # start state
        out = []
        for i in range(1, n + 1):
            T = self.transition(i)
            out.append(float(marginal @ entropy_bits(T)))
            marginal = marginal @ T
        return np.array(out)


def linear_decay_source(n: int = 64, start: float = 3.0, slope: float = 0.5, vocab_size: int = 8) -> MarkovSource:
    return MarkovSource.from_entropies([max(0.0, start - slope * i) for i in range(1, n + 1)], vocab_size)


def constant_source(n: int = 64, h: float = 1.5, vocab_size: int = 8) -> MarkovSource:
    return MarkovSource.from_entropies([h] * n, vocab_size)


@dataclass
class AsymptoticTrace:
    entropy: np.ndarray  # H_i
    running_average: np.ndarray  # mean of H_1..H_n
    asserted: bool  # monotonicity is a claim only for the synthetic source
    tol: float = 1e-12

    @property
    def non_increasing(self) -> bool:
        return bool(np.all(np.diff(self.running_average) <= self.tol))

    def records(self) -> str:
        return "".join(
            f"n={i + 1} entropy={h:.12f} running_average={a:.12f}\n"
            for i, (h, a) in enumerate(zip(self.entropy, self.running_average))
        )


def model_entropy_trace(model: Model, n: int) -> np.ndarray:
    V = model.vocab_size
    _check_budget(sum(V**c for c in range(n)))
    out = []
    for c in range(n):
        out.append(sum(float(lv.prob @ entropy_bits(lv.next_probs)) for lv in iter_contexts(model, c)))
    return np.array(out)


def verify_asymptotic(source: Model | MarkovSource, n: int) -> AsymptoticTrace:
    if isinstance(source, MarkovSource):
        h = source.conditional_entropies(n)
        asserted = True
    else:
        h = model_entropy_trace(source, n)
        asserted = False
    avg = np.cumsum(h) / np.arange(1, n + 1)
    return AsymptoticTrace(h, avg, asserted)


@dataclass
class DualityReport:
    k: int
    contexts: int
    max_gap: float  # max |acceptance - Z_k|
    min_mass: float
    full_vocab_gap: float | None  # |acceptance - 1| when k = |V|


def verify_duality(model: Model, k: int, max_len: int = 4) -> DualityReport:
    """Speculative acceptance of the renormalized top-k draft against Z_k."""
    V = model.vocab_size
    if not 1 <= k <= V:
        raise ValueError(f"k must be in [1, {V}]")
    _check_budget(sum(V**c for c in range(max_len + 1)))
    gap, count, min_z, full = 0.0, 0, 1.0, 0.0
    for c in range(max_len + 1):
        for level in iter_contexts(model, c):
            for p in level.next_probs:
                draft, z = topk_weights(p, k)
                acc = acceptance_rate(p, draft)
                gap = max(gap, abs(acc - z))
                min_z = min(min_z, z)
                full = max(full, abs(acc - 1.0))
                count += 1
    return DualityReport(k, count, gap, min_z, full if k == V else None)


@dataclass(frozen=True)
class WorkloadSpec:
    sessions: int = 100  # m
    cluster_fraction: float = 0.5  # f
    tail_ratio: float = 0.2  # l-bar / n
    length: int = 40  # n, tokens per session
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.sessions < 1:
            raise ValueError("need at least one session")
        if not 0.0 <= self.cluster_fraction <= 1.0:
            raise ValueError("cluster_fraction must be in [0, 1]")
        if not 0.0 <= self.tail_ratio <= 1.0:
            raise ValueError("tail_ratio must be in [0, 1]")
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


@dataclass
class Workload:
    sessions: dict  # id -> tuple of tokens
    group: tuple  # ids sharing the common prefix, centroid included
    centroid: int | None
    prefix_length: int
    delta: float  # clustering threshold that recovers exactly the group
    achieved_fraction: float
    achieved_tail_ratio: float
    spec: WorkloadSpec = field(default_factory=WorkloadSpec)

    def text(self, fingerprint: int) -> str:
        lines = [f"# fingerprint={fingerprint:#018x} sessions={len(self.sessions)} delta={float(self.delta)!r}"]
        for sid in sorted(self.sessions):
            lines.append(" ".join(map(str, self.sessions[sid])))
        return "\n".join(lines) + "\n"


def _sample(model: Model, rng, prefixes: np.ndarray, steps: int, temperature: float, avoid=None) -> np.ndarray:
    """Continue each prefix row by ``steps`` sampled tokens.

    ``avoid`` optionally gives, per row, a token the first sampled step may not take.
    """
    B = len(prefixes)
    out = forward_batch(model, prefixes)
    state, probs = out.state, out.probs[:, -1]
    toks = np.empty((B, steps), dtype=np.int64)
    for j in range(steps):
        w = probs ** (1.0 / temperature)
        if j == 0 and avoid is not None:
            w[np.arange(B), avoid] = 0.0
        w /= w.sum(axis=1, keepdims=True)
        u = rng.random(B)
        t = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), model.vocab_size - 1)
        toks[:, j] = t
        state, _, _, probs = _step(model, state, t)
    return np.concatenate([prefixes, toks], axis=1)


def _greedy(model: Model, prefix: np.ndarray, steps: int) -> np.ndarray:
    out = forward_batch(model, prefix[None, :])
    state, probs = out.state, out.probs[:, -1]
    seq = list(prefix)
    for _ in range(steps):
        t = np.array([int(np.argmax(probs[0]))])
        seq.append(int(t[0]))
        state, _, _, probs = _step(model, state, t)
    return np.array(seq, dtype=np.int64)


def _log_probs(model: Model, seqs: np.ndarray) -> np.ndarray:
    """log2 P_M of every prefix, shape (B, n + 1)."""
    out = forward_batch(model, seqs)
    B, n = seqs.shape
    lp = np.zeros((B, n + 1))
    for i in range(n):
        lp[:, i + 1] = lp[:, i] + np.log2(out.probs[np.arange(B), i, seqs[:, i]])
    return lp


def generate_workload(model: Model, spec: WorkloadSpec, max_rounds: int = 200) -> Workload:
    """Sessions where a fraction f share one prefix and diverge for the last l-bar/n.

    The group's centroid continues the prefix greedily; every other member
    takes a different token at the divergence position and is kept only if it
    is less likely than the centroid, so the clustering recovers exactly this
    centroid and divergence.  The other sessions start with a different first
    token and are resampled until no pair shares as much prefix information
    as the group does.  ``delta`` then sits midway between the two.
    """
    spec.validate()
    n = spec.length
    if n > model.config.max_context:
        raise ValueError(f"length {n} exceeds the model's max_context {model.config.max_context}")
    rng = np.random.default_rng(spec.seed)
    m = spec.sessions
    g = int(round(spec.cluster_fraction * m))
    g = g if g >= 2 else 0
    p = int(round(n * (1.0 - spec.tail_ratio)))
    sessions: list[np.ndarray] = []

    limit = math.inf  # bits of prefix every pair of group members shares
    prefix = np.zeros(0, dtype=np.int64)
    if g:
        prefix = _sample(model, rng, np.zeros((1, 0), dtype=np.int64), p, spec.temperature)[0]
        centroid = _greedy(model, prefix, n - p)
        c_lp = _log_probs(model, centroid[None, :])[0]
        if p:
            limit = float(-c_lp[p])
        sessions.append(centroid)
        members: list[np.ndarray] = []
        for _ in range(max_rounds):
            need = g - 1 - len(members)
            if need == 0:
                break
            base = np.tile(prefix, (need, 1))
            if n == p:
                cand = np.tile(centroid, (need, 1))
                members.extend(cand)
                break
            cand = _sample(model, rng, base, n - p, spec.temperature, avoid=np.full(need, centroid[p]))
            lp = _log_probs(model, cand)[:, -1]
            # repeated members are allowed; identical prompts are common
            members.extend(row for row, l in zip(cand, lp) if l < c_lp[-1])
        else:
            raise RuntimeError("could not sample enough cluster members")
        sessions.extend(members)

    indep: list[np.ndarray] = []
    closest = 0.0  # largest metric between two independent sessions
    first = int(prefix[0]) if len(prefix) else None
    for _ in range(max_rounds):
        need = m - len(sessions) - len(indep)
        if need == 0:
            break
        start = np.zeros((need, 0), dtype=np.int64)
        avoid = None if first is None else np.full(need, first)
        cand = _sample(model, rng, start, n, spec.temperature, avoid=avoid)
        lps = _log_probs(model, cand)
        for row, lp in zip(cand, lps):
            shared = [-lp[d] for d in (common_prefix_length(row, o) for o in indep) if d]
            worst = max(shared, default=0.0)
            # keep a margin so summation order in the clusterer cannot flip a comparison
            if worst < limit - 1e-6:
                closest = max(closest, worst)
                indep.append(row)
                if len(sessions) + len(indep) == m:
                    break
    else:
        raise RuntimeError("could not sample enough independent sessions")
    sessions.extend(indep)
    delta = float((closest + limit) / 2) if math.isfinite(limit) else math.inf

    out = {i: tuple(int(t) for t in s) for i, s in enumerate(sessions)}
    group = tuple(range(g))
    tails = [(n - common_prefix_length(out[i], out[0])) / n for i in group[1:]]
    return Workload(
        sessions=out,
        group=group,
        centroid=0 if g else None,
        prefix_length=p if g else 0,
        delta=delta,
        achieved_fraction=g / m,
        achieved_tail_ratio=float(np.mean(tails)) if tails else 0.0,
        spec=spec,
    )


@dataclass(frozen=True)
class ClaimRow:
    claim: str
    passed: bool
    margin: float  # measured slack; >= 0 when the claim holds
    detail: str = ""


def report(rows: list[ClaimRow]) -> tuple[str, str]:
    """Aligned text table and line-delimited records of the claim matrix."""
    w = max((len(r.claim) for r in rows), default=5)
    text = [f"{'claim':<{w}}  result  margin        detail"]
    recs = []
    for r in rows:
        verdict = "pass" if r.passed else "FAIL"
        text.append(f"{r.claim:<{w}}  {verdict:<6}  {r.margin:<12.6g}  {r.detail}")
        recs.append(f"claim={r.claim} result={verdict} margin={r.margin!r} detail={r.detail.replace(' ', '_')}")
    return "\n".join(text) + "\n", "\n".join(recs) + "\n"


def verification_matrix(model: Model, max_len: int = 5, residual_len: int = 4, ks=(1, 2, 4, 8)) -> list[ClaimRow]:
    """Run every enumeration check on ``model`` and the synthetic sources."""
    from .codec.quant import adaptive_depth, theoretical_ratio
    from .toy_lm import InjectivityError, check_injectivity

    rows = []
    t = theoretical_ratio(80, 64, 128, 3, 4.3)
    rows.append(ClaimRow("ratio_b3", f"{t['ratio_b']:.3g}" == "9.14e+05", 0.0, f"ratio={t['ratio_b']:.6g}"))

    enum = verify_sequential_bound(model, max_len)
    rows.append(ClaimRow("entropy_equality", enum.max_gap <= 1e-9, 1e-9 - enum.max_gap, f"max_gap={enum.max_gap:.3e}"))
    mean_h = float(enum.token_entropy.mean())
    rows.append(
        ClaimRow("mean_entropy_le_log2_perplexity", mean_h <= enum.log2_perplexity + 1e-9,
                 enum.log2_perplexity - mean_h, f"log2_pp={enum.log2_perplexity:.9f}")
    )
    try:
        check_injectivity(model, min(4, model.config.max_context - 1))
        rows.append(ClaimRow("injectivity", enum.injective, 0.0, "layer-1 keys distinct"))
    except InjectivityError as exc:
        rows.append(ClaimRow("injectivity", False, -1.0, str(exc)))

    res = verify_residual_bounds(model, residual_len)
    for name, (frac, worst) in res.checks().items():
        rows.append(ClaimRow(f"residual_{name}", frac == 1.0, -worst, f"pass_fraction={frac:.6f}"))

    ok = [adaptive_depth(h, 3, 2.0) for h in (0.0, 2.0, 4.0 + 1e-9)] == [1, 3, 6]
    rows.append(ClaimRow("adaptive_depth_examples", ok, 0.0, "depths 1 3 6"))

    for k in ks:
        if k > model.vocab_size:
            continue
        d = verify_duality(model, k, residual_len)
        rows.append(ClaimRow(f"duality_k{k}", d.max_gap <= 1e-12, 1e-12 - d.max_gap, f"max_gap={d.max_gap:.3e}"))

    tr = verify_asymptotic(linear_decay_source(64), 64)
    rows.append(
        ClaimRow("running_entropy_non_increasing", tr.non_increasing,
                 -float(np.max(np.diff(tr.running_average))), "synthetic decaying source n=1..64")
    )
    return rows
