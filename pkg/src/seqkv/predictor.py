"""Next-position KV prediction from the model's own next-token distribution.

The predicted KV at a position is the probability-weighted mean of the KV the
model would produce for every candidate token.  At toy scale all candidates
are evaluated; ``predict_topk`` and ``predict_linear`` are the cheaper
approximations a real system would use.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toy_lm import (
    LipschitzEstimate,
    Model,
    StepState,
    _step,
    context_state,
    embedding_diameter,
    entropy_bits,
    extend,
    forward_batch,
    lipschitz_estimate,
)

LN2 = np.log(2.0)


@dataclass(frozen=True)
class PredictedKv:
    kv: np.ndarray  # (L, 2, D)
    method: str  # "exact", "top_k" or "linear"
    mass: float  # probability mass covered, Z_k
    k: int | None = None
    fit_residual: np.ndarray | None = None  # per layer, linear method only
    fallback: bool = False  # linear fit was rank deficient, exact used instead


@dataclass(frozen=True)
class Residual:
    vector: np.ndarray  # (L, 2, D)
    norm: float
    surprisal: float  # h_i
    entropy: float  # H_i


def topk_order(probs: np.ndarray) -> np.ndarray:
    """Token ids by descending probability, ties to the lower id."""
    probs = np.asarray(probs)
    return np.lexsort((np.arange(probs.shape[-1]), -probs))


def topk_weights(probs: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Renormalized top-k draft distribution and the mass Z_k it covers."""
    V = probs.shape[-1]
    if not 1 <= k <= V:
        raise ValueError(f"k must be in [1, {V}], got {k}")
    keep = topk_order(probs)[:k]
    w = np.zeros(V)
    w[keep] = probs[keep]
    z = float(w.sum())
    return w / z, z


def acceptance_rate(target: np.ndarray, draft: np.ndarray) -> float:
    """Speculative-decoding acceptance, E_{t~draft} min(1, p/q) = sum_t min(p_t, q_t)."""
    return float(np.minimum(target, draft).sum())


def candidates(model: Model, context) -> tuple[np.ndarray, np.ndarray]:
    """F_M(context, t) for every token t, plus P_M(. | context).

    Returns kv of shape (V, L, 2, D) and probs of shape (V,).
    """
    state, probs = context_state(model, context)
    kv, _ = extend(model, state, np.arange(model.vocab_size))
    return kv, probs


def candidate_table(model: Model, sessions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate KVs at every position of equal-length sessions.

    Returns (kv, cand, probs) with kv (B, n, L, 2, D) the sessions' own KV,
    cand (B, n, V, L, 2, D) the KV each token would produce at that position,
    and probs (B, n, V) the distribution each position was drawn from.  The
    candidate rows are computed by the same step function as the forward pass,
    so cand[b, i, s[b, i]] is bit-identical to kv[b, i].
    """
    sessions = np.asarray(sessions, dtype=np.int64)
    B, n = sessions.shape
    V = model.vocab_size
    out = forward_batch(model, sessions)
    cfg = model.config
    cand = np.empty((B, n, V, cfg.num_layers, 2, cfg.model_dim))
    rows = np.repeat(np.arange(B), V)
    toks = np.tile(np.arange(V), B)
    for i in range(n):
        prefix = StepState(out.state.keys[rows, : i + 1], out.state.values[rows, : i + 1])
        _, kv, _, _ = _step(model, prefix, toks)
        cand[:, i] = kv.reshape(B, V, cfg.num_layers, 2, cfg.model_dim)
    return out.kv, cand, out.probs[:, :n]


def weighted_mean(cand: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.einsum("...t,...tlcd->...lcd", weights, cand)


def predict_exact(model: Model, context) -> PredictedKv:
    cand, probs = candidates(model, context)
    return PredictedKv(weighted_mean(cand, probs), "exact", 1.0)


def predict_topk(model: Model, context, k: int) -> PredictedKv:
    cand, probs = candidates(model, context)
    if k == model.vocab_size:
        return PredictedKv(weighted_mean(cand, probs), "top_k", 1.0, k=k)
    w, z = topk_weights(probs, k)
    return PredictedKv(weighted_mean(cand, w), "top_k", z, k=k)


def linear_fit(embeddings: np.ndarray, cand: np.ndarray):
    """Least-squares c + A E(t) per layer over all candidate tokens.

    Returns (coef (D + 1, L, 2D), per-layer fit residual, full_rank flag).
    """
    V, L = cand.shape[0], cand.shape[1]
    X = np.concatenate([np.ones((V, 1)), embeddings], axis=1)
    Y = cand.reshape(V, L * cand.shape[2] * cand.shape[3])
    coef, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    fitted = X @ coef
    per_layer = np.linalg.norm((fitted - Y).reshape(V, L, -1), axis=(0, 2))
    return coef.reshape(X.shape[1], L, -1), per_layer, rank == X.shape[1]


def predict_linear(model: Model, context) -> PredictedKv:
    """Prediction c + A Ebar, with Ebar the expected next-token embedding.

    A rank-deficient design (|V| <= model_dim) cannot pin down A; the exact
    prediction is returned and ``fallback`` is set.
    """
    cand, probs = candidates(model, context)
    E = model.token_embeddings
    coef, resid, full_rank = linear_fit(E, cand)
    if not full_rank:
        return PredictedKv(weighted_mean(cand, probs), "linear", 1.0, fit_residual=resid, fallback=True)
    e_bar = probs @ E
    pred = np.concatenate([[1.0], e_bar]) @ coef.reshape(coef.shape[0], -1)
    return PredictedKv(pred.reshape(cand.shape[1:]), "linear", 1.0, fit_residual=resid)


def predict(model: Model, context, method: str = "exact", k: int = 4) -> PredictedKv:
    if method == "exact":
        return predict_exact(model, context)
    if method == "top_k":
        return predict_topk(model, context, k)
    if method == "linear":
        return predict_linear(model, context)
    raise ValueError(f"unknown prediction method {method!r}")


def residual(model: Model, seq, position: int, method: str = "exact", k: int = 4) -> Residual:
    """R_i = KV_i - predicted KV_i at 1-based ``position``."""
    seq = list(seq)
    if not 1 <= position <= len(seq):
        raise ValueError(f"position {position} outside 1..{len(seq)}")
    context = seq[: position - 1]
    cand, probs = candidates(model, context)
    pred = predict(model, context, method, k)
    r = cand[seq[position - 1]] - pred.kv
    return Residual(
        vector=r,
        norm=float(np.linalg.norm(r)),
        surprisal=float(-np.log2(probs[seq[position - 1]])),
        entropy=float(entropy_bits(probs)),
    )


@dataclass(frozen=True)
class VarianceReport:
    variance: float  # Var_{t~P}[F(context, t)], summed over components
    per_layer: np.ndarray
    expected_sq_residual: float  # E ||R||^2 against the exact prediction
    expected_residual_norm: float  # E ||R||
    embedding_variance: float  # Var_{t~P}[E(t)]
    entropy: float  # H_i, bits
    c_e: float
    f_lip: float

    @property
    def shrink(self) -> float:
        return min(1.0, 4.0 * self.entropy * LN2)

    @property
    def variance_bound(self) -> float:
        """(1/4) ||F||_Lip^2 C_E^2 min(1, 4 H ln 2)."""
        return 0.25 * self.f_lip**2 * self.c_e**2 * self.shrink

    @property
    def norm_bound(self) -> float:
        """(1/2) ||F||_Lip C_E sqrt(min(1, 4 H ln 2))."""
        return 0.5 * self.f_lip * self.c_e * np.sqrt(self.shrink)


def variance_stats(
    cand: np.ndarray, probs: np.ndarray, embeddings: np.ndarray, c_e: float, f_lip: float
) -> VarianceReport:
    """Moments of the candidate KV distribution at one context."""
    L = cand.shape[1]
    flat = cand.reshape(len(probs), -1)
    mean = probs @ flat
    # E||F||^2 - ||E F||^2, computed independently of the residual path
    variance = float(probs @ (flat**2).sum(-1) - mean @ mean)
    by_layer = cand.reshape(len(probs), L, -1)
    layer_mean = np.einsum("t,tlc->lc", probs, by_layer)
    per_layer = np.einsum("t,tl->l", probs, (by_layer**2).sum(-1)) - (layer_mean**2).sum(-1)
    pred = weighted_mean(cand, probs).reshape(-1)
    r_norm = np.linalg.norm(flat - pred, axis=-1)
    e_mean = probs @ embeddings
    e_var = float(probs @ ((embeddings - e_mean) ** 2).sum(-1))
    return VarianceReport(
        variance=variance,
        per_layer=per_layer,
        expected_sq_residual=float(probs @ r_norm**2),
        expected_residual_norm=float(probs @ r_norm),
        embedding_variance=e_var,
        entropy=float(entropy_bits(probs)),
        c_e=c_e,
        f_lip=f_lip,
    )


def residual_variance(model: Model, context, lip: LipschitzEstimate | None = None) -> VarianceReport:
    if lip is None:
        lip = lipschitz_estimate(model, max(3, len(list(context))))
    cand, probs = candidates(model, context)
    return variance_stats(cand, probs, model.token_embeddings, embedding_diameter(model), lip.f_lipschitz)


def topk_conditional_variance(cand: np.ndarray, probs: np.ndarray, k: int) -> float:
    """Var[F(context, t) | t in top-k] under the renormalized draft."""
    w, _ = topk_weights(probs, k)
    flat = cand.reshape(len(probs), -1)
    mean = w @ flat
    return float(w @ ((flat - mean) ** 2).sum(-1))
