"""A deterministic miniature decoder-only transformer.

The model is small enough that every sequence up to length 5-6 can be
enumerated, which is what the entropy laboratory relies on.  All arithmetic is
float64 and every contraction goes through ``np.einsum``: unlike BLAS-backed
``matmul``, einsum gives bit-identical rows regardless of batch size, so a
sequence produces the same KV bytes whether it is run alone or inside a batch
of 32k.

Layout conventions used throughout the package:

* A KV tensor for ``n`` positions is an array of shape ``(n, L, 2, D)``:
  position, layer, key/value, component (``D = heads * head_dim``).
* ``probs[i]`` is the next-token distribution after ``i`` tokens, so a forward
  pass over ``n`` tokens yields ``n + 1`` distributions; ``probs[0]`` is the
  distribution of the first token.
"""
from __future__ import annotations

import itertools
from functools import cached_property
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

CONFIG_KEYS = {
    "vocab_size": "vocab_size",
    "layers": "num_layers",
    "heads": "num_heads",
    "head_dim": "head_dim",
    "seed": "seed",
    "max_context": "max_context",
}


class ConfigError(ValueError):
    pass


class InjectivityError(RuntimeError):
    """Raised when two tokens map to the same layer-1 key in some context."""

    def __init__(self, seed, context, tokens):
        self.seed = seed
        self.context = tuple(context)
        self.tokens = tuple(tokens)
        super().__init__(
            f"seed {seed}: tokens {self.tokens} give identical layer-1 keys "
            f"after context {list(self.context)}"
        )


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 8
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 4
    seed: int = 42
    max_context: int = 8
    # Logit gain of the LM head; chosen so next-token entropies sit well
    # inside (0, log2 V) for the default seed.
    lm_scale: float = 2.0

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.vocab_size > 0xFFFF:
            raise ConfigError("vocab_size must fit in a u16 token id")
        for name in ("num_layers", "num_heads", "head_dim", "max_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def as_text(self) -> str:
        inv = {v: k for k, v in CONFIG_KEYS.items()}
        return "".join(f"{inv[f]}={getattr(self, f)}\n" for f in CONFIG_KEYS.values())


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse ``key=value`` lines (``#`` comments allowed) into a ModelConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[CONFIG_KEYS[key]] = int(val, 0)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} must be an integer") from None
    cfg = replace(base or ModelConfig(), **values)
    cfg.validate()
    return cfg


def load_config(path: str | Path, base: ModelConfig | None = None) -> ModelConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    embedding: np.ndarray  # (V + 1, D); the last row is the BOS embedding
    layers: tuple[LayerWeights, ...]
    lm_head: np.ndarray  # (D, V)
    positional: np.ndarray = field(repr=False)  # (max_context + 1, D)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def bos(self) -> int:
        return self.config.vocab_size

    @property
    def token_embeddings(self) -> np.ndarray:
        return self.embedding[: self.config.vocab_size]

    def weight_arrays(self) -> list[np.ndarray]:
        arrays = [self.embedding]
        for lw in self.layers:
            arrays += [lw.w_q, lw.w_k, lw.w_v, lw.w_o, lw.w_in, lw.b_in, lw.w_out]
        arrays.append(self.lm_head)
        return arrays

    @cached_property
    def _fingerprint(self) -> int:
        return fnv1a64(b"".join(a.astype("<f8").tobytes() for a in self.weight_arrays()))

    def fingerprint(self) -> int:
        """64-bit FNV-1a over the little-endian float64 image of all weights."""
        return self._fingerprint

    def with_zeroed_blocks(self) -> "Model":
        """Copy with attention output and MLP weights zeroed.

        The residual stream then never changes across layers, so every layer's
        KV is a linear function of the input embedding.
        """
        layers = tuple(
            replace(
                lw,
                w_o=np.zeros_like(lw.w_o),
                w_in=np.zeros_like(lw.w_in),
                b_in=np.zeros_like(lw.b_in),
                w_out=np.zeros_like(lw.w_out),
            )
            for lw in self.layers
        )
        return replace(self, layers=layers)

    def with_max_context(self, max_context: int) -> "Model":
        cfg = replace(self.config, max_context=max_context)
        cfg.validate()
        return replace(self, config=cfg, positional=sinusoidal(max_context + 1, cfg.model_dim))


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _MASK64
    return h


def sinusoidal(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def build_model(config: ModelConfig | None = None) -> Model:
    config = config or ModelConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    D, V = config.model_dim, config.vocab_size
    sigma = 0.5 / np.sqrt(D)

    embedding = rng.normal(0.0, 1.0, size=(V + 1, D))
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_q=rng.normal(0.0, sigma, size=(D, D)),
                w_k=rng.normal(0.0, sigma, size=(D, D)),
                w_v=rng.normal(0.0, sigma, size=(D, D)),
                w_o=rng.normal(0.0, sigma, size=(D, D)),
                w_in=rng.normal(0.0, sigma, size=(D, 4 * D)),
                b_in=rng.normal(0.0, sigma, size=(4 * D,)),
                w_out=rng.normal(0.0, sigma, size=(4 * D, D)),
            )
        )
    lm_head = rng.normal(0.0, config.lm_scale / np.sqrt(D), size=(D, V))
    return Model(
        config=config,
        embedding=embedding,
        layers=tuple(layers),
        lm_head=lm_head,
        positional=sinusoidal(config.max_context + 1, D),
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class StepState:
    """Per-layer key/value history for a batch, BOS included at slot 0."""

    keys: np.ndarray  # (B, t, L, D)
    values: np.ndarray  # (B, t, L, D)

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    def take(self, rows) -> "StepState":
        return StepState(self.keys[rows], self.values[rows])


def _step(model: Model, state: StepState | None, tokens: np.ndarray):
    """Process one position for a batch of rows.

    Returns (new_state, kv (B, L, 2, D), hidden (B, L + 1, D), probs (B, V)).
    """
    cfg = model.config
    B = tokens.shape[0]
    H, d = cfg.num_heads, cfg.head_dim
    pos = 0 if state is None else state.length
    x = model.embedding[tokens] + model.positional[pos]
    kv = np.empty((B, cfg.num_layers, 2, cfg.model_dim))
    hidden = np.empty((B, cfg.num_layers + 1, cfg.model_dim))
    hidden[:, 0] = x
    scale = 1.0 / np.sqrt(d)
    for li, lw in enumerate(model.layers):
        q = np.einsum("bi,ij->bj", x, lw.w_q)
        k = np.einsum("bi,ij->bj", x, lw.w_k)
        v = np.einsum("bi,ij->bj", x, lw.w_v)
        kv[:, li, 0] = k
        kv[:, li, 1] = v
        if state is None:
            keys, vals = k[:, None], v[:, None]
        else:
            keys = np.concatenate([state.keys[:, :, li], k[:, None]], axis=1)
            vals = np.concatenate([state.values[:, :, li], v[:, None]], axis=1)
        qh = q.reshape(B, H, d)
        kh = keys.reshape(B, -1, H, d)
        vh = vals.reshape(B, -1, H, d)
        att = _softmax(np.einsum("bhd,bjhd->bhj", qh, kh) * scale)
        ctx = np.einsum("bhj,bjhd->bhd", att, vh).reshape(B, H * d)
        x = x + np.einsum("bi,ij->bj", ctx, lw.w_o)
        mid = np.tanh(np.einsum("bi,ij->bj", x, lw.w_in) + lw.b_in)
        x = x + np.einsum("bi,ij->bj", mid, lw.w_out)
        hidden[:, li + 1] = x
    probs = _softmax(np.einsum("bi,ij->bj", x, model.lm_head))
    new_keys = kv[:, None, :, 0]
    new_vals = kv[:, None, :, 1]
    if state is None:
        new_state = StepState(new_keys, new_vals)
    else:
        new_state = StepState(
            np.concatenate([state.keys, new_keys], axis=1),
            np.concatenate([state.values, new_vals], axis=1),
        )
    return new_state, kv, hidden, probs


@dataclass
class ForwardBatch:
    kv: np.ndarray  # (B, n, L, 2, D)
    probs: np.ndarray  # (B, n + 1, V)
    hidden: np.ndarray  # (B, n, L + 1, D) residual stream at each token position
    state: StepState  # history including BOS, reusable for extensions


def _check_tokens(model: Model, tokens: np.ndarray) -> None:
    n = tokens.shape[1]
    if n > model.config.max_context:
        raise ValueError(f"sequence length {n} exceeds max_context {model.config.max_context}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.vocab_size):
        raise ValueError("token id out of range")


def forward_batch(model: Model, tokens) -> ForwardBatch:
    """Run equal-length sequences through the model, one position at a time."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a 2-D (batch, length) array")
    _check_tokens(model, tokens)
    B, n = tokens.shape
    cfg = model.config
    state, _, _, p0 = _step(model, None, np.full(B, model.bos))
    kv = np.empty((B, n, cfg.num_layers, 2, cfg.model_dim))
    hidden = np.empty((B, n, cfg.num_layers + 1, cfg.model_dim))
    probs = np.empty((B, n + 1, cfg.vocab_size))
    probs[:, 0] = p0
    for i in range(n):
        state, kv[:, i], hidden[:, i], probs[:, i + 1] = _step(model, state, tokens[:, i])
    return ForwardBatch(kv=kv, probs=probs, hidden=hidden, state=state)


def forward(model: Model, seq) -> tuple[np.ndarray, np.ndarray]:
    """KV tensor ``(n, L, 2, D)`` and ``n + 1`` next-token distributions."""
    seq = list(seq)
    out = forward_batch(model, np.asarray([seq], dtype=np.int64).reshape(1, len(seq)))
    return out.kv[0], out.probs[0]


def extend(model: Model, state: StepState, candidates) -> tuple[np.ndarray, np.ndarray]:
    """KV and hidden states at the next position for each candidate token.

    ``state`` holds a single context (batch of 1); the result rows follow
    ``candidates``.  This is F_M(context, t) evaluated for every t at once.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if state.length - 1 >= model.config.max_context:
        raise ValueError("context already at max_context")
    rep = state.take(np.zeros(len(candidates), dtype=np.int64))
    _, kv, hidden, _ = _step(model, rep, candidates)
    return kv, hidden


def context_state(model: Model, context) -> tuple[StepState, np.ndarray]:
    """History for ``context`` and its next-token distribution."""
    out = forward_batch(model, np.asarray([list(context)], dtype=np.int64).reshape(1, -1))
    return out.state, out.probs[0, -1]


def sequence_prob(model: Model, seq) -> float:
    seq = list(seq)
    _, probs = forward(model, seq)
    p = 1.0
    for i, t in enumerate(seq):
        p *= probs[i, t]
    return p


def entropy_bits(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in bits along the last axis (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


@dataclass(frozen=True)
class SurprisalTrace:
    surprisal: np.ndarray  # h_i, bits
    entropy: np.ndarray  # H_i, bits


def surprisal_trace(model: Model, seq) -> SurprisalTrace:
    seq = list(seq)
    _, probs = forward(model, seq)
    idx = np.arange(len(seq))
    realized = probs[idx, seq] if seq else np.empty(0)
    return SurprisalTrace(surprisal=-np.log2(realized), entropy=entropy_bits(probs[: len(seq)]))


def all_sequences(vocab_size: int, length: int) -> np.ndarray:
    """Every sequence of the given length in lexicographic order, as (V**n, n)."""
    if length == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.product(range(vocab_size), repeat=length)), dtype=np.int64)


def check_injectivity(model: Model, max_context_len: int = 4) -> None:
    """Verify layer-1 keys separate all next tokens after every context.

    Raises InjectivityError naming the seed on the first collision.
    """
    V = model.vocab_size
    max_context_len = min(max_context_len, model.config.max_context - 1)
    for n in range(max_context_len + 1):
        contexts = all_sequences(V, n)
        seqs = np.concatenate(
            [np.repeat(contexts, V, axis=0), np.tile(np.arange(V), len(contexts))[:, None]], axis=1
        )
        keys = forward_batch(model, seqs).kv[:, -1, 0, 0].reshape(len(contexts), V, -1)
        ti, tj = np.triu_indices(V, k=1)
        same = np.all(keys[:, ti] == keys[:, tj], axis=-1)
        if same.any():
            c, pair = np.argwhere(same)[0]
            raise InjectivityError(model.config.seed, contexts[c], (int(ti[pair]), int(tj[pair])))


@dataclass(frozen=True)
class LipschitzEstimate:
    per_layer: np.ndarray  # kappa^(l), each >= 1
    kv_ratio: np.ndarray  # max ||dKV^(l)|| / ||dx^(l-1)|| per layer
    block_ratio: np.ndarray  # max ||dx^(l)|| / ||dx^(l-1)|| per layer
    max_context_len: int

    @property
    def kappa(self) -> float:
        return float(self.per_layer.max())

    @property
    def f_lipschitz(self) -> float:
        """Constant for the full concatenated KV map, sqrt(sum_l kappa^(2l))."""
        L = len(self.per_layer)
        return float(np.sqrt(sum(self.kappa ** (2 * l) for l in range(1, L + 1))))


def lipschitz_estimate(model: Model, max_context_len: int = 3) -> LipschitzEstimate:
    """Exhaustive per-layer Lipschitz ratios at the divergence position.

    For every context of length <= max_context_len and every token pair, the
    two extensions differ only at the new position.  ``kv_ratio[l]`` bounds the
    layer's KV projection and ``block_ratio[l]`` the residual-stream update, so
    ||dKV^(l)|| <= kappa^l ||dE|| with kappa = max over layers of both (and 1).
    """
    cfg = model.config
    V, L = cfg.vocab_size, cfg.num_layers
    max_context_len = min(max_context_len, cfg.max_context - 1)
    kv_ratio = np.zeros(L)
    block_ratio = np.zeros(L)
    ti, tj = np.triu_indices(V, k=1)
    for n in range(max_context_len + 1):
        contexts = all_sequences(V, n)
        seqs = np.concatenate(
            [np.repeat(contexts, V, axis=0), np.tile(np.arange(V), len(contexts))[:, None]], axis=1
        )
        out = forward_batch(model, seqs)
        kv = out.kv[:, -1].reshape(len(contexts), V, L, 2 * cfg.model_dim)
        hid = out.hidden[:, -1].reshape(len(contexts), V, L + 1, cfg.model_dim)
        dkv = np.linalg.norm(kv[:, ti] - kv[:, tj], axis=-1)  # (C, P, L)
        dx = np.linalg.norm(hid[:, ti] - hid[:, tj], axis=-1)  # (C, P, L + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            r_kv = np.where(dx[..., :L] > 0, dkv / dx[..., :L], 0.0)
            r_blk = np.where(dx[..., :L] > 0, dx[..., 1:] / dx[..., :L], 0.0)
        kv_ratio = np.maximum(kv_ratio, r_kv.reshape(-1, L).max(axis=0))
        block_ratio = np.maximum(block_ratio, r_blk.reshape(-1, L).max(axis=0))
    per_layer = np.maximum(1.0, np.maximum(kv_ratio, block_ratio))
    return LipschitzEstimate(per_layer, kv_ratio, block_ratio, max_context_len)


def embedding_diameter(model: Model) -> float:
    E = model.token_embeddings
    diff = E[:, None, :] - E[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())
