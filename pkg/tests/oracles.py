"""Slow, independent reference implementations used to freeze expected values."""
from __future__ import annotations

import itertools
import math

import numpy as np


def naive_forward(model, seq):
    """Position-by-position forward pass with plain loops over heads and history.

    Returns (kv (n, L, 2, D), probs (n + 1, V)).
    """
    cfg = model.config
    H, d = cfg.num_heads, cfg.head_dim
    history = [[] for _ in model.layers]  # per layer: list of (k, v)
    tokens = [model.bos] + list(seq)
    kvs, dists = [], []
    for pos, tok in enumerate(tokens):
        x = model.embedding[tok] + model.positional[pos]
        layer_kv = []
        for li, lw in enumerate(model.layers):
            q, k, v = x @ lw.w_q, x @ lw.w_k, x @ lw.w_v
            history[li].append((k, v))
            layer_kv.append((k, v))
            ctx = np.zeros(H * d)
            for h in range(H):
                sl = slice(h * d, (h + 1) * d)
                scores = np.array([q[sl] @ kk[sl] for kk, _ in history[li]]) / math.sqrt(d)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                ctx[sl] = sum(wi * vv[sl] for wi, (_, vv) in zip(w, history[li]))
            x = x + ctx @ lw.w_o
            x = x + np.tanh(x @ lw.w_in + lw.b_in) @ lw.w_out
        logits = x @ model.lm_head
        p = np.exp(logits - logits.max())
        dists.append(p / p.sum())
        if pos > 0:
            kvs.append(np.array([[k, v] for k, v in layer_kv]))
    D = model.embedding.shape[1]
    return np.array(kvs).reshape(len(seq), len(model.layers), 2, D), np.array(dists)


def naive_seq_prob(model, seq):
    _, probs = naive_forward(model, seq)
    return math.prod(probs[i][t] for i, t in enumerate(seq))


def entropy(p):
    return -sum(x * math.log2(x) for x in p if x > 0)


def token_conditional_entropies(model, max_len):
    """H(t_i | t_<i) by walking every context with the naive forward pass."""
    V = model.vocab_size
    out = []
    for i in range(1, max_len + 1):
        total = 0.0
        for ctx in itertools.product(range(V), repeat=i - 1):
            _, probs = naive_forward(model, ctx)
            pc = math.prod(probs[j][t] for j, t in enumerate(ctx))
            total += pc * entropy(probs[-1])
        out.append(total)
    return out


def dict_conditional_entropy(rows):
    """H(Y | X) from (x, y, prob) triples using plain dictionaries."""
    px, pxy = {}, {}
    for x, y, p in rows:
        px[x] = px.get(x, 0.0) + p
        pxy[(x, y)] = pxy.get((x, y), 0.0) + p
    return sum(p * (math.log2(px[x]) - math.log2(p)) for (x, _), p in pxy.items() if p > 0)


def brute_best_match(model, stored: dict, query):
    """Stored session with the longest common prefix, ties to the lowest id."""
    best = None
    for sid in sorted(stored):
        s = stored[sid]
        n = 0
        while n < min(len(s), len(query)) and s[n] == query[n]:
            n += 1
        if best is None or n > best[1]:
            best = (sid, n)
    sid, n = best
    metric = -math.log2(naive_seq_prob(model, query[:n])) if n else 0.0
    return sid, n, metric


def midrise(r, depth, scale):
    """Scalar midrise quantizer over [-scale, scale] written out per component."""
    if scale == 0:
        return np.zeros(len(r))
    levels = 2**depth
    step = 2 * scale / levels
    out = []
    for x in r:
        code = min(levels - 1, max(0, int(math.floor((x + scale) / step))))
        out.append(-scale + (code + 0.5) * step)
    return np.array(out)


def pack_bits(codes, depth) -> bytes:
    bits = "".join(format(int(c), f"0{depth}b") for c in codes)
    bits += "0" * (-len(bits) % 8)
    return bytes(int(bits[i : i + 8], 2) for i in range(0, len(bits), 8))
