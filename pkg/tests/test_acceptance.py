"""One test per acceptance criterion; each prints a single PASS/FAIL line."""
import dataclasses
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

import conftest
from oracles import brute_best_match, token_conditional_entropies
from seqkv.analyzer import (
    WorkloadSpec,
    generate_workload,
    linear_decay_source,
    model_entropy_trace,
    verify_asymptotic,
    verify_duality,
    verify_residual_bounds,
    verify_sequential_bound,
)
from seqkv.cli import main
from seqkv.codec import ADAPTIVE, UNIFORM, WATERFILL, QuantizerConfig, adaptive_depth, compress, read_store
from seqkv.codec.container import framing_bits
from seqkv.dedup_store import analyze_sessions, layer_savings
from seqkv.plt_index import PrefixIndex, cluster
from seqkv.toy_lm import InjectivityError, check_injectivity, forward

# DERIVED: H(t_i | t_<i) of the default model, naive-forward oracle, frozen
TOKEN_ENTROPY = [1.74674983, 1.0705652, 0.91188914, 0.80564112, 1.07057811]

STORAGE_TARGETS = [(0.5, 0.2), (0.9, 0.1), (1.0, 0.5)]


def record(n, passed, detail):
    line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture(scope="module")
def model80(model):
    return model.with_max_context(80)


@pytest.fixture(scope="module")
def storage_runs(model80):
    """The three storage workloads, each compressed once."""
    runs = {}
    for f, r in STORAGE_TARGETS:
        w = generate_workload(model80, WorkloadSpec(sessions=400, cluster_fraction=f, tail_ratio=r, length=80, seed=1))
        config = QuantizerConfig(base_depth=8)
        box = compress(model80, w.sessions, cluster(model80, w.sessions, w.delta), config)
        runs[(f, r)] = (w, box)
    return runs


@pytest.fixture(scope="module")
def model24(model):
    return model.with_max_context(24)


@pytest.fixture(scope="module")
def workload24(model24):
    return generate_workload(model24, WorkloadSpec(sessions=100, cluster_fraction=0.5, tail_ratio=0.25, length=24, seed=2))


def test_c01_ratio_arithmetic(capsys):
    def ratio(*extra):
        assert main(["ratio", "--format", "records", *extra]) == 0
        out = capsys.readouterr().out
        return dict(l.split("=", 1) for l in out.splitlines() if "=" in l and not l.startswith("config "))

    base = ratio("-L", "80", "-H", "64", "-d", "128", "-b", "3", "--h-bar", "4.3")
    fp = ratio("-b", "16")
    over = ratio("--overhead", "1000")
    bits = float(base["bits_per_token_b"])
    ok = (
        f"{bits:.3g}" == "3.93e+06"
        and base["ratio_b_3sf"] == "9.14e+05"
        and f"{float(fp['ratio_b']):.2g}" == "4.9e+06"
        and over["ratio_b_3sf"] == "914"
    )
    record(1, ok, f"bits/token={bits:.6g} ratio={base['ratio_b']} b16={fp['ratio_b']} overhead1000={over['ratio_b']}")
    assert ok


def test_c02_entropy_equality(model):
    t0 = time.perf_counter()
    rep = verify_sequential_bound(model, max_len=5)
    elapsed = time.perf_counter() - t0
    ok = rep.max_gap <= 1e-9 and elapsed < 60
    record(2, ok, f"max gap={rep.max_gap:.2e} bits over 32768 sequences in {elapsed:.1f}s")
    assert ok
    np.testing.assert_allclose(rep.token_entropy, TOKEN_ENTROPY, atol=5e-9)


def test_c02_token_entropy_oracle(model):
    # the frozen values above came from this oracle; recheck the first three
    assert token_conditional_entropies(model, 3) == pytest.approx(TOKEN_ENTROPY[:3], abs=5e-9)


def test_c03_injectivity(model):
    check_injectivity(model, 4)
    emb = model.embedding.copy()
    emb[3] = emb[5]
    with pytest.raises(InjectivityError) as err:
        check_injectivity(dataclasses.replace(model, embedding=emb), 4)
    ok = "seed 42" in str(err.value)
    record(3, ok, f"all contexts len<=4 separate {model.vocab_size} keys; collision reports: {err.value}")
    assert ok


@pytest.fixture(scope="module")
def residual_checks(model):
    return verify_residual_bounds(model, max_len=4).checks(identity_tol=1e-10)


@pytest.mark.parametrize("name", ["identity", "norm_bound", "coupling"])
def test_c04_residual_bounds(residual_checks, name):
    frac, worst = residual_checks[name]
    assert frac == 1.0, f"{name}: {frac:.4%} pass, worst excess {worst:.3e}"


@pytest.mark.xfail(strict=True, reason="the C_E^2/4 variance cap is false for vectors; see notes")
def test_c04_popoviciu_cap(residual_checks):
    frac, worst = residual_checks["popoviciu"]
    assert frac == 1.0, f"popoviciu: {frac:.4%} pass, worst excess {worst:.3e}"


def test_c04_summary(residual_checks):
    parts = [f"{k}={v[0]:.2%}" for k, v in residual_checks.items()]
    ok = all(v[0] == 1.0 for v in residual_checks.values())
    record(4, ok, " ".join(parts) + " (4681 contexts; the C_E^2/4 cap fails, see notes)")


def test_c05_lossless_prefix(model):
    k = 5
    prefix = [1, 4, 2, 7, 3]
    sessions = {0: prefix + [0, 6, 2], 1: prefix + [5, 5, 1]}
    recs = cluster(model, sessions, 0.0)
    assert len(recs) == 1 and len(recs[0].members) == 2
    config = QuantizerConfig(base_depth=4, centroid_payload="f64")
    box = compress(model, sessions, recs, config)
    store = read_store(box.data, model)
    member = next(iter(store.deltas.values()))
    bits = member.position_bits()
    kv = store.reconstruct(member.session_id)
    direct, _ = forward(model, sessions[member.session_id])
    ok = member.divergence == k and int(bits[:k].sum()) == 0 and np.array_equal(kv[:k], direct[:k])
    record(5, ok, f"member {member.session_id}: prefix payload bits={int(bits[:k].sum())}, "
                  f"prefix KV bit-identical={np.array_equal(kv[:k], direct[:k])}, tail bits={int(bits[k:].sum())}")
    assert ok


def test_c06_storage_formula(storage_runs, model80):
    errs = []
    for (f, r), (w, box) in storage_runs.items():
        rep = box.store.storage_report((f, r), framing_bits=framing_bits(model80, box.config))
        assert rep.stack_bits == box.total_bits
        errs.append((f, r, rep.measured, rep.predicted_target, rep.measured / rep.predicted_target - 1))
    ok = all(abs(e[-1]) <= 0.05 for e in errs)
    record(6, ok, "; ".join(f"(f={f}, l/n={r}) measured={m:.4f} formula={p:.4f} rel={e:+.2%}" for f, r, m, p, e in errs))
    assert ok


@pytest.mark.parametrize("config", [QuantizerConfig(mode=UNIFORM, base_depth=b) for b in (2, 4, 8)]
                         + [QuantizerConfig(mode=ADAPTIVE, base_depth=3)], ids=["b2", "b4", "b8", "adaptive3"])
def test_c07_roundtrip_bound(model24, workload24, config):
    w = workload24
    box = compress(model24, w.sessions, cluster(model24, w.sessions, w.delta), config)
    store = read_store(box.data, model24)
    decoded = store.reconstruct_all()
    direct = analyze_sessions(model24, w.sessions)
    worst = -np.inf
    for sid, kv in decoded.items():
        err = np.abs(kv - direct[sid].kv).reshape(len(kv), -1).max(axis=1)
        worst = max(worst, float(np.max(err - store.error_bounds(sid))))
    ok = worst <= 1e-12
    label = f"uniform b={config.base_depth}" if config.mode == UNIFORM else f"adaptive b0={config.base_depth}"
    record(7, ok, f"{label}: max(error - scale/2^depth) = {worst:.2e} over {len(decoded)} sessions")
    assert ok


def _waterfill_run(model, w):
    analyses = analyze_sessions(model, w.sessions)
    n_comp = next(iter(analyses.values())).kv[0].size
    sigma2 = np.concatenate([a.variance / n_comp for a in analyses.values()])
    D = float(np.quantile(sigma2, 0.25))
    recs = cluster(model, w.sessions, w.delta)
    wf = compress(model, w.sessions, recs, QuantizerConfig(mode=WATERFILL, distortion=D))
    uniform = {b: compress(model, w.sessions, recs, QuantizerConfig(base_depth=b)).total_bits for b in (2, 3, 4)}

    store = read_store(wf.data, model)
    expected, realized = [], []
    for sid, kv in store.reconstruct_all().items():
        a = analyses[sid]
        if sid in store.centroids:
            depth = [r.depth for r in store.centroids[sid].records]
        else:
            d = store.deltas[sid]
            head = store.centroids[d.centroid_id].records[: d.divergence]
            depth = [r.depth for r in head + d.records]
        for i in np.flatnonzero(np.array(depth) == 0):
            # E_{t~P} of the squared error of the decoded value, and the error of the token actually drawn
            diff = (a.cand[i] - kv[i]).reshape(len(a.probs[i]), -1)
            expected.append(float(a.probs[i] @ (diff**2).sum(axis=1)) / n_comp)
            realized.append(float(((a.kv[i] - kv[i]) ** 2).mean()))
    return dict(D=D, covered=float(np.mean(sigma2 <= D)), bits=wf.total_bits, uniform=uniform,
                expected=max(expected), realized=float(np.mean(realized)), zero=len(expected))


def test_c08_waterfill(model24, workload24):
    # workload24 members are steered off the likeliest token, so their realized
    # error is not a draw from P; the model-sampled workload measures that part
    sampled = generate_workload(model24, WorkloadSpec(sessions=100, cluster_fraction=0.0, length=24, seed=2))
    runs = {"clustered": _waterfill_run(model24, workload24), "sampled": _waterfill_run(model24, sampled)}
    ok = True
    parts = []
    for name, r in runs.items():
        ok &= r["covered"] >= 0.2 and all(r["bits"] < u for u in r["uniform"].values())
        ok &= r["expected"] <= r["D"] * (1 + 1e-12)
        parts.append(f"{name}: D={r['D']:.4g} covers {r['covered']:.1%}, waterfill={r['bits']} bits vs uniform "
                     + "/".join(str(u) for u in r["uniform"].values())
                     + f" (b=2/3/4), {r['zero']} depth-0 positions, max expected MSE={r['expected']:.4g}, "
                     f"mean realized MSE={r['realized']:.4g}")
    ok &= runs["sampled"]["realized"] <= runs["sampled"]["D"]
    record(8, ok, "; ".join(parts))
    assert ok


def test_c09_adaptive_depth():
    h_bar, eps = 4.3, 1e-9
    got = [adaptive_depth(h, 3, h_bar) for h in (0.0, h_bar, 2 * h_bar + eps)]
    ok = got == [1, 3, 6]
    record(9, ok, f"depths {got} for h in (0, h_bar, 2 h_bar + eps)")
    assert ok


def test_c10_duality(model):
    reps = [verify_duality(model, k, max_len=4) for k in (1, 2, 4, 8)]
    full = reps[-1].full_vocab_gap
    ok = all(r.max_gap <= 1e-12 for r in reps) and full <= 4 * np.finfo(float).eps
    record(10, ok, " ".join(f"k={r.k}:{r.max_gap:.1e}" for r in reps)
           + f" over {reps[0].contexts} contexts; k=|V| gives |rate-1|={full:.1e}")
    assert ok


def test_c11_orthogonality(storage_runs):
    rows = []
    for key, (_, box) in storage_runs.items():
        s = layer_savings(box.store)
        rows.append((key, s["layer1_saved"], s["layer2_saved"], s["total_saved"]))
    ok = all(a + b == t for _, a, b, t in rows)
    record(11, ok, "; ".join(f"{k}: {a}+{b}={t}" for k, a, b, t in rows))
    assert ok


def test_c12_asymptotics(model):
    trace = verify_asymptotic(linear_decay_source(64), 64)
    toy = model_entropy_trace(model, 5)
    avg = np.cumsum(toy) / np.arange(1, len(toy) + 1)
    print("toy running average:", " ".join(f"{x:.6f}" for x in avg))
    ok = trace.non_increasing
    record(12, ok, f"synthetic running average non-increasing over n=1..64 "
                   f"({trace.running_average[0]:.4f} -> {trace.running_average[-1]:.4f}); toy trace emitted")
    assert ok


def test_c13_trie_oracle(model4):
    rng = np.random.default_rng(13)
    stored = {}
    index = PrefixIndex(model4)
    for sid in range(50):
        seq = tuple(int(t) for t in rng.integers(0, 4, size=int(rng.integers(1, 9))))
        stored[sid] = seq
        index.insert(sid, seq)
    mismatches = total = 0
    for n in range(7):
        for q in np.ndindex(*(4,) * n):
            total += 1
            got = index.best_match(q)
            sid, lcp, metric = brute_best_match(model4, stored, q)
            if (got.session_id, got.shared_prefix_length) != (sid, lcp) or not math.isclose(
                got.metric, metric, rel_tol=1e-12, abs_tol=1e-12
            ):
                mismatches += 1
    ok = mismatches == 0 and total == 5461
    record(13, ok, f"{total} queries against 50 sessions, {mismatches} mismatches")
    assert ok


def _pipeline(workdir):
    env = dict(os.environ, PYTHONHASHSEED="random")
    cmds = [
        ["gen", "--seed", "3", "--set", "max_context=24", "--set", "sessions=60", "--out", "w.txt"],
        ["compress", "w.txt", "--set", "max_context=24", "--out", "c.skvc"],
    ]
    out = b""
    for argv in cmds:
        proc = subprocess.run([sys.executable, "-m", "seqkv.cli", *argv], cwd=workdir, env=env,
                              capture_output=True, check=True)
        out += proc.stdout
    return (workdir / "c.skvc").read_bytes(), out


def test_c14_determinism(tmp_path):
    runs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        runs.append(_pipeline(d))
    (box_a, out_a), (box_b, out_b) = runs
    ok = box_a == box_b and out_a == out_b
    record(14, ok, f"containers {len(box_a)} bytes identical={box_a == box_b}, stdout identical={out_a == out_b}")
    assert ok
