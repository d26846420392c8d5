import numpy as np
import pytest

from seqkv.codec.quant import QuantizerConfig
from seqkv.dedup_store import (
    CENTROID_HEADER_BYTES,
    MEMBER_HEADER_BYTES,
    DedupStore,
    FingerprintMismatch,
    UnknownSession,
    analyze_sessions,
    calibrate,
    layer_savings,
    predicted_lipschitz_check,
    store_cluster,
)
from seqkv.plt_index import cluster
from seqkv.toy_lm import ModelConfig, build_model, forward, lipschitz_estimate

SESSIONS = {
    0: (1, 2, 3, 4, 5, 6),
    1: (1, 2, 3, 4, 0, 0),
    2: (1, 2, 3, 7, 7),
    3: (6, 6, 6),
    4: (5, 1, 2, 3),
}


def _store(model, config, delta=4.0, sessions=SESSIONS):
    return DedupStore.build(model, sessions, cluster(model, sessions, delta), config)


def test_members_skip_prefix(model):
    store = _store(model, QuantizerConfig(centroid_payload="f64"))
    assert len(store.deltas) == 2
    for d in store.deltas.values():
        bits = d.position_bits()
        assert np.all(bits[: d.divergence] == 0)
        assert np.all(bits[d.divergence :] > 0)
        rec = store.reconstruct(d.session_id)
        exact = forward(model, store.tokens(d.session_id))[0]
        assert np.array_equal(rec[: d.divergence], exact[: d.divergence])


@pytest.mark.parametrize("payload", ["codec", "f32", "f64"])
@pytest.mark.parametrize("tail_mode", ["predictive", "centroid"])
def test_reconstruction_within_bounds(model, payload, tail_mode):
    store = _store(model, QuantizerConfig(base_depth=5, centroid_payload=payload, tail_mode=tail_mode))
    for sid, seq in SESSIONS.items():
        err = np.abs(store.reconstruct(sid) - forward(model, seq)[0]).reshape(len(seq), -1).max(axis=1)
        assert np.all(err <= store.error_bounds(sid) + 1e-12)
        assert store.tokens(sid) == seq


@pytest.mark.parametrize("predictor", ["exact", "top_k", "linear"])
def test_predictors_roundtrip(model, predictor):
    store = _store(model, QuantizerConfig(predictor=predictor, top_k=3))
    for sid, seq in SESSIONS.items():
        err = np.abs(store.reconstruct(sid) - forward(model, seq)[0]).reshape(len(seq), -1).max(axis=1)
        assert np.all(err <= store.error_bounds(sid) + 1e-12)


def test_reconstruct_all_matches_single(model):
    store = _store(model, QuantizerConfig())
    fresh = _store(model, QuantizerConfig())
    batch = fresh.reconstruct_all()
    for sid in SESSIONS:
        assert np.array_equal(batch[sid], store.reconstruct(sid))


def test_bit_accounting(model):
    store = _store(model, QuantizerConfig(base_depth=3))
    n_comp = 32
    rec_bits = 8 * (5 + (3 * n_comp + 7) // 8)
    for c in store.centroids.values():
        assert c.stored_bits() == 8 * (CENTROID_HEADER_BYTES + 2 * c.n) + c.n * rec_bits
    for d in store.deltas.values():
        tail = len(d.tail_tokens)
        assert d.stored_bits() == 8 * (MEMBER_HEADER_BYTES + 2 * tail) + tail * rec_bits
    assert store.stored_bits() < sum(store.full_bits.values())


def test_calibration_sets_mean_surprisal(model):
    analyses = analyze_sessions(model, SESSIONS)
    cfg = calibrate(QuantizerConfig(mode="surprisal_adaptive", base_depth=3), analyses.values())
    mean = np.concatenate([a.surprisal for a in analyses.values()]).mean()
    assert cfg.mean_surprisal == pytest.approx(mean)
    fixed = calibrate(QuantizerConfig(mode="surprisal_adaptive", mean_surprisal=2.0), analyses.values())
    assert fixed.mean_surprisal == 2.0


def test_storage_report(model):
    store = _store(model, QuantizerConfig())
    rep = store.storage_report(target=(0.6, 0.5))
    assert rep.n_sessions == 5
    assert rep.clustered_fraction == pytest.approx(3 / 5)
    assert rep.measured == pytest.approx(rep.stack_bits / rep.baseline_bits)
    assert rep.predicted == pytest.approx(1 - rep.clustered_fraction * (1 - rep.tail_ratio))
    assert "relative_cost_measured" in rep.text()
    assert rep.records().startswith("storage ")


def test_layer_savings_partition(model):
    store = _store(model, QuantizerConfig(base_depth=4))
    s = layer_savings(store)
    assert s["layer1_saved"] + s["layer2_saved"] == s["total_saved"]
    assert s["positions"] == sum(len(v) for v in SESSIONS.values())
    assert s["layer1_saved"] == 32 * 32 * sum(d.divergence for d in store.deltas.values())


def test_fingerprint_guard(model):
    rec = cluster(model, SESSIONS, 4.0)[0]
    other = build_model(ModelConfig(seed=1))
    centroid, deltas = store_cluster(other, rec, SESSIONS, QuantizerConfig())
    with pytest.raises(FingerprintMismatch):
        DedupStore(model, QuantizerConfig()).add(centroid, deltas)


def test_unknown_session(model):
    with pytest.raises(UnknownSession):
        _store(model, QuantizerConfig()).reconstruct(99)


def test_lipschitz_at_divergence(model):
    lip = lipschitz_estimate(model, 3)
    a = analyze_sessions(model, {0: SESSIONS[0], 1: SESSIONS[2]})
    checks = predicted_lipschitz_check(model, a[0], a[1], lip.kappa)
    assert checks == [True, True]
