import struct

import numpy as np
import pytest

from seqkv.codec import QuantizerConfig, compress, decompress
from seqkv.codec.container import MAGIC, ContainerError, framing_bits, read_store
from seqkv.dedup_store import FingerprintMismatch
from seqkv.plt_index import cluster
from seqkv.toy_lm import ModelConfig, build_model, forward

SESSIONS = {3: (1, 2, 3, 4, 5), 8: (1, 2, 3, 0), 11: (4, 4), 20: (1, 2, 6, 6, 6, 6)}


@pytest.fixture(scope="module")
def packed():
    model = build_model(ModelConfig())
    cfg = QuantizerConfig(base_depth=6)
    return model, compress(model, SESSIONS, cluster(model, SESSIONS, 3.0), cfg)


def test_header_layout(packed):
    model, cache = packed
    data = cache.data
    assert data[:4] == MAGIC
    version, fp, n = struct.unpack_from("<HQI", data, 4)
    assert (version, fp) == (1, model.fingerprint())
    text = data[18 : 18 + n].decode()
    assert "vocab_size=8" in text and "base_depth=6" in text
    assert cache.total_bits == 8 * len(data) == sum(cache.sections.values())
    assert framing_bits(model, cache.config) == cache.sections["header"] + cache.sections["counts"]


def test_roundtrip(packed):
    model, cache = packed
    out = decompress(cache.data, model)
    assert sorted(out) == sorted(SESSIONS)
    store = read_store(cache.data, model)
    for sid, seq in SESSIONS.items():
        err = np.abs(out[sid] - forward(model, seq)[0]).reshape(len(seq), -1).max(axis=1)
        assert np.all(err <= store.error_bounds(sid) + 1e-12)
        assert np.array_equal(out[sid], cache.store.reconstruct(sid))


@pytest.mark.parametrize("payload", ["f32", "f64"])
def test_raw_centroid_payloads(payload):
    model = build_model(ModelConfig())
    cache = compress(model, SESSIONS, cluster(model, SESSIONS, 3.0), QuantizerConfig(centroid_payload=payload))
    out = decompress(cache, model)
    for sid in cache.store.centroids:
        exact = forward(model, SESSIONS[sid])[0]
        if payload == "f64":
            assert np.array_equal(out[sid], exact)
        else:
            assert np.array_equal(out[sid], exact.astype(np.float32).astype(np.float64))


def test_deterministic(packed):
    model, cache = packed
    again = compress(model, dict(reversed(list(SESSIONS.items()))), cluster(model, SESSIONS, 3.0), cache.config)
    assert again.data == cache.data


def test_every_truncation_rejected(packed):
    model, cache = packed
    for cut in range(len(cache.data)):
        with pytest.raises(ContainerError):
            read_store(cache.data[:cut], model)


def test_trailing_bytes_rejected(packed):
    model, cache = packed
    with pytest.raises(ContainerError, match="trailing"):
        read_store(cache.data + b"\0", model)


def test_bad_magic_and_version(packed):
    model, cache = packed
    with pytest.raises(ContainerError):
        read_store(b"XKVC" + cache.data[4:], model)
    bumped = cache.data[:4] + struct.pack("<H", 2) + cache.data[6:]
    with pytest.raises(ContainerError, match="version"):
        read_store(bumped, model)


def test_fingerprint_mismatch(packed):
    _, cache = packed
    with pytest.raises(FingerprintMismatch):
        decompress(cache.data, build_model(ModelConfig(seed=7)))


def test_too_long_for_decoder(packed):
    model, cache = packed
    long = {0: tuple(range(8)) * 2}
    wide = model.with_max_context(16)
    data = compress(wide, long, cluster(wide, long, 1.0), QuantizerConfig()).data
    with pytest.raises(ContainerError, match="max_context"):
        read_store(data, model)


def test_rejects_oversized_ids():
    model = build_model(ModelConfig())
    with pytest.raises(ContainerError):
        compress(model, {2**32: (1,)}, [], QuantizerConfig())
