"""The SKVC container: a byte-exact serialization of a clustered KV store.

Layout (all integers little-endian)::

    "SKVC"  version:u16  fingerprint:u64
    config_len:u32  config:utf-8 key=value lines
    centroid_count:u16
      session:u32  n:u16  tokens:u16*n  payload
    member_count:u16
      session:u32  centroid:u32  divergence:u16  count:u16  tail_tokens:u16*count
      record*count

A position record is ``depth:u8  scale:f32  codes`` with the codes packed
MSB-first at ``depth`` bits each and zero-padded to a byte.  A centroid payload
is ``n`` records (``codec``), or the raw KV as f32 / f64 values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dedup_store as ds  # module import: dedup_store imports this package
from ..plt_index import ClusterRecord
from ..toy_lm import Model
from .quant import CodecError, PositionRecord, QuantizerConfig, pack_codes, record_nbytes, unpack_codes

MAGIC = b"SKVC"
VERSION = 1
MODEL_KEYS = ("vocab_size", "layers", "heads", "head_dim", "seed", "max_context")


class ContainerError(CodecError):
    pass


@dataclass
class CompressedCache:
    data: bytes
    fingerprint: int
    config: QuantizerConfig
    sections: dict = field(default_factory=dict)  # section name -> bits
    store: ds.DedupStore | None = None

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    def write(self, path: str | Path) -> None:
        Path(path).write_bytes(self.data)


def _config_text(model: Model, config: QuantizerConfig) -> str:
    cfg = model.config
    model_vals = dict(
        vocab_size=cfg.vocab_size,
        layers=cfg.num_layers,
        heads=cfg.num_heads,
        head_dim=cfg.head_dim,
        seed=cfg.seed,
        max_context=cfg.max_context,
    )
    lines = [f"{k}={model_vals[k]}" for k in MODEL_KEYS]
    lines += [f"{k}={v}" for k, v in config.as_dict().items()]
    return "\n".join(lines) + "\n"


def _pack_record(rec: PositionRecord) -> bytes:
    return struct.pack("<Bf", rec.depth, rec.scale) + pack_codes(rec.codes, rec.depth)


def framing_bits(model: Model, config: QuantizerConfig) -> int:
    """Bits of the container outside any session section."""
    text = _config_text(model, config).encode("utf-8")
    return 8 * (4 + 2 + 8 + 4 + len(text) + 2 + 2)


def serialize(store: ds.DedupStore) -> CompressedCache:
    model, config = store.model, store.config
    text = _config_text(model, config).encode("utf-8")
    out = bytearray()
    out += MAGIC + struct.pack("<HQI", VERSION, store.fingerprint, len(text)) + text
    header_bits = 8 * len(out)
    out += struct.pack("<H", len(store.centroids))
    start = len(out)
    for sid in sorted(store.centroids):
        c = store.centroids[sid]
        out += struct.pack("<IH", sid, c.n) + struct.pack(f"<{c.n}H", *c.tokens)
        if c.payload == "codec":
            for rec in c.records:
                out += _pack_record(rec)
        elif c.payload == "f32":
            out += c.kv.astype("<f4").tobytes()
        else:
            out += c.kv.astype("<f8").tobytes()
    centroid_bits = 8 * (len(out) - start)
    out += struct.pack("<H", len(store.deltas))
    start = len(out)
    for sid in sorted(store.deltas):
        d = store.deltas[sid]
        count = len(d.tail_tokens)
        out += struct.pack("<IIHH", sid, d.centroid_id, d.divergence, count)
        out += struct.pack(f"<{count}H", *d.tail_tokens)
        for rec in d.records:
            out += _pack_record(rec)
    member_bits = 8 * (len(out) - start)
    sections = {
        "header": header_bits,
        "centroids": centroid_bits,
        "members": member_bits,
        "counts": 32,
    }
    cache = CompressedCache(bytes(out), store.fingerprint, config, sections, store)
    # every section is accounted for, and the store's own bit count agrees
    assert sum(sections.values()) == cache.total_bits
    assert centroid_bits + member_bits == store.stored_bits()
    return cache


def compress(
    model: Model, sessions: dict, clusters: list[ClusterRecord], config: QuantizerConfig
) -> CompressedCache:
    """Store each cluster prefix once and quantize every other position as a predictive residual."""
    if not isinstance(sessions, dict):
        sessions = dict(enumerate(sessions))
    ids = sorted(sessions)
    for sid in ids:
        if not 0 <= sid < 2**32:
            raise ContainerError(f"session id {sid} does not fit in u32")
        if len(sessions[sid]) > 0xFFFF:
            raise ContainerError(f"session {sid} is too long for a u16 length")
    if len(clusters) > 0xFFFF or len(ids) > 0xFFFF:
        raise ContainerError("too many sessions for u16 counts")
    return serialize(ds.DedupStore.build(model, sessions, clusters, config))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated container: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_record(r: _Reader, n_comp: int) -> PositionRecord:
    depth, scale = r.unpack("<Bf")
    if depth > 16:
        raise ContainerError(f"record depth {depth} exceeds 16")
    nbytes = record_nbytes(depth, n_comp) - 5
    codes = unpack_codes(r.take(nbytes), depth, n_comp)
    return PositionRecord(depth, float(scale), codes)


def parse_config_block(text: str) -> tuple[dict, QuantizerConfig]:
    values = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, val = line.partition("=")
        values[key] = val
    try:
        model_vals = {k: int(values[k]) for k in MODEL_KEYS}
        config = QuantizerConfig.from_dict(values)
    except (KeyError, ValueError) as exc:
        raise ContainerError(f"bad config block: {exc}") from exc
    return model_vals, config


def read_store(data: bytes, model: Model) -> ds.DedupStore:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ContainerError("not an SKVC container")
    version, fingerprint, text_len = r.unpack("<HQI")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if fingerprint != model.fingerprint():
        raise ds.FingerprintMismatch(
            f"container was written by model {fingerprint:#018x}, "
            f"decoder has {model.fingerprint():#018x}"
        )
    model_vals, config = parse_config_block(r.take(text_len).decode("utf-8"))
    cfg = model.config
    if (model_vals["layers"], model_vals["heads"], model_vals["head_dim"]) != (
        cfg.num_layers,
        cfg.num_heads,
        cfg.head_dim,
    ):
        raise ContainerError("container KV shape does not match the model")
    shape = (cfg.num_layers, 2, cfg.model_dim)
    n_comp = int(np.prod(shape))
    store = ds.DedupStore(model, config)
    (n_centroids,) = r.unpack("<H")
    for _ in range(n_centroids):
        sid, n = r.unpack("<IH")
        if n > cfg.max_context:
            raise ContainerError(f"centroid {sid} has {n} positions, model max_context is {cfg.max_context}")
        tokens = tuple(r.unpack(f"<{n}H"))
        if config.centroid_payload == "codec":
            records = [_read_record(r, n_comp) for _ in range(n)]
            kv = np.full((n,) + shape, np.nan)
        elif config.centroid_payload == "f32":
            records = []
            kv = np.frombuffer(r.take(4 * n * n_comp), dtype="<f4").astype(np.float64).reshape((n,) + shape)
        else:
            records = []
            kv = np.frombuffer(r.take(8 * n * n_comp), dtype="<f8").reshape((n,) + shape).copy()
        store.centroids[sid] = ds.CentroidCache(sid, tokens, kv, fingerprint, config.centroid_payload, records)
    (n_members,) = r.unpack("<H")
    for _ in range(n_members):
        sid, cid, div, count = r.unpack("<IIHH")
        if cid not in store.centroids:
            raise ContainerError(f"member {sid} references unknown centroid {cid}")
        if div > store.centroids[cid].n:
            raise ContainerError(f"member {sid} diverges past the end of centroid {cid}")
        if div + count > cfg.max_context:
            raise ContainerError(f"member {sid} has {div + count} positions, model max_context is {cfg.max_context}")
        tail = tuple(r.unpack(f"<{count}H"))
        records = [_read_record(r, n_comp) for _ in range(count)]
        store.deltas[sid] = ds.DeltaCache(sid, cid, div, tail, records, n_comp)
    if r.pos != len(data):
        raise ContainerError(f"{len(data) - r.pos} trailing bytes after the last section")
    return store


def decompress(data: bytes | CompressedCache, model: Model) -> dict[int, np.ndarray]:
    """Reconstructed KV tensor for every stored session."""
    if isinstance(data, CompressedCache):
        data = data.data
    store = read_store(data, model)
    return store.reconstruct_all()


def read(path: str | Path) -> bytes:
    return Path(path).read_bytes()
