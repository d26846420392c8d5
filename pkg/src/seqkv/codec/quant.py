"""Per-position residual quantization and bit-depth policies."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 16

UNIFORM = "uniform_b"
ADAPTIVE = "surprisal_adaptive"
WATERFILL = "waterfill"
MODES = (UNIFORM, ADAPTIVE, WATERFILL)


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    mode: str = UNIFORM
    base_depth: int = 4  # b0, bits per component
    distortion: float = 0.0  # D, squared units per component (waterfill)
    mean_surprisal: float = 0.0  # h-bar, bits; <= 0 means calibrate on the corpus
    predictor: str = "exact"  # exact | top_k | linear
    top_k: int = 4
    tail_mode: str = "predictive"  # predictive | centroid
    centroid_payload: str = "codec"  # codec | f32 | f64

    def validate(self, calibrated: bool = True) -> None:
        if self.mode not in MODES:
            raise CodecError(f"unknown quantizer mode {self.mode!r}")
        if not 1 <= self.base_depth <= MAX_DEPTH:
            raise CodecError(f"base_depth must be in [1, {MAX_DEPTH}]")
        if self.mode == WATERFILL and not self.distortion > 0:
            raise CodecError("waterfill mode needs distortion D > 0")
        if self.mode == ADAPTIVE and calibrated and not self.mean_surprisal > 0:
            raise CodecError("surprisal_adaptive mode needs mean surprisal > 0")
        if self.predictor not in ("exact", "top_k", "linear"):
            raise CodecError(f"unknown predictor {self.predictor!r}")
        if self.top_k < 1:
            raise CodecError("top_k must be >= 1")
        if self.tail_mode not in ("predictive", "centroid"):
            raise CodecError(f"unknown tail_mode {self.tail_mode!r}")
        if self.centroid_payload not in ("codec", "f32", "f64"):
            raise CodecError(f"unknown centroid_payload {self.centroid_payload!r}")

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "base_depth": str(self.base_depth),
            "distortion": repr(float(self.distortion)),
            "mean_surprisal": repr(float(self.mean_surprisal)),
            "predictor": self.predictor,
            "top_k": str(self.top_k),
            "tail_mode": self.tail_mode,
            "centroid_payload": self.centroid_payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerConfig":
        return cls(
            mode=d["mode"],
            base_depth=int(d["base_depth"]),
            distortion=float(d["distortion"]),
            mean_surprisal=float(d["mean_surprisal"]),
            predictor=d["predictor"],
            top_k=int(d["top_k"]),
            tail_mode=d["tail_mode"],
            centroid_payload=d["centroid_payload"],
        )


def adaptive_depth(h: float, b0: int, h_bar: float) -> int:
    """max(1, floor(b0 * h / h_bar)), capped at the 16-bit code width."""
    if not h_bar > 0:
        raise CodecError("mean surprisal must be > 0")
    return min(MAX_DEPTH, max(1, math.floor(b0 * h / h_bar)))


def waterfill_rate(sigma2: float, distortion: float, d_head: int) -> float:
    """Gaussian rate bound (d/2) log2(sigma^2 / D)_+ in bits per vector."""
    if not distortion > 0:
        raise CodecError("distortion must be > 0")
    if sigma2 <= distortion:
        return 0.0
    return d_head / 2 * math.log2(sigma2 / distortion)


def waterfill_depth(sigma2: float, distortion: float, d_head: int) -> int:
    """Whole bits per component, rounded up so the distortion target holds."""
    rate = waterfill_rate(sigma2, distortion, d_head)
    return min(MAX_DEPTH, math.ceil(rate / d_head))


def scale_for(residual: np.ndarray) -> float:
    """Max-abs component rounded up to the nearest float32, so nothing clamps."""
    s = float(np.max(np.abs(residual))) if residual.size else 0.0
    s32 = np.float32(s)
    if float(s32) < s:
        s32 = np.nextafter(s32, np.float32(np.inf))
    return float(s32)


@dataclass(frozen=True)
class PositionRecord:
    depth: int
    scale: float  # exactly representable as float32
    codes: np.ndarray  # uint16, one per component; empty at depth 0
    clamped: int = 0

    def payload_bits(self, n_components: int) -> int:
        return 8 * record_nbytes(self.depth, n_components)


def record_nbytes(depth: int, n_components: int) -> int:
    return 1 + 4 + (depth * n_components + 7) // 8


def encode_residual(residual: np.ndarray, depth: int, scale: float | None = None) -> PositionRecord:
    """Offset-binary midrise quantization of a flat residual over [-scale, scale]."""
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(r)):
        raise CodecError("non-finite residual component")
    if not 0 <= depth <= MAX_DEPTH:
        raise CodecError(f"depth must be in [0, {MAX_DEPTH}]")
    scale = scale_for(r) if scale is None else float(np.float32(scale))
    clamped = int(np.count_nonzero(np.abs(r) > scale))
    if depth == 0:
        return PositionRecord(0, scale, np.zeros(0, dtype=np.uint16), clamped)
    levels = 1 << depth
    if scale == 0.0:
        codes = np.zeros(r.size, dtype=np.uint16)
    else:
        step = 2.0 * scale / levels
        codes = np.clip(np.floor((r + scale) / step), 0, levels - 1).astype(np.uint16)
    return PositionRecord(depth, scale, codes, clamped)


def decode_residual(record: PositionRecord, n_components: int) -> np.ndarray:
    if record.depth == 0:
        return np.zeros(n_components)
    if record.codes.size != n_components:
        raise CodecError(f"record carries {record.codes.size} codes, expected {n_components}")
    step = 2.0 * record.scale / (1 << record.depth)
    return -record.scale + (record.codes.astype(np.float64) + 0.5) * step


def error_bound(record: PositionRecord) -> float:
    """Guaranteed max-abs component error for an unclamped record."""
    return record.scale / (1 << record.depth)


def pack_codes(codes: np.ndarray, depth: int) -> bytes:
    """Big-endian bit order within each code, padded with zeros to a byte."""
    if depth == 0 or codes.size == 0:
        return b""
    shifts = np.arange(depth - 1, -1, -1, dtype=np.uint32)
    bits = ((codes.astype(np.uint32)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_codes(data: bytes, depth: int, count: int) -> np.ndarray:
    if depth == 0:
        return np.zeros(0, dtype=np.uint16)
    need = (depth * count + 7) // 8
    if len(data) != need:
        raise CodecError(f"packed codes are {len(data)} bytes, expected {need}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: depth * count]
    weights = (1 << np.arange(depth - 1, -1, -1)).astype(np.uint32)
    return (bits.reshape(count, depth).astype(np.uint32) @ weights).astype(np.uint16)


def theoretical_ratio(L: int, H: int, d: int, b: float, h_bar: float, overhead: float = 1.0) -> dict:
    """Bits/token of a per-vector quantizer against the sequential entropy floor.

    B_b = 2 L H d b.  Returns the fp16 and b-bit totals and the ratios
    B_fp16 / h_bar and B_b / (h_bar * overhead).
    """
    for name, v in (("L", L), ("H", H), ("d", d), ("b", b), ("h_bar", h_bar), ("overhead", overhead)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    per_bit = 2 * L * H * d
    b_fp16 = per_bit * 16
    b_b = per_bit * b
    return {
        "bits_fp16": b_fp16,
        "bits_b": b_b,
        "floor_bits": h_bar * overhead,
        "ratio_fp16": b_fp16 / h_bar,
        "ratio_b": b_b / (h_bar * overhead),
    }
