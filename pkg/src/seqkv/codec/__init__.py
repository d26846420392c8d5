from .container import CompressedCache, ContainerError, compress, decompress, read_store, serialize
from .quant import (
    ADAPTIVE,
    MAX_DEPTH,
    UNIFORM,
    WATERFILL,
    CodecError,
    PositionRecord,
    QuantizerConfig,
    adaptive_depth,
    decode_residual,
    encode_residual,
    error_bound,
    theoretical_ratio,
    waterfill_depth,
    waterfill_rate,
)
