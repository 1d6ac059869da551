"""Quantization, likelihood models, CDF tables and the range coder."""

from .coder import (
    CorruptStreamError,
    RangeDecoder,
    RangeEncoder,
    TruncatedStreamError,
    pack_chunk,
    range_decode,
    range_encode,
    unpack_chunk,
)
from .models import (
    LIKELIHOOD_FLOOR,
    FactorizedPrior,
    GaussianConditional,
    estimate_rate,
    gaussian_likelihood,
    quantize,
    round_half_away,
)
from .tables import PRECISION, TAIL_THRESHOLD, CdfTable, gaussian_table, quantize_pmf, scale_table, table_from_pmfs

__all__ = [
    "CdfTable",
    "CorruptStreamError",
    "FactorizedPrior",
    "GaussianConditional",
    "LIKELIHOOD_FLOOR",
    "PRECISION",
    "RangeDecoder",
    "RangeEncoder",
    "TAIL_THRESHOLD",
    "TruncatedStreamError",
    "estimate_rate",
    "gaussian_likelihood",
    "gaussian_table",
    "pack_chunk",
    "quantize",
    "quantize_pmf",
    "range_decode",
    "range_encode",
    "round_half_away",
    "scale_table",
    "table_from_pmfs",
    "unpack_chunk",
]
