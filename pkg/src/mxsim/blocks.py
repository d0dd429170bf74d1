"""MX blocks: 32 element codes sharing one E8M0 scale."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import FormatSpec, decode_codes, encode_values, get_format

__all__ = [
    "BLOCK_SIZE",
    "SCALE_BIAS",
    "SCALE_NAN",
    "InvalidBlockError",
    "MxBlock",
    "MxMatrix",
    "shared_exponent_code",
    "quantize_to_mx",
    "quantize_values",
    "decode_block",
    "quantize_matrix",
    "dequantize_matrix",
]

BLOCK_SIZE = 32
SCALE_BIAS = 127
SCALE_NAN = 255


class InvalidBlockError(ValueError):
    """Raised for blocks carrying the reserved NaN scale or bad codes."""


@dataclass(frozen=True)
class MxBlock:
    format: FormatSpec
    shared_exponent: int
    elements: tuple[int, ...]

    def __post_init__(self):
        if len(self.elements) != BLOCK_SIZE:
            raise InvalidBlockError(f"an MX block holds {BLOCK_SIZE} elements, got {len(self.elements)}")
        if not 0 <= self.shared_exponent <= 255:
            raise InvalidBlockError(f"shared exponent code {self.shared_exponent} is not 8-bit")
        limit = 1 << self.format.total_bits
        for c in self.elements:
            if not 0 <= c < limit:
                raise InvalidBlockError(f"element code {c:#x} does not fit {self.format.name.value}")

    @property
    def scale(self) -> float:
        return float(np.ldexp(1.0, self.shared_exponent - SCALE_BIAS))


def shared_exponent_code(values, spec: FormatSpec) -> int:
    """E8M0 code for a group: floor(log2 max|v|) - emax, biased and clamped."""
    amax = float(np.max(np.abs(np.asarray(values, dtype=np.float64))))
    if amax == 0.0:
        return 0
    _, e = np.frexp(amax)
    code = int(e) - 1 - spec.max_normal_exponent + SCALE_BIAS
    return min(max(code, 0), SCALE_NAN - 1)


def quantize_values(values, spec: FormatSpec) -> tuple[int, np.ndarray]:
    """Quantize a group of any size; returns (scale code, element codes)."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    code = shared_exponent_code(v, spec)
    return code, encode_values(spec, np.ldexp(v, SCALE_BIAS - code), symmetric=True)


def quantize_to_mx(values, spec) -> MxBlock:
    spec = get_format(spec)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (BLOCK_SIZE,):
        raise ValueError(f"expected {BLOCK_SIZE} values, got shape {v.shape}")
    code, elems = quantize_values(v, spec)
    return MxBlock(spec, code, tuple(int(c) for c in elems))


def decode_block(block: MxBlock) -> np.ndarray:
    if block.shared_exponent == SCALE_NAN:
        raise InvalidBlockError("shared exponent code 255 is the reserved NaN scale")
    vals = decode_codes(block.format, block.elements)
    return np.ldexp(vals, block.shared_exponent - SCALE_BIAS)


@dataclass
class MxMatrix:
    """A matrix stored as MX blocks along one axis.

    ``axis=1`` splits every row into blocks (the layout of a left GeMM
    operand); ``axis=0`` splits every column (the right operand). The
    blocked dimension is zero-padded to a multiple of 32.

    ``codes`` has the padded shape; ``scales`` has one entry per block,
    shaped ``(rows, nblocks)`` for ``axis=1`` and ``(nblocks, cols)`` for
    ``axis=0``.
    """

    format: FormatSpec
    rows: int
    cols: int
    axis: int
    codes: np.ndarray
    scales: np.ndarray

    def block(self, i: int, j: int) -> MxBlock:
        """Block ``j`` of row ``i`` (axis=1) or block ``i`` of column ``j`` (axis=0)."""
        if self.axis == 1:
            elems = self.codes[i, j * BLOCK_SIZE:(j + 1) * BLOCK_SIZE]
            scale = self.scales[i, j]
        else:
            elems = self.codes[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE, j]
            scale = self.scales[i, j]
        return MxBlock(self.format, int(scale), tuple(int(c) for c in elems))

    @property
    def nblocks(self) -> int:
        return self.scales.shape[1] if self.axis == 1 else self.scales.shape[0]


def _padded(n: int) -> int:
    return -(-n // BLOCK_SIZE) * BLOCK_SIZE


def quantize_matrix(values, spec, axis: int = 1) -> MxMatrix:
    spec = get_format(spec)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix contains non-finite values")
    rows, cols = x.shape
    xt = x if axis == 1 else x.T
    n = xt.shape[1]
    pad = np.zeros((xt.shape[0], _padded(n)))
    pad[:, :n] = xt
    blocks = pad.reshape(xt.shape[0], -1, BLOCK_SIZE)
    amax = np.max(np.abs(blocks), axis=2)
    _, e = np.frexp(amax)
    scales = np.clip(e.astype(np.int64) - 1 - spec.max_normal_exponent + SCALE_BIAS, 0, SCALE_NAN - 1)
    scales = np.where(amax == 0.0, 0, scales)
    scaled = np.ldexp(blocks, (SCALE_BIAS - scales)[:, :, None])
    codes = encode_values(spec, scaled, symmetric=True).reshape(xt.shape[0], -1)
    if axis == 0:
        codes, scales = codes.T.copy(), scales.T.copy()
    return MxMatrix(spec, rows, cols, axis, codes, scales)


def dequantize_matrix(mx: MxMatrix) -> np.ndarray:
    if np.any(mx.scales == SCALE_NAN):
        raise InvalidBlockError("matrix holds a block with the reserved NaN scale")
    vals = decode_codes(mx.format, mx.codes)
    if mx.axis == 1:
        exps = np.repeat(mx.scales, BLOCK_SIZE, axis=1)
    else:
        exps = np.repeat(mx.scales, BLOCK_SIZE, axis=0)
    out = np.ldexp(vals, exps - SCALE_BIAS)
    return out[:mx.rows, :mx.cols]
