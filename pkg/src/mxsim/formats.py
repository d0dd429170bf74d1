"""MX element formats and element-level encode/decode.

Every format is described by a :class:`FormatSpec` and backed by a lookup
table holding the real value of each code (without the shared scale).
Encoding works on that table, so it is exact and identical for scalars
and numpy arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "FormatName",
    "FormatSpec",
    "FORMATS",
    "get_format",
    "decode_element",
    "encode_element",
    "decode_codes",
    "encode_values",
    "split_element",
]


class FormatName(str, enum.Enum):
    INT8 = "INT8"
    FP8_E5M2 = "FP8_E5M2"
    FP8_E4M3 = "FP8_E4M3"
    FP6_E3M2 = "FP6_E3M2"
    FP6_E2M3 = "FP6_E2M3"
    FP4_E2M1 = "FP4_E2M1"


@dataclass(frozen=True)
class FormatSpec:
    """Static description of one MX element format.

    ``max_normal_exponent`` is the unbiased exponent of the largest finite
    value; the shared-scale computation subtracts it from the exponent of
    the block maximum. INT8 is modelled as ``exponent_bits=0`` with six
    fraction bits (value = code / 64).
    """

    name: FormatName
    exponent_bits: int
    mantissa_bits: int
    total_bits: int
    bias: int
    max_normal_exponent: int
    has_inf_nan: bool
    format_id: int

    @property
    def is_int(self) -> bool:
        return self.exponent_bits == 0

    @property
    def min_normal_exponent(self) -> int:
        return 1 - self.bias

    @cached_property
    def table(self) -> np.ndarray:
        """Real value of every code, NaN/Inf where the code is not finite."""
        return np.array([_decode_raw(self, c) for c in range(1 << self.total_bits)])

    @cached_property
    def _positive(self) -> tuple[np.ndarray, np.ndarray]:
        # finite non-negative values in ascending order, with their codes
        n = 1 << self.total_bits
        if self.is_int:
            codes = np.arange(0, 128)
        else:
            codes = np.arange(0, n // 2)
        vals = self.table[codes]
        keep = np.isfinite(vals)
        return vals[keep], codes[keep]

    @property
    def max_value(self) -> float:
        """Largest finite magnitude (2.0 for INT8, whose most negative code is -128/64)."""
        if self.is_int:
            return 2.0
        return float(self._positive[0][-1])

    @property
    def sign_mask(self) -> int:
        return 1 << (self.total_bits - 1)

    def is_finite_code(self, code: int) -> bool:
        return bool(np.isfinite(self.table[code]))


def _decode_raw(spec: FormatSpec, code: int) -> float:
    if spec.is_int:
        signed = code - 256 if code & 0x80 else code
        return signed / 64.0
    m = spec.mantissa_bits
    sign = -1.0 if code >> (spec.total_bits - 1) else 1.0
    exp_field = (code >> m) & ((1 << spec.exponent_bits) - 1)
    mant = code & ((1 << m) - 1)
    all_ones = (1 << spec.exponent_bits) - 1
    if spec.name is FormatName.FP8_E5M2 and exp_field == all_ones:
        return sign * float("inf") if mant == 0 else float("nan")
    if spec.name is FormatName.FP8_E4M3 and exp_field == all_ones and mant == (1 << m) - 1:
        return float("nan")
    if exp_field == 0:
        return sign * mant * 2.0 ** (spec.min_normal_exponent - m)
    return sign * ((1 << m) + mant) * 2.0 ** (exp_field - spec.bias - m)


FORMATS: dict[FormatName, FormatSpec] = {
    FormatName.INT8: FormatSpec(FormatName.INT8, 0, 6, 8, 0, 0, False, 0),
    FormatName.FP8_E5M2: FormatSpec(FormatName.FP8_E5M2, 5, 2, 8, 15, 15, True, 1),
    FormatName.FP8_E4M3: FormatSpec(FormatName.FP8_E4M3, 4, 3, 8, 7, 8, False, 2),
    FormatName.FP6_E3M2: FormatSpec(FormatName.FP6_E3M2, 3, 2, 6, 3, 4, False, 3),
    FormatName.FP6_E2M3: FormatSpec(FormatName.FP6_E2M3, 2, 3, 6, 1, 2, False, 4),
    FormatName.FP4_E2M1: FormatSpec(FormatName.FP4_E2M1, 2, 1, 4, 1, 2, False, 5),
}

_ALIASES = {
    "int8": FormatName.INT8,
    "mxint8": FormatName.INT8,
    "e5m2": FormatName.FP8_E5M2,
    "e4m3": FormatName.FP8_E4M3,
    "e3m2": FormatName.FP6_E3M2,
    "e2m3": FormatName.FP6_E2M3,
    "e2m1": FormatName.FP4_E2M1,
}


def get_format(name) -> FormatSpec:
    """Look up a format by enum, canonical name, format id or short alias.

    Accepts e.g. ``"fp8_e4m3"``, ``"MXFP8_E4M3"``, ``"e4m3"`` or ``2``.
    """
    if isinstance(name, FormatSpec):
        return name
    if isinstance(name, FormatName):
        return FORMATS[name]
    if isinstance(name, (int, np.integer)):
        for spec in FORMATS.values():
            if spec.format_id == int(name):
                return spec
        raise ValueError(f"unknown format id {name}")
    key = str(name).strip().lower().removeprefix("mx")
    if key in _ALIASES:
        return FORMATS[_ALIASES[key]]
    tail = key.split("_")[-1]
    if tail in _ALIASES:
        return FORMATS[_ALIASES[tail]]
    raise ValueError(f"unknown MX element format {name!r}")


def decode_element(spec: FormatSpec, code: int) -> float:
    """Value of one element code, shared scale not applied."""
    if not 0 <= code < (1 << spec.total_bits):
        raise ValueError(f"code {code:#x} does not fit in {spec.total_bits} bits")
    return float(spec.table[code])


def decode_codes(spec: FormatSpec, codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << spec.total_bits)):
        raise ValueError(f"codes do not fit in {spec.total_bits} bits")
    return spec.table[codes]


def encode_values(spec: FormatSpec, values, symmetric: bool = False) -> np.ndarray:
    """Round finite values to the nearest code, ties to even, saturating.

    Rounding to zero always yields the positive zero code. With
    ``symmetric`` INT8 saturates at -127/64 instead of -2, which the block
    quantizers use so that a decoded block never grows its own maximum.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    if spec.is_int:
        # two's complement i/64 over the full range -128..127; rint ties to even
        lo = -127 if symmetric else -128
        return np.clip(np.rint(np.clip(v, -4.0, 4.0) * 64.0), lo, 127).astype(np.int64) & 0xFF
    vals, codes = spec._positive
    mag = np.abs(v)
    hi = np.searchsorted(vals, mag, side="left")
    hi = np.minimum(hi, len(vals) - 1)
    lo = np.maximum(hi - 1, 0)
    mid = (vals[lo] + vals[hi]) / 2  # exact: few significant bits
    pick_hi = (mag > mid) | ((mag == mid) & (codes[hi] % 2 == 0))
    idx = np.where(mag >= vals[hi], hi, np.where(pick_hi, hi, lo))
    out = codes[idx].astype(np.int64)
    neg = (v < 0) & (out != 0)
    return np.where(neg, out | spec.sign_mask, out)


def encode_element(spec: FormatSpec, value: float) -> int:
    """Scalar version of :func:`encode_values`."""
    return int(encode_values(spec, np.array([value]))[0])


def split_element(spec: FormatSpec, code: int) -> tuple[int, int, int]:
    """Break a code into ``(sign, significand, effective_exponent)``.

    The value is ``sign * significand * 2**(effective_exponent - bias - m)``
    for FP formats. Subnormals get exponent 1 and no hidden bit. For INT8
    the significand is the magnitude of the two's complement integer and
    the exponent is 0.
    """
    if spec.is_int:
        signed = code - 256 if code & 0x80 else code
        return (-1 if signed < 0 else 1), abs(signed), 0
    m = spec.mantissa_bits
    sign = -1 if code >> (spec.total_bits - 1) else 1
    exp_field = (code >> m) & ((1 << spec.exponent_bits) - 1)
    mant = code & ((1 << m) - 1)
    if exp_field == 0:
        return sign, mant, 1
    return sign, (1 << m) | mant, exp_field
