"""Bit-accurate reduction trees for MX multiply-accumulate.

Three microarchitectures are modelled per invocation (one MAC cycle):

* ``FP32_ADDITION``: align four product terms to the largest exponent in a
  ``W = S + 2`` bit field, add them, normalize and round the product-sum
  to the accumulator format, then do a correctly rounded floating add.
* ``LONG_INTEGER``: place every term in a fixed-anchor wide integer, add
  losslessly and fold the accumulator in by early accumulation; one
  rounding at the end.
* ``HYBRID_ITER1`` / ``HYBRID_ITER2``: the ``FP32_ADDITION`` level-2 adder
  feeding early accumulation. Iteration 1 surrounds the product-sum with
  ``S``-bit extensions on both sides; iteration 2 muxes a single extension
  to the side the accumulator needs.

``S = M + 1`` is the accumulator significand width for ``M`` stored
mantissa bits. Bits shifted past the end of any window are OR-ed into the
least significant bit of the shifted operand (a jammed sticky bit), so
every adder works on plain integers and every normalizer rounds to
nearest-even from an integer.

All values are pure Python integers; the fast batched engine lives in
:mod:`mxsim.kernel` and is checked against this module.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

__all__ = [
    "EXP_MIN",
    "EXP_MAX",
    "LONG_INT_BITS",
    "Variant",
    "ProductTerm",
    "AccumulatorValue",
    "TreeConfig",
    "CostReport",
    "shift_jam",
    "round_to_acc",
    "fp_add",
    "l2_product_sum",
    "l1_reduce_fp4",
    "tree_fp32_addition",
    "tree_long_integer",
    "tree_hybrid",
    "tree_reduce",
    "cost_report",
]

# internal accumulator exponent range (signed 12-bit)
EXP_MIN = -2048
EXP_MAX = 2047

# fixed-anchor integer for the long-integer tree: 64 exponent positions,
# 10-bit significand, 2 carry bits for four terms
LONG_INT_BITS = 76

TERM_EXP_BITS = 6
TERM_SIG_BITS = 10
# INT8 products skip alignment and use a 15-bit magnitude
MAX_TERM_SIG_BITS = 15


class Variant(str, enum.Enum):
    FP32_ADDITION = "fp32_addition"
    LONG_INTEGER = "long_integer"
    HYBRID_ITER1 = "hybrid_iter1"
    HYBRID_ITER2 = "hybrid_iter2"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for v in cls:
            if key in (v.value, v.name.lower()):
                return v
        raise ValueError(f"unknown tree variant {name!r}")


@dataclass(frozen=True)
class ProductTerm:
    """One aligned product: ``sign * significand * 2**exponent`` in units of the
    mode's product LSB."""

    sign: int
    significand: int
    exponent: int

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if not 0 <= self.significand < (1 << MAX_TERM_SIG_BITS):
            raise ValueError(f"significand {self.significand} out of range")
        if not 0 <= self.exponent < (1 << TERM_EXP_BITS):
            raise ValueError(f"exponent {self.exponent} does not fit {TERM_EXP_BITS} bits")

    @property
    def value(self) -> int:
        return self.sign * (self.significand << self.exponent)


ZERO_TERM = ProductTerm(1, 0, 0)


@dataclass(frozen=True)
class AccumulatorValue:
    """Stored partial result: ``sign * 1.mantissa * 2**exponent``.

    ``mantissa`` holds ``mantissa_bits`` bits below an implied leading one.
    There are no subnormals; the exponent is a signed integer in
    ``[EXP_MIN, EXP_MAX]`` and leaving that range sets ``saturated``.
    """

    mantissa_bits: int
    sign: int = 1
    exponent: int = 0
    mantissa: int = 0
    zero: bool = True
    saturated: bool = False

    @classmethod
    def zero_value(cls, mantissa_bits: int) -> "AccumulatorValue":
        return cls(mantissa_bits)

    @classmethod
    def from_value(cls, value, mantissa_bits: int) -> "AccumulatorValue":
        """Round an exact value (int, float or Fraction) into the format."""
        q = Fraction(value)
        if q == 0:
            return cls(mantissa_bits)
        neg = q < 0
        q = abs(q)
        # scale to an integer with plenty of headroom, then round
        n, d = q.numerator, q.denominator
        shift = max(0, d.bit_length() + mantissa_bits + 4 - n.bit_length() + 1)
        scaled, rem = divmod(n << shift, d)
        mag = (scaled << 1) | (1 if rem else 0)  # jam the remainder
        return round_to_acc(neg, mag, -shift - 1, mantissa_bits)

    @property
    def significand(self) -> int:
        return 0 if self.zero else (1 << self.mantissa_bits) | self.mantissa

    @property
    def lsb_exponent(self) -> int:
        return self.exponent - self.mantissa_bits

    def to_fraction(self) -> Fraction:
        if self.zero:
            return Fraction(0)
        v = Fraction(self.significand) * Fraction(2) ** self.lsb_exponent
        return v if self.sign > 0 else -v

    def __float__(self) -> float:
        if self.zero:
            return 0.0
        try:
            return self.sign * math.ldexp(self.significand, self.lsb_exponent)
        except OverflowError:
            return self.sign * math.inf

    def ulp(self) -> Fraction:
        return Fraction(2) ** self.lsb_exponent


@dataclass(frozen=True)
class TreeConfig:
    variant: Variant = Variant.HYBRID_ITER2
    mantissa_bits: int = 16
    shared_exponent_a: int = 127
    shared_exponent_b: int = 127
    # exponent of the product LSB and bit width of a term significand; set
    # by the MAC from the precision mode
    term_scale: int = 0
    term_width: int = TERM_SIG_BITS

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not 2 <= self.mantissa_bits <= 23:
            raise ValueError(f"accumulator mantissa width {self.mantissa_bits} outside 2..23")
        for code in (self.shared_exponent_a, self.shared_exponent_b):
            if not 0 <= code <= 254:
                raise ValueError(f"shared exponent code {code} outside 0..254")
        if not 1 <= self.term_width <= MAX_TERM_SIG_BITS:
            raise ValueError("term_width out of range")

    @property
    def significand_bits(self) -> int:
        return self.mantissa_bits + 1

    @property
    def base_exponent(self) -> int:
        return self.term_scale + (self.shared_exponent_a - 127) + (self.shared_exponent_b - 127)


def shift_jam(x: int, d: int) -> int:
    """Shift a non-negative ``x`` right by ``d`` (left if negative), jamming
    any lost bits into the result LSB."""
    if d <= 0:
        return x << -d
    out = x >> d
    if x & ((1 << d) - 1):
        out |= 1
    return out


def _signed_jam(x: int, d: int) -> int:
    return shift_jam(x, d) if x >= 0 else -shift_jam(-x, d)


def _finish(negative: bool, exponent: int, mantissa: int, mantissa_bits: int) -> AccumulatorValue:
    sign = -1 if negative else 1
    if exponent > EXP_MAX or exponent < EXP_MIN:
        clamp = EXP_MAX if exponent > EXP_MAX else EXP_MIN
        return AccumulatorValue(mantissa_bits, sign, clamp, (1 << mantissa_bits) - 1, False, True)
    return AccumulatorValue(mantissa_bits, sign, exponent, mantissa, False, False)


def round_to_acc(negative: bool, magnitude: int, lsb: int, mantissa_bits: int) -> AccumulatorValue:
    """Normalize ``magnitude * 2**lsb`` and round to nearest-even at ``M+1`` bits."""
    if magnitude == 0:
        return AccumulatorValue(mantissa_bits)
    s = mantissa_bits + 1
    length = magnitude.bit_length()
    shift = length - s
    if shift > 0:
        kept = magnitude >> shift
        rem = magnitude & ((1 << shift) - 1)
        half = 1 << (shift - 1)
        if rem > half or (rem == half and kept & 1):
            kept += 1
            if kept >> s:
                kept >>= 1
                shift += 1
    else:
        kept = magnitude << -shift
    return _finish(negative, lsb + shift + mantissa_bits, kept - (1 << mantissa_bits), mantissa_bits)


def _round_signed(x: int, lsb: int, mantissa_bits: int) -> AccumulatorValue:
    return round_to_acc(x < 0, abs(x), lsb, mantissa_bits)


def fp_add(x: AccumulatorValue, y: AccumulatorValue) -> AccumulatorValue:
    """Correctly rounded sum of two accumulator values (one rounding)."""
    if x.saturated:
        return x
    if y.saturated:
        return y
    if x.zero:
        return y
    if y.zero:
        return x
    lsb = min(x.lsb_exponent, y.lsb_exponent)
    total = x.sign * (x.significand << (x.lsb_exponent - lsb)) + y.sign * (y.significand << (y.lsb_exponent - lsb))
    return _round_signed(total, lsb, x.mantissa_bits)


def l2_product_sum(terms: Sequence[ProductTerm], cfg: TreeConfig) -> tuple[int, int]:
    """Level-2 alignment and addition shared by the FP32 and hybrid trees.

    Returns the signed product-sum and the absolute exponent of its LSB.
    Each term's top bit (``term_width - 1``) sits at bit ``W - 1`` of the
    field when it has the largest exponent; smaller terms shift right.
    """
    w = cfg.significand_bits + 2
    live = [t for t in terms if t.significand]
    if not live:
        return 0, 0
    emax = max(t.exponent for t in live)
    lsb = emax + cfg.term_width - w
    ps = 0
    for t in live:
        ps += t.sign * shift_jam(t.significand, lsb - t.exponent)
    return ps, lsb + cfg.base_exponent


def l1_reduce_fp4(products: Sequence[ProductTerm]) -> ProductTerm:
    """Level-1 sum of eight FP4 products into one 10-bit term, losslessly.

    Products are aligned to the smallest exponent among them, which keeps
    the sum exact; the result is then shifted up towards the top of the
    10-bit field as far as the exponent allows.
    """
    if len(products) != 8:
        raise ValueError(f"MXFP4 level 1 takes 8 products, got {len(products)}")
    live = [p for p in products if p.significand]
    if not live:
        return ZERO_TERM
    for p in live:
        if p.significand >= 16 or p.exponent >= 8:
            raise ValueError("FP4 products carry a 4-bit significand and a 3-bit exponent")
    e0 = min(p.exponent for p in live)
    total = sum(p.sign * (p.significand << (p.exponent - e0)) for p in live)
    if total == 0:
        return ZERO_TERM
    mag = abs(total)
    if mag >= 1 << TERM_SIG_BITS:
        raise ValueError("exponent spread too wide for a lossless 10-bit level-1 result")
    up = min(e0, TERM_SIG_BITS - mag.bit_length())
    return ProductTerm(1 if total > 0 else -1, mag << up, e0 - up)


def _check(terms: Sequence[ProductTerm], cfg: TreeConfig, allowed: tuple[Variant, ...]) -> None:
    if cfg.variant not in allowed:
        raise ValueError(f"tree variant {cfg.variant.value} not handled here")
    if len(terms) != 4:
        raise ValueError(f"the level-2 adder takes 4 terms, got {len(terms)}")
    limit = 1 << cfg.term_width
    for t in terms:
        if t.significand >= limit:
            raise ValueError(f"term significand wider than {cfg.term_width} bits")


def tree_fp32_addition(terms: Sequence[ProductTerm], acc: AccumulatorValue, cfg: TreeConfig) -> AccumulatorValue:
    _check(terms, cfg, (Variant.FP32_ADDITION,))
    m = cfg.mantissa_bits
    ps, ps_lsb = l2_product_sum(terms, cfg)
    if acc.saturated or ps == 0:
        return acc
    partial = _round_signed(ps, ps_lsb, m)
    return fp_add(partial, acc)


def tree_long_integer(terms: Sequence[ProductTerm], acc: AccumulatorValue, cfg: TreeConfig) -> AccumulatorValue:
    _check(terms, cfg, (Variant.LONG_INTEGER,))
    m = cfg.mantissa_bits
    s = m + 1
    psx = 0
    for t in terms:
        psx += t.sign * (t.significand << t.exponent)
    base = cfg.base_exponent
    if acc.saturated or psx == 0:
        return acc
    if acc.zero:
        return _round_signed(psx, base, m)
    ext = s + 2  # low-side zero extension
    reattach = s  # room for accumulator bits shifted below the extension
    width = LONG_INT_BITS + ext + reattach
    lsb = base - ext - reattach
    ps_part = psx << (ext + reattach)
    a = acc.significand
    k = acc.lsb_exponent - lsb
    if k + s > width:
        # accumulator above the window: anchor on it, product-sum goes below
        d = k + s - width
        ps_part = _signed_jam(ps_part, d)
        a_part = a << (width - s)
        lsb += d
    elif k >= 0:
        a_part = a << k
    else:
        a_part = shift_jam(a, -k)
    return _round_signed(ps_part + acc.sign * a_part, lsb, m)


def _hybrid_iter1(ps: int, ps_lsb: int, acc: AccumulatorValue, cfg: TreeConfig) -> tuple[int, int]:
    s = cfg.significand_bits
    p = s + 4
    a = acc.significand
    k = acc.lsb_exponent - ps_lsb
    # window: [S-bit left extension][P-bit product-sum][S-bit right extension]
    if k > p:
        d = k - p
        ps_part = _signed_jam(ps, d) << s
        a_part = a << (p + s)
        lsb = ps_lsb + d - s
    elif k >= -s:
        ps_part = ps << s
        a_part = a << (k + s)
        lsb = ps_lsb - s
    else:
        ps_part = ps << s
        a_part = shift_jam(a, -(k + s))
        lsb = ps_lsb - s
    x = ps_part + acc.sign * a_part
    assert abs(x) < 1 << (3 * s + 5)
    return x, lsb


def _hybrid_iter2(ps: int, ps_lsb: int, acc: AccumulatorValue, cfg: TreeConfig) -> tuple[int, int]:
    s = cfg.significand_bits
    p = s + 4
    a = acc.significand
    k = acc.lsb_exponent - ps_lsb
    if k >= 0:
        # mux: extension on the high side, accumulator shifted left
        if k > p:
            d = k - p
            ps_part = _signed_jam(ps, d)
            a_part = a << p
            lsb = ps_lsb + d
        else:
            ps_part = ps
            a_part = a << k
            lsb = ps_lsb
    else:
        # mux: extension on the low side catches the shifted-out bits
        ps_part = ps << s
        lsb = ps_lsb - s
        a_part = a << (k + s) if k + s >= 0 else shift_jam(a, -(k + s))
    x = ps_part + acc.sign * a_part
    assert abs(x) < 1 << (2 * s + 5)
    return x, lsb


def tree_hybrid(terms: Sequence[ProductTerm], acc: AccumulatorValue, cfg: TreeConfig) -> AccumulatorValue:
    _check(terms, cfg, (Variant.HYBRID_ITER1, Variant.HYBRID_ITER2))
    m = cfg.mantissa_bits
    ps, ps_lsb = l2_product_sum(terms, cfg)
    if acc.saturated or ps == 0:
        return acc
    if acc.zero:
        return _round_signed(ps, ps_lsb, m)
    step = _hybrid_iter1 if cfg.variant is Variant.HYBRID_ITER1 else _hybrid_iter2
    x, lsb = step(ps, ps_lsb, acc, cfg)
    return _round_signed(x, lsb, m)


_DISPATCH = {
    Variant.FP32_ADDITION: tree_fp32_addition,
    Variant.LONG_INTEGER: tree_long_integer,
    Variant.HYBRID_ITER1: tree_hybrid,
    Variant.HYBRID_ITER2: tree_hybrid,
}


def tree_reduce(terms: Sequence[ProductTerm], acc: AccumulatorValue, cfg: TreeConfig) -> AccumulatorValue:
    if acc.mantissa_bits != cfg.mantissa_bits:
        raise ValueError("accumulator width does not match the tree configuration")
    return _DISPATCH[cfg.variant](terms, acc, cfg)


@dataclass(frozen=True)
class CostReport:
    """Structural datapath widths in bits.

    For ``LONG_INTEGER`` the level-2 and product-sum widths are the published
    widths of that design (8-bit significands), which are fixed except for
    the low-side extension; ``emulation_window`` gives the wider window the
    emulator actually uses.
    """

    variant: Variant
    mantissa_bits: int
    l2_extension: int
    l2_shifter: int
    l2_adder: int
    product_sum: int
    acc_alignment: int
    acc_adder: int
    normalizer_input: int
    mux_bits: int
    emulation_window: int

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["variant"] = self.variant.value
        return d


def cost_report(cfg: TreeConfig) -> CostReport:
    s = cfg.significand_bits
    w = s + 2
    p = s + 4
    v = cfg.variant
    if v is Variant.FP32_ADDITION:
        # second normalizer after the S-bit add with guard/round/sticky is
        # also S + 4 = P bits wide
        return CostReport(v, cfg.mantissa_bits, w, w, p, p, s + 3, s + 4, p, 0, p)
    if v is Variant.LONG_INTEGER:
        l2 = 67
        ps = l2 + 2 + (s + 2)
        return CostReport(v, cfg.mantissa_bits, 0, l2, l2, ps, ps, ps + 1, ps + s, 0,
                          LONG_INT_BITS + 2 * s + 2 + 1)
    if v is Variant.HYBRID_ITER1:
        return CostReport(v, cfg.mantissa_bits, w, w, p, p, p + s, p + s + 1, 3 * s + 5, 0, 3 * s + 5)
    return CostReport(v, cfg.mantissa_bits, w, w, p, p, p + s, 2 * s + 5, 2 * s + 5, p + s, 2 * s + 5)
