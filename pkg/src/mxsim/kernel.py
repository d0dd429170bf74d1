"""Batched MX GeMM engine compiled with numba.

Re-implements the ``FP32_ADDITION`` and hybrid trees of :mod:`mxsim.tree`
on int64 so whole matrices can be pushed through the MAC model. Every
window used here is at most ``2S + 5 <= 53`` bits wide. ``HYBRID_ITER1``
is computed with the iteration-2 window, which yields the same integer
value; ``LONG_INTEGER`` needs up to 128-bit windows and is delegated to
the reference implementation.

The floating add of the FP32 tree aligns the smaller operand into
``S + 3`` guard positions with a jammed sticky bit, which gives the
correctly rounded sum the reference computes with unbounded integers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .blocks import BLOCK_SIZE, MxMatrix
from .formats import split_element
from .mac import PrecisionMode, mac_gemm, mode_tree_config
from .tree import EXP_MAX, EXP_MIN, AccumulatorValue, TreeConfig, Variant

__all__ = ["AccBatch", "batched_gemm", "split_matrix", "supports"]

_VARIANT_CODE = {Variant.FP32_ADDITION: 0, Variant.HYBRID_ITER1: 2, Variant.HYBRID_ITER2: 3}


def supports(variant) -> bool:
    return Variant.parse(variant) in _VARIANT_CODE


@numba.njit(cache=True, inline="always")
def _bitlen(x):
    n = 0
    while x:
        x >>= 1
        n += 1
    return n


@numba.njit(cache=True, inline="always")
def _jam(x, d):
    # x >= 0
    if d <= 0:
        return x << (-d)
    if d >= 62:
        return 1 if x != 0 else 0
    out = x >> d
    if x & ((np.int64(1) << d) - 1):
        out |= 1
    return out


@numba.njit(cache=True, inline="always")
def _sjam(x, d):
    if x >= 0:
        return _jam(x, d)
    return -_jam(-x, d)


@numba.njit(cache=True)
def _round(x, lsb, m):
    """Returns (neg, exponent, significand, zero, saturated)."""
    if x == 0:
        return False, 0, np.int64(0), True, False
    neg = x < 0
    mag = -x if neg else x
    s = m + 1
    length = _bitlen(mag)
    shift = length - s
    if shift > 0:
        kept = mag >> shift
        rem = mag & ((np.int64(1) << shift) - 1)
        half = np.int64(1) << (shift - 1)
        if rem > half or (rem == half and (kept & 1)):
            kept += 1
            if kept >> s:
                kept >>= 1
                shift += 1
    else:
        kept = mag << (-shift)
    e = lsb + shift + m
    if e > EXP_MAX or e < EXP_MIN:
        clamp = EXP_MAX if e > EXP_MAX else EXP_MIN
        return neg, clamp, (np.int64(1) << s) - 1, False, True
    return neg, e, kept, False, False


@numba.njit(cache=True)
def _fp_add(n1, e1, s1, n2, e2, s2, m):
    s = m + 1
    if e1 < e2 or (e1 == e2 and s1 < s2):
        n1, e1, s1, n2, e2, s2 = n2, e2, s2, n1, e1, s1
    # operand 1 is the larger; both significands have S bits
    d = e1 - e2
    v1 = -s1 if n1 else s1
    if d <= s + 3:
        x = (v1 << d) + (-s2 if n2 else s2)
        lsb = e2 - m
    else:
        g = s + 3
        x = (v1 << g) + _sjam(-s2 if n2 else s2, d - g)
        lsb = e1 - m - g
    return _round(x, lsb, m)


@numba.njit(cache=True)
def _gemm(a_sig, a_exp, a_scale, b_sig, b_exp, b_scale, ppc, term_scale, term_width, variant, m,
          o_neg, o_exp, o_sig, o_zero, o_sat):
    rows = a_sig.shape[0]
    cols = b_sig.shape[1]
    nb = a_scale.shape[1]
    s = m + 1
    w = s + 2
    p = s + 4
    t_sig = np.zeros(4, dtype=np.int64)
    t_exp = np.zeros(4, dtype=np.int64)
    for i in range(rows):
        for j in range(cols):
            neg = False
            e = 0
            sig = np.int64(0)
            zero = True
            sat = False
            for blk in range(nb):
                base = term_scale + a_scale[i, blk] - 127 + b_scale[blk, j] - 127
                for c in range(BLOCK_SIZE // ppc):
                    k0 = blk * BLOCK_SIZE + c * ppc
                    nterms = 0
                    if ppc == 8:
                        e0 = 1 << 30
                        for q in range(8):
                            if a_sig[i, k0 + q] != 0 and b_sig[k0 + q, j] != 0:
                                pe = a_exp[i, k0 + q] + b_exp[k0 + q, j]
                                if pe < e0:
                                    e0 = pe
                        if e0 < (1 << 30):
                            total = np.int64(0)
                            for q in range(8):
                                pv = a_sig[i, k0 + q] * b_sig[k0 + q, j]
                                if pv != 0:
                                    total += pv << (a_exp[i, k0 + q] + b_exp[k0 + q, j] - e0)
                            if total != 0:
                                mag = -total if total < 0 else total
                                up = 10 - _bitlen(mag)
                                if e0 < up:
                                    up = e0
                                t_sig[0] = (mag << up) if total > 0 else -(mag << up)
                                t_exp[0] = e0 - up
                                nterms = 1
                    else:
                        for q in range(ppc):
                            pv = a_sig[i, k0 + q] * b_sig[k0 + q, j]
                            if pv != 0:
                                t_sig[nterms] = pv
                                t_exp[nterms] = a_exp[i, k0 + q] + b_exp[k0 + q, j]
                                nterms += 1
                    if nterms == 0 or sat:
                        continue
                    emax = t_exp[0]
                    for q in range(1, nterms):
                        if t_exp[q] > emax:
                            emax = t_exp[q]
                    lsb = emax + term_width - w
                    ps = np.int64(0)
                    for q in range(nterms):
                        ps += _sjam(t_sig[q], lsb - t_exp[q])
                    if ps == 0:
                        continue
                    ps_lsb = lsb + base
                    if zero:
                        neg, e, sig, zero, sat = _round(ps, ps_lsb, m)
                    elif variant == 0:
                        pn, pe, psg, pz, psat = _round(ps, ps_lsb, m)
                        if psat:
                            neg, e, sig, zero, sat = pn, pe, psg, pz, psat
                        else:
                            neg, e, sig, zero, sat = _fp_add(pn, pe, psg, neg, e, sig, m)
                    else:
                        k = (e - m) - ps_lsb
                        av = -sig if neg else sig
                        if k >= 0:
                            if k > p:
                                d = k - p
                                x = _sjam(ps, d) + (av << p)
                                wl = ps_lsb + d
                            else:
                                x = ps + (av << k)
                                wl = ps_lsb
                        else:
                            if k + s >= 0:
                                x = (ps << s) + (av << (k + s))
                            else:
                                x = (ps << s) + _sjam(av, -(k + s))
                            wl = ps_lsb - s
                        neg, e, sig, zero, sat = _round(x, wl, m)
            o_neg[i, j] = neg
            o_exp[i, j] = e
            o_sig[i, j] = sig
            o_zero[i, j] = zero
            o_sat[i, j] = sat


@dataclass
class AccBatch:
    """Accumulator values for a whole output matrix, as parallel arrays."""

    mantissa_bits: int
    negative: np.ndarray
    exponent: np.ndarray
    significand: np.ndarray
    zero: np.ndarray
    saturated: np.ndarray

    def to_float(self) -> np.ndarray:
        vals = np.ldexp(self.significand.astype(np.float64), (self.exponent - self.mantissa_bits).astype(np.int64))
        vals = np.where(self.negative, -vals, vals)
        return np.where(self.zero, 0.0, vals)

    def value(self, i: int, j: int) -> AccumulatorValue:
        m = self.mantissa_bits
        if self.zero[i, j]:
            return AccumulatorValue(m)
        return AccumulatorValue(m, -1 if self.negative[i, j] else 1, int(self.exponent[i, j]),
                                int(self.significand[i, j]) - (1 << m), False, bool(self.saturated[i, j]))

    def to_objects(self) -> np.ndarray:
        out = np.empty(self.zero.shape, dtype=object)
        for idx in np.ndindex(*self.zero.shape):
            out[idx] = self.value(*idx)
        return out

    @classmethod
    def from_objects(cls, values: np.ndarray, mantissa_bits: int) -> "AccBatch":
        neg = np.vectorize(lambda v: v.sign < 0, otypes=[bool])(values)
        exp = np.vectorize(lambda v: v.exponent, otypes=[np.int64])(values)
        sig = np.vectorize(lambda v: v.significand, otypes=[np.int64])(values)
        zero = np.vectorize(lambda v: v.zero, otypes=[bool])(values)
        sat = np.vectorize(lambda v: v.saturated, otypes=[bool])(values)
        neg = np.where(zero, False, neg)
        exp = np.where(zero, 0, exp)
        return cls(mantissa_bits, neg, exp, sig, zero, sat)


def _split_table(spec) -> tuple[np.ndarray, np.ndarray]:
    n = 1 << spec.total_bits
    sig = np.zeros(n, dtype=np.int64)
    exp = np.zeros(n, dtype=np.int64)
    for c in range(n):
        s, mag, e = split_element(spec, c)
        sig[c] = s * mag
        exp[c] = e
    return sig, exp


def split_matrix(mx: MxMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Signed significands and effective exponents of every element code."""
    if not np.all(np.isfinite(mx.format.table[mx.codes])):
        raise ValueError("matrix holds Inf/NaN element codes")
    sig, exp = _split_table(mx.format)
    return sig[mx.codes], exp[mx.codes]


def batched_gemm(a: MxMatrix, b: MxMatrix, mode, tree: TreeConfig) -> AccBatch:
    """MX GeMM through the MAC model for every output at once.

    Same accumulation order and bit-level results as :func:`mxsim.mac.mac_gemm`.
    """
    mode = PrecisionMode.parse(mode)
    if a.axis != 1 or b.axis != 0 or a.cols != b.rows:
        raise ValueError("expects a row-blocked left operand and column-blocked right operand with matching K")
    if a.format != mode.format or b.format != mode.format:
        raise ValueError("operand formats do not match the precision mode")
    if tree.variant not in _VARIANT_CODE:
        return AccBatch.from_objects(mac_gemm(a, b, mode, tree), tree.mantissa_bits)
    cfg = mode_tree_config(mode, tree)
    a_sig, a_exp = split_matrix(a)
    b_sig, b_exp = split_matrix(b)
    shape = (a.rows, b.cols)
    o_neg = np.zeros(shape, dtype=np.bool_)
    o_exp = np.zeros(shape, dtype=np.int64)
    o_sig = np.zeros(shape, dtype=np.int64)
    o_zero = np.zeros(shape, dtype=np.bool_)
    o_sat = np.zeros(shape, dtype=np.bool_)
    _gemm(a_sig, a_exp, a.scales.astype(np.int64), b_sig, b_exp, b.scales.astype(np.int64),
          mode.products_per_cycle, cfg.term_scale, cfg.term_width, _VARIANT_CODE[tree.variant],
          tree.mantissa_bits, o_neg, o_exp, o_sig, o_zero, o_sat)
    return AccBatch(tree.mantissa_bits, o_neg, o_exp, o_sig, o_zero, o_sat)
