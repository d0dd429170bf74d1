import random
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from mxsim.blocks import InvalidBlockError, MxBlock, decode_block, quantize_matrix, quantize_to_mx
from mxsim.formats import decode_element, encode_element
from mxsim.mac import (
    NonFiniteElementError,
    PrecisionMode,
    SaturationError,
    mac_cycle,
    mac_dot_block,
    mac_gemm,
    mode_tree_config,
    new_state,
    quantize_group,
)
from mxsim.mac import _products
from mxsim.oracle import gemm_fp64
from mxsim.tree import AccumulatorValue, TreeConfig, Variant

from _oracles import floor_log2, rne

MODES = list(PrecisionMode)
FP_MODES = [m for m in MODES if not m.format.is_int]


def one_code(mode):
    return encode_element(mode.format, 1.0)


@pytest.mark.parametrize("mode", MODES)
def test_zero_operands_keep_zero(mode):
    n = mode.products_per_cycle
    st = mac_cycle(new_state(mode), [0] * n, [0] * n, 127, 127)
    assert st.accumulator.zero and st.cycles == 1


def test_int8_identity():
    st = mac_cycle(new_state("MXINT8"), [64], [64], 127, 127)
    assert st.accumulator.to_fraction() == 1


def test_fp4_eight_ones():
    one = one_code(PrecisionMode.MXFP4_E2M1)
    st = mac_cycle(new_state("MXFP4_E2M1"), [one] * 8, [one] * 8, 127, 127)
    assert st.accumulator.to_fraction() == 8


def test_products_per_cycle():
    assert [m.products_per_cycle for m in MODES] == [1, 4, 4, 4, 4, 8]
    with pytest.raises(ValueError):
        mac_cycle(new_state("MXFP8_E4M3"), [0] * 3, [0] * 3, 127, 127)


@pytest.mark.parametrize("mode", FP_MODES)
def test_single_product_identity(mode):
    spec = mode.format
    rng = random.Random(mode.value)
    n = mode.products_per_cycle
    finite = [c for c in range(1 << spec.total_bits) if np.isfinite(spec.table[c])]
    # exact while the S+2 bit level-2 field holds the whole product significand
    m_min = mode_tree_config(mode, TreeConfig()).term_width - 3
    for _ in range(300):
        ca, cb = rng.choice(finite), rng.choice(finite)
        sa, sb = rng.randint(100, 150), rng.randint(100, 150)
        m = rng.randint(m_min, 23)
        a = [ca] + [0] * (n - 1)
        b = [cb] + [0] * (n - 1)
        st = mac_cycle(new_state(mode, TreeConfig(Variant.HYBRID_ITER2, m)), a, b, sa, sb)
        exact = Fraction(decode_element(spec, ca)) * Fraction(decode_element(spec, cb)) * Fraction(2) ** (sa + sb - 254)
        assert st.accumulator.to_fraction() == rne(exact, m)


def test_nan_element_rejected_with_position():
    mode = PrecisionMode.MXFP8_E5M2
    a = MxBlock(mode.format, 127, (0,) * 9 + (0x7E,) + (0,) * 22)
    b = MxBlock(mode.format, 127, (0,) * 32)
    with pytest.raises(NonFiniteElementError) as err:
        mac_dot_block(new_state(mode), a, b)
    assert err.value.position == 9 and err.value.operand == "a"
    with pytest.raises(NonFiniteElementError):
        mac_cycle(new_state(mode), [0x7C, 0, 0, 0], [0] * 4, 127, 127)


def test_nan_scale_rejected():
    with pytest.raises(InvalidBlockError):
        mac_cycle(new_state("MXINT8"), [1], [1], 255, 127)


def test_orthogonal_one_hot_blocks():
    mode = PrecisionMode.MXFP8_E4M3
    one = one_code(mode)
    a = MxBlock(mode.format, 127, tuple(one if i == 3 else 0 for i in range(32)))
    b = MxBlock(mode.format, 127, tuple(one if i == 4 else 0 for i in range(32)))
    assert mac_dot_block(new_state(mode), a, b).accumulator.zero


@pytest.mark.parametrize("mode", MODES)
def test_all_ones_blocks(mode):
    one = one_code(mode)
    a = MxBlock(mode.format, 130, (one,) * 32)
    b = MxBlock(mode.format, 125, (one,) * 32)
    st = mac_dot_block(new_state(mode), a, b)
    assert st.accumulator.to_fraction() == 32 * Fraction(2) ** (3 - 2)
    assert st.cycles == 32 // mode.products_per_cycle


@pytest.mark.parametrize("mode", MODES)
def test_long_integer_block_round_once(mode):
    rng = np.random.default_rng(21)
    for _ in range(40):
        a = quantize_to_mx(rng.normal(size=32), mode.format)
        b = quantize_to_mx(rng.normal(size=32), mode.format)
        st = mac_dot_block(new_state(mode, TreeConfig(Variant.LONG_INTEGER, 23)), a, b)
        exact = sum(Fraction(x) * Fraction(y) for x, y in zip(decode_block(a), decode_block(b)))
        assert st.accumulator.to_fraction() == rne(exact, 23)


@pytest.mark.parametrize("mode", MODES)
def test_long_integer_exact_per_cycle(mode):
    # wide-range codes: the accumulator rounds after each cycle, once
    spec = mode.format
    rng = np.random.default_rng(22)
    finite = np.flatnonzero(np.isfinite(spec.table))
    n = mode.products_per_cycle
    for _ in range(20):
        a = MxBlock(spec, int(rng.integers(100, 150)), tuple(int(c) for c in rng.choice(finite, 32)))
        b = MxBlock(spec, int(rng.integers(100, 150)), tuple(int(c) for c in rng.choice(finite, 32)))
        st = mac_dot_block(new_state(mode, TreeConfig(Variant.LONG_INTEGER, 23)), a, b)
        da, db = decode_block(a), decode_block(b)
        acc = Fraction(0)
        for c in range(0, 32, n):
            acc = rne(acc + sum(Fraction(x) * Fraction(y) for x, y in zip(da[c:c + n], db[c:c + n])), 23)
        assert st.accumulator.to_fraction() == acc


def test_cross_variant_consistency():
    # exact when the level-2 field loses no bits; otherwise within 2 ULP at the
    # largest magnitude involved (per-term sticky jamming plus the final rounding)
    rng = np.random.default_rng(23)
    exact_cases = 0
    for mode in MODES:
        spec = mode.format
        n = mode.products_per_cycle
        cfg = mode_tree_config(mode, TreeConfig(Variant.LONG_INTEGER, 23))
        finite = np.flatnonzero(np.isfinite(spec.table))
        for _ in range(300):
            a = [int(c) for c in rng.choice(finite, n)]
            b = [int(c) for c in rng.choice(finite, n)]
            acc = AccumulatorValue.from_value(float(rng.normal()) * 2.0 ** int(rng.integers(-20, 20)), 23)
            outs = {}
            for v in Variant:
                st = replace(new_state(mode, TreeConfig(v, 23)), accumulator=acc)
                outs[v] = mac_cycle(st, a, b, 127, 127).accumulator.to_fraction()
            ref = outs[Variant.LONG_INTEGER]
            terms = [t for t in _products(mode, a, b) if t.significand]
            mags = [abs(Fraction(t.value)) * Fraction(2) ** cfg.base_exponent for t in terms]
            top = max(mags + [abs(acc.to_fraction()), abs(ref)])
            ulp = Fraction(2) ** (floor_log2(top) - 23)
            lossless = bool(terms) and all(
                t.exponent >= max(u.exponent for u in terms) + cfg.term_width - 26 for t in terms)
            for v in (Variant.HYBRID_ITER1, Variant.HYBRID_ITER2):
                if lossless:
                    assert outs[v] == ref
                assert abs(outs[v] - ref) <= 2 * ulp
            exact_cases += lossless
    assert exact_cases > 500


def test_determinism():
    mode = PrecisionMode.MXFP6_E3M2
    rng = np.random.default_rng(24)
    a = quantize_to_mx(rng.normal(size=32), mode.format)
    b = quantize_to_mx(rng.normal(size=32), mode.format)
    assert mac_dot_block(new_state(mode), a, b) == mac_dot_block(new_state(mode), a, b)


def test_quantize_group_examples():
    zeros = [AccumulatorValue(16)] * 64
    b0, b1 = quantize_group(zeros, "e4m3")
    assert b0.elements == (0,) * 32 and b1.elements == (0,) * 32
    big = [AccumulatorValue.from_value(1024, 16)] * 64
    b0, b1 = quantize_group(big, "e4m3")
    assert b0.shared_exponent == b1.shared_exponent == 129
    assert np.all(decode_block(b0) == 1024.0)
    vals = [AccumulatorValue.from_value(Fraction(1, 3) + k / 256, 16) for k in range(64)]
    vals[0] = AccumulatorValue.from_value(100, 16)
    b0, b1 = quantize_group(vals, "e2m1")
    assert b0.shared_exponent == 127 + 6 - 2 == b1.shared_exponent


def test_quantize_group_saturated():
    vals = [AccumulatorValue(16)] * 63 + [AccumulatorValue(16, 1, 2047, 0, False, True)]
    with pytest.raises(SaturationError):
        quantize_group(vals, "e4m3")


def test_gemm_integer_exact():
    rng = np.random.default_rng(25)
    x = rng.integers(-8, 8, (4, 40)).astype(float)
    y = rng.integers(-8, 8, (40, 3)).astype(float)
    a = quantize_matrix(x, "e4m3", axis=1)
    b = quantize_matrix(y, "e4m3", axis=0)
    out = mac_gemm(a, b, "MXFP8_E4M3", TreeConfig(Variant.LONG_INTEGER, 23))
    got = np.vectorize(float)(out)
    from mxsim.blocks import dequantize_matrix

    assert np.array_equal(got, gemm_fp64(dequantize_matrix(a), dequantize_matrix(b)))


def test_gemm_shape_errors():
    a = quantize_matrix(np.ones((2, 32)), "e4m3", axis=1)
    with pytest.raises(ValueError):
        mac_gemm(a, a, "MXFP8_E4M3")
    b = quantize_matrix(np.ones((32, 2)), "e4m3", axis=0)
    with pytest.raises(ValueError):
        mac_gemm(a, b, "MXINT8")


@pytest.mark.parametrize("name", ["MXFP8_E4M3", "fp8_e4m3", "e4m3", "mxfp8_e4m3"])
def test_mode_parse(name):
    assert PrecisionMode.parse(name) is PrecisionMode.MXFP8_E4M3
