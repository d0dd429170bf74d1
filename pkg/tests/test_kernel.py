import numpy as np
import pytest

from mxsim.blocks import MxMatrix, quantize_matrix
from mxsim.kernel import AccBatch, batched_gemm, supports
from mxsim.mac import PrecisionMode, mac_gemm
from mxsim.tree import TreeConfig, Variant

FIELDS = ("negative", "exponent", "significand", "zero", "saturated")


def same(x: AccBatch, y: AccBatch) -> bool:
    return all(np.array_equal(getattr(x, f), getattr(y, f)) for f in FIELDS)


def random_codes(spec, shape, rng):
    finite = np.flatnonzero(np.isfinite(spec.table))
    return rng.choice(finite, size=shape).astype(np.int64)


@pytest.mark.parametrize("mode", list(PrecisionMode), ids=lambda m: m.value)
@pytest.mark.parametrize("variant", [Variant.FP32_ADDITION, Variant.HYBRID_ITER1, Variant.HYBRID_ITER2])
@pytest.mark.parametrize("m", [2, 7, 16, 23])
def test_matches_reference_on_wide_range_operands(mode, variant, m):
    rng = np.random.default_rng([m, len(variant.value), mode.products_per_cycle])
    spec = mode.format
    a = MxMatrix(spec, 3, 64, 1, random_codes(spec, (3, 64), rng), rng.integers(110, 145, (3, 2)))
    b = MxMatrix(spec, 64, 4, 0, random_codes(spec, (64, 4), rng), rng.integers(110, 145, (2, 4)))
    tree = TreeConfig(variant, m)
    assert same(batched_gemm(a, b, mode, tree), AccBatch.from_objects(mac_gemm(a, b, mode, tree), m))


def test_long_integer_delegates():
    assert not supports("long_integer")
    a = quantize_matrix(np.random.default_rng(1).normal(size=(2, 32)), "e2m1", 1)
    b = quantize_matrix(np.random.default_rng(2).normal(size=(32, 2)), "e2m1", 0)
    tree = TreeConfig(Variant.LONG_INTEGER, 12)
    out = batched_gemm(a, b, "MXFP4_E2M1", tree)
    assert same(out, AccBatch.from_objects(mac_gemm(a, b, "MXFP4_E2M1", tree), 12))


def test_to_float_and_objects_round_trip():
    rng = np.random.default_rng(3)
    a = quantize_matrix(rng.normal(size=(4, 32)), "e4m3", 1)
    b = quantize_matrix(rng.normal(size=(32, 5)), "e4m3", 0)
    out = batched_gemm(a, b, "MXFP8_E4M3", TreeConfig())
    objs = out.to_objects()
    assert np.array_equal(np.vectorize(float)(objs), out.to_float())
    assert same(AccBatch.from_objects(objs, out.mantissa_bits), out)


def test_operand_checks():
    a = quantize_matrix(np.ones((2, 32)), "e4m3", 1)
    with pytest.raises(ValueError):
        batched_gemm(a, a, "MXFP8_E4M3", TreeConfig())
    b = quantize_matrix(np.ones((32, 2)), "e5m2", 0)
    with pytest.raises(ValueError):
        batched_gemm(a, b, "MXFP8_E4M3", TreeConfig())
    bad = MxMatrix(a.format, 2, 32, 1, np.full((2, 32), 0x7F), np.full((2, 1), 127))
    ok = quantize_matrix(np.ones((32, 2)), "e4m3", 0)
    with pytest.raises(ValueError):
        batched_gemm(bad, ok, "MXFP8_E4M3", TreeConfig())
