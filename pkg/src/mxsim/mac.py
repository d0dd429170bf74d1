"""Precision-scalable MX MAC built on the reduction trees."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .blocks import BLOCK_SIZE, SCALE_NAN, InvalidBlockError, MxBlock, MxMatrix, quantize_values
from .formats import FORMATS, FormatName, FormatSpec, split_element
from .tree import (
    AccumulatorValue,
    ProductTerm,
    TreeConfig,
    ZERO_TERM,
    l1_reduce_fp4,
    tree_reduce,
)

__all__ = [
    "PrecisionMode",
    "MacState",
    "NonFiniteElementError",
    "SaturationError",
    "new_state",
    "mac_cycle",
    "mac_dot_block",
    "quantize_group",
    "mac_gemm",
    "mode_tree_config",
]


class NonFiniteElementError(ValueError):
    """An Inf/NaN element code reached the datapath."""

    def __init__(self, operand: str, position: int, code: int):
        super().__init__(f"non-finite element code {code:#x} in operand {operand} at position {position}")
        self.operand = operand
        self.position = position


class SaturationError(ArithmeticError):
    pass


class PrecisionMode(str, enum.Enum):
    MXINT8 = "MXINT8"
    MXFP8_E5M2 = "MXFP8_E5M2"
    MXFP8_E4M3 = "MXFP8_E4M3"
    MXFP6_E3M2 = "MXFP6_E3M2"
    MXFP6_E2M3 = "MXFP6_E2M3"
    MXFP4_E2M1 = "MXFP4_E2M1"

    @classmethod
    def parse(cls, name) -> "PrecisionMode":
        if isinstance(name, cls):
            return name
        if isinstance(name, FormatSpec):
            name = name.name
        if isinstance(name, FormatName):
            return cls(f"MX{name.value}")
        key = str(name).strip().upper()
        if not key.startswith("MX"):
            key = "MX" + key
        for m in cls:
            if key == m.value or m.value.endswith("_" + key[2:]):
                return m
        raise ValueError(f"unknown precision mode {name!r}")

    @property
    def format(self) -> FormatSpec:
        return FORMATS[FormatName(self.value[2:])]

    @property
    def products_per_cycle(self) -> int:
        return {"INT8": 1, "FP4_E2M1": 8}.get(self.value[2:], 4)

    @property
    def mode_class(self) -> str:
        """``"INT8"``, ``"FP8/6"`` or ``"FP4"``: the three datapath modes."""
        return {1: "INT8", 4: "FP8/6", 8: "FP4"}[self.products_per_cycle]


def mode_tree_config(mode: PrecisionMode, tree: TreeConfig, shared_a: int = 127, shared_b: int = 127) -> TreeConfig:
    """Fill in the product scaling of ``mode`` on top of ``tree``.

    Products are integer significand products whose exponent is the sum of
    the two effective biased exponents, so their LSB weight is
    ``2**(-2*bias - 2*m)`` for FP modes and ``2**-12`` for INT8. The term
    width is the product significand width: ``2*(m+1)`` bits for FP8/FP6,
    10 bits for the MXFP4 level-1 sum and 15 bits for INT8.
    """
    spec = mode.format
    if spec.is_int:
        scale, width = -12, 15
    elif mode.products_per_cycle == 8:
        scale, width = -2 * spec.bias - 2 * spec.mantissa_bits, 10
    else:
        scale, width = -2 * spec.bias - 2 * spec.mantissa_bits, 2 * (spec.mantissa_bits + 1)
    return replace(tree, shared_exponent_a=shared_a, shared_exponent_b=shared_b, term_scale=scale, term_width=width)


@dataclass(frozen=True)
class MacState:
    mode: PrecisionMode
    tree: TreeConfig
    accumulator: AccumulatorValue
    cycles: int = 0


def new_state(mode, tree: TreeConfig | None = None) -> MacState:
    tree = tree or TreeConfig()
    return MacState(PrecisionMode.parse(mode), tree, AccumulatorValue.zero_value(tree.mantissa_bits))


def _products(mode: PrecisionMode, a_elems: Sequence[int], b_elems: Sequence[int]) -> list[ProductTerm]:
    spec = mode.format
    n = mode.products_per_cycle
    if len(a_elems) != n or len(b_elems) != n:
        raise ValueError(f"{mode.value} consumes {n} element pairs per cycle")
    for name, elems in (("a", a_elems), ("b", b_elems)):
        for i, c in enumerate(elems):
            if not 0 <= c < (1 << spec.total_bits):
                raise ValueError(f"element code {c:#x} does not fit {spec.name.value}")
            if not spec.is_finite_code(c):
                raise NonFiniteElementError(name, i, c)
    prods = []
    for ca, cb in zip(a_elems, b_elems):
        sa, ma, ea = split_element(spec, ca)
        sb, mb, eb = split_element(spec, cb)
        prods.append(ProductTerm(sa * sb, ma * mb, ea + eb))
    if n == 1:
        return [prods[0], ZERO_TERM, ZERO_TERM, ZERO_TERM]
    if n == 8:
        return [l1_reduce_fp4(prods), ZERO_TERM, ZERO_TERM, ZERO_TERM]
    return prods


def mac_cycle(state: MacState, a_elems, b_elems, shared_a: int, shared_b: int) -> MacState:
    """One MAC cycle: multiply 1/4/8 element pairs and accumulate."""
    if SCALE_NAN in (shared_a, shared_b):
        raise InvalidBlockError("shared exponent code 255 is the reserved NaN scale")
    terms = _products(state.mode, list(a_elems), list(b_elems))
    cfg = mode_tree_config(state.mode, state.tree, shared_a, shared_b)
    acc = tree_reduce(terms, state.accumulator, cfg)
    return replace(state, accumulator=acc, cycles=state.cycles + 1)


def mac_dot_block(state: MacState, a_block: MxBlock, b_block: MxBlock) -> MacState:
    spec = state.mode.format
    if a_block.format != spec or b_block.format != spec:
        raise ValueError(f"blocks must be {spec.name.value} in {state.mode.value} mode")
    n = state.mode.products_per_cycle
    for start in range(0, BLOCK_SIZE, n):
        try:
            state = mac_cycle(state, a_block.elements[start:start + n], b_block.elements[start:start + n],
                              a_block.shared_exponent, b_block.shared_exponent)
        except NonFiniteElementError as err:
            raise NonFiniteElementError(err.operand, start + err.position,
                                        (a_block if err.operand == "a" else b_block).elements[start + err.position]) from None
    return state


def quantize_group(outputs: Sequence[AccumulatorValue], spec) -> tuple[MxBlock, MxBlock]:
    """Quantize an 8x8 group of MAC outputs with one shared exponent.

    The group is taken in row-major order; the first 32 values go to the
    first block. Both blocks carry the scale computed over all 64.
    """
    from .formats import get_format

    spec = get_format(spec)
    if len(outputs) != 64:
        raise ValueError(f"group quantization takes 64 outputs, got {len(outputs)}")
    if any(o.saturated for o in outputs):
        raise SaturationError("cannot quantize a group holding a saturated accumulator")
    vals = np.array([float(o) for o in outputs])
    code, elems = quantize_values(vals, spec)
    return (MxBlock(spec, code, tuple(int(c) for c in elems[:32])),
            MxBlock(spec, code, tuple(int(c) for c in elems[32:])))


def mac_gemm(a: MxMatrix, b: MxMatrix, mode, tree: TreeConfig | None = None) -> np.ndarray:
    """Reference MX GeMM: one MAC state per output, blocks accumulated in K order.

    Returns an object array of :class:`AccumulatorValue`. Slow; meant for
    small operands and as the yardstick for the batched engine.
    """
    mode = PrecisionMode.parse(mode)
    if a.axis != 1 or b.axis != 0:
        raise ValueError("left operand must be blocked along rows and right operand along columns")
    if a.cols != b.rows:
        raise ValueError(f"inner dimensions disagree: {a.cols} vs {b.rows}")
    if a.format != mode.format or b.format != mode.format:
        raise ValueError("operand formats do not match the precision mode")
    out = np.empty((a.rows, b.cols), dtype=object)
    for i in range(a.rows):
        for j in range(b.cols):
            st = new_state(mode, tree)
            for k in range(a.nblocks):
                st = mac_dot_block(st, a.block(i, k), b.block(k, j))
            out[i, j] = st.accumulator
    return out
