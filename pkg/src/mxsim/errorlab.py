"""Accumulation-precision study: addition error against output quantization error.

For each accumulator mantissa width ``M`` the MX GeMM runs through the MAC
model and is compared with the FP64 product of the same quantized
operands (so input quantization cancels out). The reference result is
also quantized back to the element format in 8x8 groups; the critical
width is the smallest ``M`` at which that quantization error exceeds the
addition error.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .blocks import BLOCK_SIZE, SCALE_BIAS, MxMatrix, dequantize_matrix, quantize_matrix
from .formats import FormatSpec, decode_codes, encode_values, get_format
from .kernel import batched_gemm
from .mac import PrecisionMode
from .oracle import gemm_fp64
from .tree import TreeConfig, Variant

__all__ = [
    "Distribution",
    "DistributionSpec",
    "ExperimentSpec",
    "ErrorCurve",
    "CrossoverTable",
    "generate_matrix",
    "quantize_output_groups",
    "run_experiment",
    "critical_width_table",
    "NEAR_ZERO",
    "GAUSSIAN_SIGMA",
]

GAUSSIAN_SIGMA = 2.0 ** 32 / 6
NEAR_ZERO = 2.0 ** -100
GROUP = 8


class Distribution(str, enum.Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class DistributionSpec:
    kind: Distribution = Distribution.GAUSSIAN
    exponent_range: tuple[int, int] = (-32, 32)
    sigma: float = GAUSSIAN_SIGMA
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Distribution(str(getattr(self.kind, "value", self.kind)).lower()))


@dataclass(frozen=True)
class ExperimentSpec:
    format: FormatSpec
    matrix_size: int = 64
    distribution: DistributionSpec = field(default_factory=DistributionSpec)
    mantissa_widths: tuple[int, ...] = tuple(range(2, 24))
    variant: Variant = Variant.HYBRID_ITER2
    trials: int = 8

    def __post_init__(self):
        object.__setattr__(self, "format", get_format(self.format))
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "mantissa_widths", tuple(sorted(set(self.mantissa_widths))))
        if self.matrix_size % GROUP:
            raise ValueError("matrix size must be a multiple of 8")
        if any(not 2 <= m <= 23 for m in self.mantissa_widths):
            raise ValueError("mantissa widths must lie in 2..23")


@dataclass
class ErrorCurve:
    spec: ExperimentSpec
    widths: list[int]
    addition_error: list[float]
    addition_median: list[float]
    quantization_error: list[float]
    quantization_median: float
    trials_used: int
    discarded_trials: int
    excluded_elements: int
    total_elements: int

    @property
    def crossover(self) -> int | None:
        """Smallest width whose quantization error exceeds its addition error."""
        for m, add, q in zip(self.widths, self.addition_error, self.quantization_error):
            if q > add:
                return m
        return None

    def rows(self) -> list[dict]:
        s = self.spec
        out = []
        for m, add, amed, q in zip(self.widths, self.addition_error, self.addition_median, self.quantization_error):
            out.append({
                "format": s.format.name.value,
                "size": s.matrix_size,
                "distribution": s.distribution.kind.value,
                "variant": s.variant.value,
                "mantissa_bits": m,
                "addition_error": repr(add),
                "addition_median": repr(amed),
                "quantization_error": repr(q),
                "quantization_median": repr(self.quantization_median),
                "trials": self.trials_used,
                "discarded_trials": self.discarded_trials,
                "excluded_elements": self.excluded_elements,
                "crossover": self.crossover if self.crossover is not None else "",
            })
        return out

    def to_csv(self) -> str:
        return _csv(self.rows())


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _rng(seed: int, trial: int, which: str) -> np.random.Generator:
    return np.random.default_rng([seed & (2 ** 64 - 1), trial, 0 if which == "A" else 1])


def generate_matrix(spec: ExperimentSpec, which: str, trial: int = 0) -> tuple[MxMatrix, np.ndarray]:
    """Random operand ``A`` (row-blocked) or ``B`` (column-blocked) and its decoded FP64 mirror."""
    if which not in ("A", "B"):
        raise ValueError("which must be 'A' or 'B'")
    n = spec.matrix_size
    fmt = spec.format
    dist = spec.distribution
    rng = _rng(dist.seed, trial, which)
    axis = 1 if which == "A" else 0
    if dist.kind is Distribution.UNIFORM:
        finite = np.flatnonzero(np.isfinite(fmt.table))
        nb = -(-n // BLOCK_SIZE)
        codes = rng.choice(finite, size=(n, nb * BLOCK_SIZE)).astype(np.int64)
        lo, hi = dist.exponent_range
        scales = rng.integers(lo, hi + 1, size=(n, nb)) + SCALE_BIAS
        if axis == 0:
            codes, scales = codes.T.copy(), scales.T.copy()
        mx = MxMatrix(fmt, n, n, axis, codes, scales.astype(np.int64))
    else:
        mx = quantize_matrix(rng.normal(0.0, dist.sigma, size=(n, n)), fmt, axis=axis)
    return mx, dequantize_matrix(mx)


def quantize_output_groups(y: np.ndarray, spec: FormatSpec) -> np.ndarray:
    """Quantize a matrix in 8x8 groups (one shared exponent per group) and decode it."""
    rows, cols = y.shape
    if rows % GROUP or cols % GROUP:
        raise ValueError("output dimensions must be multiples of 8")
    tiles = y.reshape(rows // GROUP, GROUP, cols // GROUP, GROUP)
    amax = np.max(np.abs(tiles), axis=(1, 3), keepdims=True)
    _, e = np.frexp(amax)
    scales = np.clip(e.astype(np.int64) - 1 - spec.max_normal_exponent + SCALE_BIAS, 0, 254)
    scales = np.where(amax == 0.0, 0, scales)
    codes = encode_values(spec, np.ldexp(tiles, SCALE_BIAS - scales), symmetric=True)
    return np.ldexp(decode_codes(spec, codes), scales - SCALE_BIAS).reshape(rows, cols)


def run_experiment(spec: ExperimentSpec, widths: Sequence[int] | None = None, stop_at_crossover: bool = False) -> ErrorCurve:
    """Sweep accumulator widths for one (format, size, distribution) point.

    Relative errors of all kept elements from all trials are pooled and
    averaged in a fixed order. Elements whose reference magnitude is below
    ``NEAR_ZERO`` are excluded. A trial whose GeMM saturates at any width
    is discarded. With ``stop_at_crossover`` the sweep ends at the first
    width where quantization error exceeds addition error.
    """
    widths = list(spec.mantissa_widths if widths is None else sorted(set(widths)))
    mode = PrecisionMode.parse(spec.format)
    trials = []
    excluded = total = discarded = 0
    q_errs = []
    for t in range(spec.trials):
        a, a_dec = generate_matrix(spec, "A", t)
        b, b_dec = generate_matrix(spec, "B", t)
        y_ref = gemm_fp64(a_dec, b_dec)
        keep = np.abs(y_ref) >= NEAR_ZERO
        trials.append((a, b, y_ref, keep))
    used = list(range(len(trials)))
    done_widths = []
    add_mean, add_med = [], []
    per_width_errs: dict[int, list[np.ndarray]] = {}
    for m in widths:
        cfg = TreeConfig(spec.variant, m)
        errs = {}
        for t in list(used):
            a, b, y_ref, keep = trials[t]
            out = batched_gemm(a, b, mode, cfg)
            if out.saturated.any():
                used.remove(t)
                discarded += 1
                continue
            y_hw = out.to_float()
            errs[t] = np.abs(y_hw[keep] - y_ref[keep]) / np.abs(y_ref[keep])
        per_width_errs[m] = errs
        done_widths.append(m)
        if stop_at_crossover and used:
            pooled = np.concatenate([errs[t] for t in used])
            qp = np.concatenate([_quant_err(trials[t], spec.format) for t in used])
            if qp.mean() > pooled.mean():
                break
    for t in used:
        _, _, y_ref, keep = trials[t]
        excluded += int((~keep).sum())
        total += keep.size
        q_errs.append(_quant_err(trials[t], spec.format))
    if not used:
        nan = float("nan")
        return ErrorCurve(spec, done_widths, [nan] * len(done_widths), [nan] * len(done_widths),
                          [nan] * len(done_widths), nan, 0, discarded, 0, 0)
    q_all = np.concatenate(q_errs)
    q_mean = float(q_all.mean())
    for m in done_widths:
        pooled = np.concatenate([per_width_errs[m][t] for t in used])
        add_mean.append(float(pooled.mean()))
        add_med.append(float(np.median(pooled)))
    return ErrorCurve(spec, done_widths, add_mean, add_med, [q_mean] * len(done_widths),
                      float(np.median(q_all)), len(used), discarded, excluded, total)


def _quant_err(trial, spec: FormatSpec) -> np.ndarray:
    _, _, y_ref, keep = trial
    yq = quantize_output_groups(y_ref, spec)
    return np.abs(yq[keep] - y_ref[keep]) / np.abs(y_ref[keep])


@dataclass
class CrossoverTable:
    entries: dict[tuple[str, int, str], int | None]

    @property
    def maximum(self) -> int | None:
        vals = [v for v in self.entries.values() if v is not None]
        return max(vals) if vals else None

    def rows(self) -> list[dict]:
        return [{"format": f, "size": n, "distribution": d, "critical_width": "" if v is None else v}
                for (f, n, d), v in self.entries.items()]

    def to_csv(self) -> str:
        return _csv(self.rows())


def critical_width_table(formats: Iterable, sizes: Iterable[int], distributions: Iterable,
                         seed: int = 0, trials: int = 8, variant=Variant.HYBRID_ITER2) -> CrossoverTable:
    """Critical widths over a grid; each point stops sweeping at its crossover."""
    entries = {}
    for f in formats:
        spec_f = get_format(f)
        for n in sizes:
            for d in distributions:
                dist = DistributionSpec(Distribution(str(getattr(d, "value", d)).lower()), seed=seed)
                exp = ExperimentSpec(spec_f, n, dist, variant=variant, trials=trials)
                curve = run_experiment(exp, stop_at_crossover=True)
                entries[(spec_f.name.value, n, dist.kind.value)] = curve.crossover
    return CrossoverTable(entries)
