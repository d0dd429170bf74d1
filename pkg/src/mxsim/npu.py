"""Cycle-level behavioural model of an 8x8 MX tensor core fed by data streamers.

Timing model, per GeMM layer:

* configuration: one cycle per 32-bit CSR write plus a fixed launch latency;
* the layer is tiled into 8x8x8 tiles; an output group (8x8 outputs)
  accumulates ``ceil(K/8)`` tiles;
* every tile costs ``max(tile_cycles, supply_a, supply_b)`` cycles, where
  ``supply_x`` is the number of cycles the active streamer channels need
  to deliver one 8x8 operand tile;
* the SIMD quantization unit spends one cycle per output group;
* the array pipeline is filled and drained once per layer, since groups
  stream back to back.

Utilization is ideal compute cycles (tiles x tile_cycles) over total cycles.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .blocks import MxMatrix, quantize_values
from .kernel import AccBatch, batched_gemm
from .mac import PrecisionMode
from .tree import TreeConfig

__all__ = [
    "ARRAY_DIM",
    "MACS",
    "CHANNEL_WIDTH_BITS",
    "LAUNCH_LATENCY",
    "PIPELINE_FILL",
    "PIPELINE_DRAIN",
    "QUANT_CYCLES_PER_GROUP",
    "PRECISION_CODES",
    "CsrError",
    "CsrFile",
    "LoopNest",
    "StreamerConfig",
    "Layer",
    "WorkloadSpec",
    "LayerReport",
    "SimReport",
    "tile_cycles",
    "peak_throughput",
    "channel_activity",
    "configure",
    "simulate_gemm",
    "layer_trace",
    "trace_csv",
    "run_functional",
    "load_workload",
    "builtin_workloads",
]

ARRAY_DIM = 8
MACS = ARRAY_DIM * ARRAY_DIM
CHANNEL_WIDTH_BITS = 64
MAX_CHANNELS = 4
LAUNCH_LATENCY = 10
PIPELINE_FILL = 8
PIPELINE_DRAIN = 8
QUANT_CYCLES_PER_GROUP = 1

PRECISION_CODES = {
    0: PrecisionMode.MXINT8,
    1: PrecisionMode.MXFP8_E5M2,
    2: PrecisionMode.MXFP8_E4M3,
    3: PrecisionMode.MXFP6_E3M2,
    4: PrecisionMode.MXFP6_E2M3,
    5: PrecisionMode.MXFP4_E2M1,
}
_MODE_CODES = {m: c for c, m in PRECISION_CODES.items()}

_TILE_CYCLES = {"INT8": 8, "FP8/6": 2, "FP4": 1}
_OPS_PER_MAC = {"INT8": 2, "FP8/6": 8, "FP4": 16}
_CHANNELS = {
    PrecisionMode.MXINT8: 1,
    PrecisionMode.MXFP8_E5M2: 4,
    PrecisionMode.MXFP8_E4M3: 4,
    PrecisionMode.MXFP6_E3M2: 3,
    PrecisionMode.MXFP6_E2M3: 3,
    PrecisionMode.MXFP4_E2M1: 4,
}


class CsrError(ValueError):
    pass


def tile_cycles(mode) -> int:
    """Cycles for one 8x8 by 8x8 tile product."""
    return _TILE_CYCLES[PrecisionMode.parse(mode).mode_class]


def peak_throughput(mode, freq_mhz: float) -> float:
    """Peak GOPS of the 64-MAC array, counting multiplies and adds."""
    if freq_mhz <= 0:
        raise ValueError("frequency must be positive")
    return MACS * _OPS_PER_MAC[PrecisionMode.parse(mode).mode_class] * freq_mhz / 1000.0


def channel_activity(mode) -> int:
    """Streamer channels a precision mode keeps active."""
    return _CHANNELS[PrecisionMode.parse(mode)]


@dataclass(frozen=True)
class CsrFile:
    csr0: int = 0  # precision mode code
    csr1: int = 1  # accumulation count (K tiles per output)
    csr2: int = ARRAY_DIM  # tile row/column dimension

    @property
    def mode(self) -> PrecisionMode:
        return PRECISION_CODES[self.csr0]

    def validate(self) -> None:
        if self.csr0 not in PRECISION_CODES:
            raise CsrError(f"invalid precision code {self.csr0}")
        if self.csr1 < 1:
            raise CsrError("accumulation count must be at least 1")
        if self.csr2 < ARRAY_DIM or self.csr2 % ARRAY_DIM:
            raise CsrError("tile dimension must be a positive multiple of 8")


def configure(csr_writes: Sequence[tuple[int, int]], current: CsrFile | None = None) -> tuple[CsrFile, int]:
    """Apply CSR writes; returns the new register file and the cycles charged."""
    regs = asdict(current or CsrFile())
    for index, value in csr_writes:
        if index not in (0, 1, 2):
            raise CsrError(f"no CSR at index {index}")
        if not 0 <= value < 2 ** 32:
            raise CsrError("CSR values are 32-bit")
        regs[f"csr{index}"] = int(value)
    out = CsrFile(**regs)
    out.validate()
    return out, len(csr_writes) + LAUNCH_LATENCY


@dataclass(frozen=True)
class LoopNest:
    """Affine address pattern of a streamer AGU (innermost loop first)."""

    bounds: tuple[int, ...]
    strides: tuple[int, ...]
    base: int = 0

    def __post_init__(self):
        if len(self.bounds) != len(self.strides):
            raise ValueError("bounds and strides must have the same length")
        if any(b < 1 for b in self.bounds):
            raise ValueError("loop bounds must be positive")

    def addresses(self) -> Iterator[int]:
        for idx in np.ndindex(*reversed(self.bounds)):
            yield self.base + sum(i * s for i, s in zip(reversed(idx), self.strides))

    def __len__(self) -> int:
        return math.prod(self.bounds)


@dataclass(frozen=True)
class StreamerConfig:
    """Provisioned streamer channels per operand; gating keeps only what the mode needs."""

    channels: int = MAX_CHANNELS
    channel_width_bits: int = CHANNEL_WIDTH_BITS
    pattern_a: LoopNest | None = None
    pattern_b: LoopNest | None = None

    def __post_init__(self):
        if self.channels < 1 or self.channel_width_bits < 1:
            raise ValueError("streamers need at least one channel of positive width")

    def active(self, mode) -> int:
        return min(channel_activity(mode), self.channels)

    def tile_supply_cycles(self, mode) -> int:
        mode = PrecisionMode.parse(mode)
        bits = MACS * mode.format.total_bits
        return -(-bits // (self.active(mode) * self.channel_width_bits))


@dataclass(frozen=True)
class Layer:
    label: str
    M: int
    K: int
    N: int
    mode: PrecisionMode

    def __post_init__(self):
        object.__setattr__(self, "mode", PrecisionMode.parse(self.mode))
        if min(self.M, self.K, self.N) <= 0:
            raise ValueError(f"layer {self.label!r} has a non-positive dimension")


@dataclass(frozen=True)
class WorkloadSpec:
    layers: tuple[Layer, ...]
    batch: int = 1
    freq_mhz: float = 500.0
    name: str = ""

    @classmethod
    def from_dict(cls, data: dict, name: str = "") -> "WorkloadSpec":
        layers = tuple(Layer(str(d["label"]), int(d["M"]), int(d["K"]), int(d["N"]), d["mode"]) for d in data["layers"])
        return cls(layers, int(data.get("batch", 1)), float(data.get("freq_mhz", 500.0)), data.get("name", name))

    def to_dict(self) -> dict:
        return {"name": self.name, "batch": self.batch, "freq_mhz": self.freq_mhz,
                "layers": [{"label": l.label, "M": l.M, "K": l.K, "N": l.N, "mode": l.mode.value} for l in self.layers]}


def load_workload(path) -> WorkloadSpec:
    path = Path(path)
    return WorkloadSpec.from_dict(json.loads(path.read_text()), name=path.stem)


def builtin_workloads() -> dict[str, Path]:
    here = Path(__file__).parent / "workloads"
    return {p.stem: p for p in sorted(here.glob("*.json"))}


@dataclass
class LayerReport:
    label: str
    mode: str
    M: int
    K: int
    N: int
    tiles: int
    groups: int
    ideal_cycles: int
    compute_cycles: int
    supply_cycles: int
    stream_cycles: int
    quant_cycles: int
    fill_drain_cycles: int
    config_cycles: int
    body_cycles: int
    total_cycles: int
    utilization: float
    gops: float
    active_channels: int
    channel_busy_a: list[int] = field(default_factory=list)
    channel_busy_b: list[int] = field(default_factory=list)


@dataclass
class SimReport:
    workload: str
    freq_mhz: float
    layers: list[LayerReport]

    @property
    def total_cycles(self) -> int:
        return sum(l.total_cycles for l in self.layers)

    @property
    def ideal_cycles(self) -> int:
        return sum(l.ideal_cycles for l in self.layers)

    @property
    def utilization(self) -> float:
        return self.ideal_cycles / self.total_cycles if self.layers else 0.0

    @property
    def gops(self) -> float:
        ops = sum(2 * l.M * l.K * l.N for l in self.layers)
        return ops * self.freq_mhz / self.total_cycles / 1000.0 if self.layers else 0.0

    def to_dict(self) -> dict:
        return {"workload": self.workload, "freq_mhz": self.freq_mhz, "total_cycles": self.total_cycles,
                "ideal_cycles": self.ideal_cycles, "utilization": self.utilization, "gops": self.gops,
                "layers": [asdict(l) for l in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = [f for f in LayerReport.__dataclass_fields__ if not f.startswith("channel_busy")]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for l in self.layers:
            w.writerow([getattr(l, c) for c in cols])
        return buf.getvalue()


def _csr_writes(layer: Layer) -> list[tuple[int, int]]:
    return [(0, _MODE_CODES[layer.mode]), (1, -(-layer.K // ARRAY_DIM)), (2, ARRAY_DIM)]


def _simulate_layer(layer: Layer, streamers: StreamerConfig, freq_mhz: float, csr: CsrFile | None) -> tuple[LayerReport, CsrFile]:
    csr, config = configure(_csr_writes(layer), csr)
    mode = csr.mode
    tm, tn, tk = (-(-d // ARRAY_DIM) for d in (layer.M, layer.N, layer.K))
    groups = tm * tn
    tiles = groups * tk
    tc = tile_cycles(mode)
    supply = streamers.tile_supply_cycles(mode)
    per_tile = max(tc, supply)
    ideal = tiles * tc
    stream = tiles * per_tile
    quant = groups * QUANT_CYCLES_PER_GROUP
    fill = PIPELINE_FILL + PIPELINE_DRAIN
    body = stream + quant + fill
    total = config + body
    active = streamers.active(mode)
    busy = [tiles * supply if c < active else 0 for c in range(streamers.channels)]
    gops = 2 * layer.M * layer.K * layer.N * freq_mhz / total / 1000.0
    rep = LayerReport(layer.label, mode.value, layer.M, layer.K, layer.N, tiles, groups, ideal, ideal,
                      tiles * supply, stream, quant, fill, config, body, total, ideal / total, gops,
                      active, list(busy), list(busy))
    return rep, csr


def simulate_gemm(workload: WorkloadSpec, streamers: StreamerConfig | None = None,
                  freq_mhz: float | None = None) -> SimReport:
    """Run every layer in order, reconfiguring the CSRs before each one.

    ``M`` of every layer is multiplied by the workload batch factor.
    """
    streamers = streamers or StreamerConfig()
    freq = workload.freq_mhz if freq_mhz is None else freq_mhz
    if freq <= 0:
        raise ValueError("frequency must be positive")
    csr = None
    reports = []
    for layer in workload.layers:
        scaled = Layer(layer.label, layer.M * workload.batch, layer.K, layer.N, layer.mode)
        rep, csr = _simulate_layer(scaled, streamers, freq, csr)
        reports.append(rep)
    return SimReport(workload.name, freq, reports)


def layer_trace(layer: Layer, streamers: StreamerConfig | None = None, max_groups: int = 64) -> list[tuple[int, str, str]]:
    """Event trace ``(cycle, unit, event)`` of one layer.

    Output groups past ``max_groups`` are folded into a single event.
    Cycle numbers match the totals of :func:`simulate_gemm`.
    """
    streamers = streamers or StreamerConfig()
    writes = _csr_writes(layer)
    csr, _ = configure(writes)
    mode = csr.mode
    tm, tn, tk = (-(-d // ARRAY_DIM) for d in (layer.M, layer.N, layer.K))
    events = []
    cyc = 0
    for idx, value in writes:
        events.append((cyc, "csr", f"write csr{idx}={value}"))
        cyc += 1
    events.append((cyc, "csr", "launch"))
    cyc += LAUNCH_LATENCY
    active = streamers.active(mode)
    for c in range(streamers.channels):
        events.append((cyc, f"streamer.ch{c}", "active" if c < active else "gated"))
    events.append((cyc, "array", "fill"))
    cyc += PIPELINE_FILL
    per_tile = max(tile_cycles(mode), streamers.tile_supply_cycles(mode))
    groups = tm * tn
    for g in range(min(groups, max_groups)):
        events.append((cyc, "array", f"group {g} start"))
        cyc += tk * per_tile
        events.append((cyc, "quant", f"group {g}"))
        cyc += QUANT_CYCLES_PER_GROUP
    if groups > max_groups:
        events.append((cyc, "array", f"groups {max_groups}..{groups - 1}"))
        cyc += (groups - max_groups) * (tk * per_tile + QUANT_CYCLES_PER_GROUP)
    events.append((cyc, "array", "drain"))
    cyc += PIPELINE_DRAIN
    events.append((cyc, "core", "done"))
    return events


def trace_csv(events: list[tuple[int, str, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle", "unit", "event"])
    w.writerows(events)
    return buf.getvalue()


def _pad_rows(mx: MxMatrix, rows: int) -> MxMatrix:
    codes = np.zeros((rows, mx.codes.shape[1]), dtype=np.int64)
    scales = np.zeros((rows, mx.scales.shape[1]), dtype=np.int64)
    codes[:mx.rows] = mx.codes[:mx.rows]
    scales[:mx.rows] = mx.scales[:mx.rows]
    return MxMatrix(mx.format, rows, mx.cols, 1, codes, scales)


def _pad_cols(mx: MxMatrix, cols: int) -> MxMatrix:
    codes = np.zeros((mx.codes.shape[0], cols), dtype=np.int64)
    scales = np.zeros((mx.scales.shape[0], cols), dtype=np.int64)
    codes[:, :mx.cols] = mx.codes[:, :mx.cols]
    scales[:, :mx.cols] = mx.scales[:, :mx.cols]
    return MxMatrix(mx.format, mx.rows, cols, 0, codes, scales)


def run_functional(a: MxMatrix, b: MxMatrix, mode, tree: TreeConfig | None = None,
                   quantize_outputs: bool = False):
    """Compute a layer tile by tile on the array model.

    Rows and columns are padded to multiples of 8; each 8x8 output group
    is produced by the batched MAC engine and optionally passed through
    the SIMD quantizer. Returns an :class:`AccBatch` for the unpadded
    output and, with ``quantize_outputs``, a list of per-group
    ``(scale code, 64 element codes)``.
    """
    tree = tree or TreeConfig()
    mode = PrecisionMode.parse(mode)
    rows_p = -(-a.rows // ARRAY_DIM) * ARRAY_DIM
    cols_p = -(-b.cols // ARRAY_DIM) * ARRAY_DIM
    ap = _pad_rows(a, rows_p)
    bp = _pad_cols(b, cols_p)
    m = tree.mantissa_bits
    fields = {k: np.zeros((rows_p, cols_p), dtype=dt) for k, dt in
              (("negative", bool), ("exponent", np.int64), ("significand", np.int64), ("zero", bool), ("saturated", bool))}
    groups = []
    for gi in range(0, rows_p, ARRAY_DIM):
        a_tile = MxMatrix(a.format, ARRAY_DIM, a.cols, 1, ap.codes[gi:gi + ARRAY_DIM], ap.scales[gi:gi + ARRAY_DIM])
        for gj in range(0, cols_p, ARRAY_DIM):
            b_tile = MxMatrix(b.format, b.rows, ARRAY_DIM, 0, bp.codes[:, gj:gj + ARRAY_DIM], bp.scales[:, gj:gj + ARRAY_DIM])
            out = batched_gemm(a_tile, b_tile, mode, tree)
            for k, arr in fields.items():
                arr[gi:gi + ARRAY_DIM, gj:gj + ARRAY_DIM] = getattr(out, k)
            if quantize_outputs:
                if out.saturated.any():
                    from .mac import SaturationError

                    raise SaturationError(f"output group ({gi // 8}, {gj // 8}) saturated")
                groups.append(quantize_values(out.to_float().ravel(), mode.format))
    result = AccBatch(m, *(fields[k][:a.rows, :b.cols] for k in ("negative", "exponent", "significand", "zero", "saturated")))
    return (result, groups) if quantize_outputs else result
