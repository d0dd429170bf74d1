import csv
import io
import json

import numpy as np
import pytest

from mxsim.blocks import MxMatrix, quantize_values
from mxsim.kernel import AccBatch
from mxsim.mac import PrecisionMode, mac_gemm
from mxsim.npu import (
    LAUNCH_LATENCY,
    CsrError,
    CsrFile,
    Layer,
    LoopNest,
    StreamerConfig,
    WorkloadSpec,
    builtin_workloads,
    channel_activity,
    configure,
    layer_trace,
    load_workload,
    peak_throughput,
    run_functional,
    simulate_gemm,
    tile_cycles,
    trace_csv,
)
from mxsim.tree import TreeConfig, Variant

MODES = list(PrecisionMode)


def one_layer(M, K, N, mode="MXINT8", batch=1):
    return WorkloadSpec((Layer("l", M, K, N, mode),), batch=batch)


def test_tile_cycles_and_channels():
    assert [tile_cycles(m) for m in MODES] == [8, 2, 2, 2, 2, 1]
    assert [channel_activity(m) for m in MODES] == [1, 4, 4, 3, 3, 4]


@pytest.mark.parametrize("mode,gops", [("MXINT8", 64), ("MXFP8_E4M3", 256), ("MXFP6_E2M3", 256), ("MXFP4_E2M1", 512)])
def test_peak_throughput(mode, gops):
    assert peak_throughput(mode, 500) == gops


def test_peak_throughput_rejects_bad_frequency():
    with pytest.raises(ValueError):
        peak_throughput("MXINT8", 0)


def test_configure():
    csr, cyc = configure([(0, 2), (1, 4)])
    assert csr.mode is PrecisionMode.MXFP8_E4M3 and csr.csr1 == 4
    assert cyc == 2 + LAUNCH_LATENCY
    csr2, cyc = configure([(0, 5)], csr)
    assert csr2.mode is PrecisionMode.MXFP4_E2M1 and csr2.csr1 == 4 and cyc == 1 + LAUNCH_LATENCY


@pytest.mark.parametrize("writes", [[(0, 6)], [(3, 0)], [(1, 0)], [(2, 12)], [(0, -1)], [(1, 2 ** 32)]])
def test_configure_errors(writes):
    with pytest.raises(CsrError):
        configure(writes)


def test_csr_defaults_validate():
    CsrFile().validate()


def test_tiny_fp4_layer():
    rep = simulate_gemm(one_layer(8, 8, 8, "MXFP4_E2M1")).layers[0]
    assert rep.tiles == 1 and rep.compute_cycles == 1
    assert rep.total_cycles > rep.ideal_cycles
    assert 0 < rep.utilization < 1


def test_zero_dimension_layer_rejected():
    with pytest.raises(ValueError):
        Layer("x", 0, 8, 8, "MXINT8")


def test_padding_charged():
    rep = simulate_gemm(one_layer(9, 17, 1)).layers[0]
    assert rep.tiles == 2 * 3 * 1 and rep.ideal_cycles == 6 * 8


@pytest.mark.parametrize("mode", MODES)
def test_report_invariants(mode):
    rep = simulate_gemm(one_layer(64, 256, 64, mode))
    layer = rep.layers[0]
    assert layer.total_cycles >= layer.ideal_cycles
    assert 0 < layer.utilization <= 1
    assert layer.total_cycles == layer.config_cycles + layer.stream_cycles + layer.quant_cycles + layer.fill_drain_cycles


@pytest.mark.parametrize("mode", MODES)
def test_utilization_monotone_in_size(mode):
    prev = 0.0
    for d in (8, 16, 32, 64, 128, 256):
        u = simulate_gemm(one_layer(d, d, d, mode)).utilization
        assert u >= prev
        prev = u


def test_additivity():
    layers = (Layer("a", 32, 64, 16, "MXINT8"), Layer("b", 16, 128, 48, "MXFP6_E3M2"), Layer("c", 8, 8, 8, "MXFP4_E2M1"))
    whole = simulate_gemm(WorkloadSpec(layers))
    parts = [simulate_gemm(WorkloadSpec((l,))) for l in layers]
    assert whole.total_cycles == sum(p.total_cycles for p in parts)
    assert whole.ideal_cycles == sum(p.ideal_cycles for p in parts)


def test_batch_scales_rows():
    a = simulate_gemm(one_layer(16, 64, 16, batch=4)).layers[0]
    b = simulate_gemm(one_layer(64, 64, 16)).layers[0]
    assert a.total_cycles == b.total_cycles and a.M == 64


@pytest.mark.parametrize("mode", MODES)
def test_gating(mode):
    rep = simulate_gemm(one_layer(32, 32, 32, mode)).layers[0]
    active = channel_activity(mode)
    assert rep.active_channels == active
    assert all(c > 0 for c in rep.channel_busy_a[:active])
    assert all(c == 0 for c in rep.channel_busy_a[active:])
    assert rep.channel_busy_a == rep.channel_busy_b


@pytest.mark.parametrize("mode", MODES)
def test_extra_channels_do_not_change_cycles(mode):
    base = simulate_gemm(one_layer(32, 64, 32, mode), StreamerConfig(channels=4))
    more = simulate_gemm(one_layer(32, 64, 32, mode), StreamerConfig(channels=8))
    assert base.total_cycles == more.total_cycles


def test_starved_streamers_reported():
    rep = simulate_gemm(one_layer(64, 64, 64, "MXFP8_E4M3"), StreamerConfig(channels=1)).layers[0]
    assert rep.supply_cycles > rep.compute_cycles
    assert rep.utilization < 0.5


def test_matched_streamers_never_stall():
    for mode in MODES:
        assert StreamerConfig().tile_supply_cycles(mode) <= tile_cycles(mode)


def test_loop_nest_addresses():
    nest = LoopNest((2, 3), (1, 8), base=100)
    assert list(nest.addresses()) == [100, 101, 108, 109, 116, 117]
    assert len(nest) == 6
    with pytest.raises(ValueError):
        LoopNest((2,), (1, 2))
    with pytest.raises(ValueError):
        LoopNest((0,), (1,))


def test_trace_matches_totals():
    for mode in ("MXINT8", "MXFP4_E2M1"):
        layer = Layer("t", 200, 96, 72, mode)
        rep = simulate_gemm(WorkloadSpec((layer,))).layers[0]
        events = layer_trace(layer, max_groups=5)
        assert events[-1] == (rep.total_cycles, "core", "done")
        assert [e[0] for e in events] == sorted(e[0] for e in events)
        rows = list(csv.reader(io.StringIO(trace_csv(events))))
        assert rows[0] == ["cycle", "unit", "event"] and len(rows) == len(events) + 1


def test_report_serialization():
    rep = simulate_gemm(one_layer(16, 16, 16))
    d = json.loads(rep.to_json())
    assert d["total_cycles"] == rep.total_cycles and len(d["layers"]) == 1
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert int(rows[0]["total_cycles"]) == rep.total_cycles


def test_workload_round_trip(tmp_path):
    w = WorkloadSpec((Layer("a", 8, 16, 24, "MXFP6_E2M3"),), batch=2, freq_mhz=400, name="w")
    p = tmp_path / "w.json"
    p.write_text(json.dumps(w.to_dict()))
    assert load_workload(p) == w


def test_builtin_workloads_load():
    found = builtin_workloads()
    assert {"resnet18_inference", "vit_inference", "resnet18_training", "vit_training"} <= set(found)
    for path in found.values():
        assert load_workload(path).layers


def random_matrix(spec, rows, cols, axis, rng):
    finite = np.flatnonzero(np.isfinite(spec.table))
    # the reduction axis is stored padded to whole blocks
    pr, pc = (rows, -(-cols // 32) * 32) if axis == 1 else (-(-rows // 32) * 32, cols)
    codes = np.zeros((pr, pc), dtype=np.int64)
    codes[:rows, :cols] = rng.choice(finite, size=(rows, cols))
    shape = (pr, pc // 32) if axis == 1 else (pr // 32, pc)
    return MxMatrix(spec, rows, cols, axis, codes, rng.integers(115, 140, shape))


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.value)
def test_functional_matches_mac_unit(mode):
    rng = np.random.default_rng(len(mode.value))
    a = random_matrix(mode.format, 16, 16, 1, rng)
    b = random_matrix(mode.format, 16, 16, 0, rng)
    tree = TreeConfig(Variant.HYBRID_ITER2, 16)
    ref = AccBatch.from_objects(mac_gemm(a, b, mode, tree), 16)
    out, groups = run_functional(a, b, mode, tree, quantize_outputs=True)
    for f in ("negative", "exponent", "significand", "zero", "saturated"):
        assert np.array_equal(getattr(out, f), getattr(ref, f))
    assert len(groups) == 4
    vals = ref.to_float()
    scale, codes = quantize_values(vals[0:8, 8:16].ravel(), mode.format)
    assert groups[1][0] == scale and np.array_equal(groups[1][1], codes)


def test_functional_pads_ragged_shapes():
    rng = np.random.default_rng(9)
    mode = PrecisionMode.MXFP8_E4M3
    a = random_matrix(mode.format, 5, 40, 1, rng)
    b = random_matrix(mode.format, 40, 3, 0, rng)
    out = run_functional(a, b, mode)
    ref = AccBatch.from_objects(mac_gemm(a, b, mode, TreeConfig()), 16)
    assert out.significand.shape == (5, 3)
    assert np.array_equal(out.to_float(), ref.to_float())
