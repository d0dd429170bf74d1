import numpy as np
import pytest

from mxsim.blocks import MxMatrix
from mxsim.errorlab import (
    CrossoverTable,
    Distribution,
    DistributionSpec,
    ErrorCurve,
    ExperimentSpec,
    critical_width_table,
    generate_matrix,
    quantize_output_groups,
    run_experiment,
)
from mxsim.formats import FORMATS
from mxsim.mac import quantize_group
from mxsim.blocks import decode_block
from mxsim.tree import AccumulatorValue, Variant


def spec(fmt="e4m3", n=64, dist="gaussian", seed=3, trials=2, **kw):
    return ExperimentSpec(fmt, n, DistributionSpec(Distribution(dist), seed=seed), trials=trials, **kw)


def test_generate_matrix_is_deterministic():
    s = spec()
    a1, d1 = generate_matrix(s, "A", 1)
    a2, d2 = generate_matrix(s, "A", 1)
    assert np.array_equal(a1.codes, a2.codes) and np.array_equal(d1, d2)
    b, _ = generate_matrix(s, "B", 1)
    assert a1.axis == 1 and b.axis == 0
    assert not np.array_equal(generate_matrix(s, "A", 2)[1], d1)


@pytest.mark.parametrize("fmt", [f.name.value for f in FORMATS.values()])
def test_uniform_operands_use_finite_codes(fmt):
    s = spec(fmt, dist="uniform")
    a, dec = generate_matrix(s, "A")
    assert np.all(np.isfinite(dec))
    assert a.scales.min() >= 127 - 32 and a.scales.max() <= 127 + 32


def test_run_experiment_is_deterministic():
    s = spec(n=32, trials=2)
    c1 = run_experiment(s, widths=[4, 9, 16])
    c2 = run_experiment(s, widths=[4, 9, 16])
    assert c1.to_csv() == c2.to_csv()


def test_error_curve_properties():
    c = run_experiment(spec(n=64, trials=3), widths=[2, 8, 23])
    assert len(set(c.quantization_error)) == 1
    assert c.addition_error[-1] * 10 <= c.addition_error[0]
    assert c.excluded_elements < 0.01 * c.total_elements
    assert c.trials_used == 3 and c.discarded_trials == 0
    header = c.to_csv().splitlines()[0].split(",")
    assert {"mantissa_bits", "addition_error", "quantization_error", "crossover"} <= set(header)


def test_crossover_definition():
    s = spec()
    c = ErrorCurve(s, [4, 5, 6], [0.3, 0.1, 0.01], [0, 0, 0], [0.05] * 3, 0.05, 1, 0, 0, 1)
    assert c.crossover == 6
    c = ErrorCurve(s, [4, 5], [0.3, 0.1], [0, 0], [0.05] * 2, 0.05, 1, 0, 0, 1)
    assert c.crossover is None


def test_stop_at_crossover_matches_full_sweep():
    s = spec(n=32, trials=2)
    full = run_experiment(s)
    early = run_experiment(s, stop_at_crossover=True)
    assert early.crossover == full.crossover
    assert early.widths[-1] == full.crossover


def test_long_integer_single_block_is_round_once():
    s = spec("e4m3", n=8, trials=1, variant=Variant.LONG_INTEGER)
    c = run_experiment(s, widths=[23])
    assert c.addition_error[0] <= 2.0 ** -24


def test_output_group_quantizer_matches_mac_group_quantizer():
    rng = np.random.default_rng(4)
    y = rng.normal(size=(8, 8)) * 1000
    for f in FORMATS.values():
        got = quantize_output_groups(y, f)
        b0, b1 = quantize_group([AccumulatorValue.from_value(float(v), 23) for v in y.ravel()], f)
        vals = [float(AccumulatorValue.from_value(float(v), 23)) for v in y.ravel()]
        assert np.allclose(vals, y.ravel(), rtol=2 ** -23)
        want = np.concatenate([decode_block(b0), decode_block(b1)]).reshape(8, 8)
        if np.array_equal(np.array(vals).reshape(8, 8), y):
            assert np.array_equal(got, want)


def test_output_group_quantizer_shape_check():
    with pytest.raises(ValueError):
        quantize_output_groups(np.ones((8, 9)), FORMATS[next(iter(FORMATS))])


def test_invalid_specs():
    with pytest.raises(ValueError):
        spec(n=30)
    with pytest.raises(ValueError):
        spec(mantissa_widths=(1, 2))


def test_critical_width_table_small():
    t = critical_width_table(["e2m1", "e4m3"], [16], ["gaussian"], seed=1, trials=1)
    assert isinstance(t, CrossoverTable)
    assert len(t.entries) == 2
    assert t.maximum == max(v for v in t.entries.values() if v is not None)
    assert t.to_csv().startswith("format,size,distribution,critical_width")
