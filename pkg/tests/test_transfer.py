import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rramsnn.errors import ConfigError
from rramsnn.rram import ConductanceLevelTable, inject_faults
from rramsnn.seeding import make_rng
from rramsnn.snn import CrossbarWeights, RealWeights, build_topology, forward, init_weights
from rramsnn.transfer import (ProgrammedNetwork, QuantizationScheme, dequantize, gain_for, level_maps,
                              program_array, program_network, quantize, reprogram_healthy, tensor_scale)

TABLE = ConductanceLevelTable.default()
SCHEME = QuantizationScheme.for_table(TABLE)


def test_uniform_scheme_levels():
    s = QuantizationScheme(bits=2)
    assert np.allclose(s.fractions(), [0, 1 / 3, 2 / 3, 1])
    lv, sg, scale = quantize(np.array([0.0, 0.2, -0.4, 0.9, -1.0]), s, scale=1.0)
    assert lv.tolist() == [0, 1, 1, 3, 3]
    assert sg.tolist() == [0, 1, -1, 1, -1]


def test_ties_round_away_from_zero():
    s = QuantizationScheme(bits=2)
    lv, _, _ = quantize(np.array([1 / 6, -0.5]), s, scale=1.0)
    assert lv.tolist() == [1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantization_error_is_bounded_by_half_gap(seed):
    w = make_rng(seed, "q").normal(size=200)
    lv, sg, scale = quantize(w, SCHEME)
    dq = dequantize(lv, sg, scale, SCHEME)
    m = SCHEME.fractions() * scale
    half_gap = np.diff(m).max() / 2
    inside = np.abs(w) <= scale
    assert np.all(np.abs(w - dq)[inside] <= half_gap + 1e-12)
    # clipped weights land on the top level with the right sign
    assert np.all(lv[~inside] == 7) and np.all(np.sign(dq[~inside]) == np.sign(w[~inside]))


def test_scale_policies():
    w = np.concatenate([np.linspace(-1, 1, 1000), [50.0]])
    assert tensor_scale(w, QuantizationScheme(scale_policy="max")) == 50.0
    assert tensor_scale(w, QuantizationScheme()) < 2.0
    assert tensor_scale(np.zeros(4), QuantizationScheme()) == 1.0
    with pytest.raises(ConfigError):
        QuantizationScheme(scale_policy="median")
    with pytest.raises(ConfigError):
        quantize(np.array([np.inf]), SCHEME)


def test_level_map_layout():
    lv = np.array([[3, 0], [5, 2]], np.int8)
    sg = np.array([[1, 0], [-1, 1]], np.int8)
    assert level_maps(lv, sg).tolist() == [[3, 0, 0, 0], [0, 5, 2, 0]]


def test_noiseless_crossbar_reads_dequantized_weights_exactly():
    w = make_rng(2, "w").normal(size=(20, 12))
    lv, sg, scale = quantize(w, SCHEME)
    quiet = TABLE.noiseless()
    arr = program_array(lv, sg, quiet, gain_for(scale, SCHEME), capacity=None)
    expected = dequantize(lv, sg, scale, SCHEME)
    for t in (0.0, 5.0, 3600.0):
        assert np.array_equal(arr.read_weights(t), expected)


def test_noiseless_network_matches_dequantized_software():
    net = build_topology(8, 3, (10,), True)
    w = init_weights(net, 1, scale=3.0)
    prog = program_network(w, TABLE.noiseless())
    x = (make_rng(0, "x").random((5, 15, 8)) < 0.3).astype(np.uint8)
    sw = forward(net, x, RealWeights(prog.dequantized()))
    hw = forward(net, x, CrossbarWeights(prog.arrays, 0.0, "per-sample"))
    assert np.array_equal(sw.logits, hw.logits)


def test_capacity_error_names_the_matrix():
    lv = np.zeros((64, 64), np.int8)
    with pytest.raises(ConfigError, match="W0"):
        program_array(lv, lv, TABLE, 1.0, capacity=4096, name="W0")


def test_large_matrix_is_tiled():
    prog = program_network({"W0": np.ones((100, 50))}, TABLE, tile_capacity=4096)
    assert prog.arrays["W0"].capacity == 3 * 4096


def test_programmed_network_roundtrip(tmp_path):
    net = build_topology(6, 2, (4,), True)
    prog = program_network(init_weights(net, 0), TABLE, seed=3)
    prog.arrays["W0"] = inject_faults(prog.arrays["W0"], 0.2, 1)
    prog.save(tmp_path / "a.npz", extra={"k": 1})
    back, extra = ProgrammedNetwork.load(tmp_path / "a.npz")
    assert extra == {"k": 1} and back.scheme == prog.scheme and back.scales == prog.scales
    for k in prog.arrays:
        assert np.array_equal(back.arrays[k].mean_conductance(1.0), prog.arrays[k].mean_conductance(1.0))
        assert np.array_equal(back.levels[k], prog.levels[k])


def test_reprogram_keeps_faulted_pairs():
    w = make_rng(4, "w").normal(size=(16, 16))
    lv, sg, scale = quantize(w, SCHEME)
    arr = inject_faults(program_array(lv, sg, TABLE, gain_for(scale, SCHEME), seed=1), 0.05, 2)
    new_lv, new_sg, _ = quantize(-w, SCHEME, scale)
    out = reprogram_healthy(arr, new_lv, new_sg, gain_for(scale, SCHEME), seed=9)
    bad = np.repeat((arr.fault[:, 0::2] != 0) | (arr.fault[:, 1::2] != 0), 2, axis=1)
    assert np.array_equal(out.level[bad], arr.level[bad])
    assert np.array_equal(out.g_programmed[bad], arr.g_programmed[bad])
    assert np.array_equal(out.level[~bad], level_maps(new_lv, new_sg)[~bad])
    assert np.array_equal(out.fault, arr.fault)
