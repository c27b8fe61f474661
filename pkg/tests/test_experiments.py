import numpy as np
import pytest

from rramsnn import experiments as ex
from rramsnn.config import load_config
from rramsnn.seeding import make_rng
from test_config_cli import TINY


def tiny_cfg(**over):
    return load_config(None, {**TINY, **over})


def test_psd_slope_oracles():
    rng = make_rng(0, "psd")
    white = rng.standard_normal(2 ** 16)
    assert ex.psd_slope(white) == pytest.approx(0.0, abs=0.1)
    brown = np.cumsum(white)
    assert ex.psd_slope(brown) == pytest.approx(-2.0, abs=0.2)


def _square(v):
    return v * v


def test_parallel_map_preserves_order():
    assert ex.parallel_map(_square, list(range(7)), jobs=3) == [v * v for v in range(7)]


def test_ablation_is_identical_serial_and_parallel():
    cfg = tiny_cfg(ablation={"substrate_seeds": 2, "ann": False})
    a = ex.run_ablation(cfg, jobs=1)
    b = ex.run_ablation(cfg, jobs=2)
    assert a == b
    hashes = a["substrate_hashes"]
    # NHC and NC substrates are distinct draws
    assert hashes["NHC/seed0"] != hashes["NC/seed0"] and hashes["NHC/seed0"] != hashes["NHC/seed1"]


def test_ann_reference_learns_counts():
    ds = ex.build_dataset(tiny_cfg())
    acc = ex.ann_accuracy(ds, hidden=16, epochs=30, time_bins=ds.timesteps, lr=5e-3)
    assert acc > 1 / 3 + 0.2


def test_recovery_freezes_faulted_weights():
    cfg = tiny_cfg()
    run = ex.train_model(cfg, "NHC")
    rep = ex.recovery(cfg, run, 0.2, 2, read_seeds=[0])
    assert rep["frozen_weights"] > 0 and rep["frozen_weights_unchanged"]
    assert len(rep["epochs"]) == 2
    if rep["nothing_to_recover"]:
        assert rep["epochs_to_90pct"] == 0
    else:
        e1 = rep["epochs"][0]
        assert e1["recovery_fraction"] == pytest.approx((e1["accuracy"] - rep["before_accuracy"]) / rep["lost"])


def test_zero_ber_recovery_has_nothing_to_recover():
    cfg = tiny_cfg()
    rep = ex.recovery(cfg, ex.train_model(cfg, "NHC"), 0.0, 1, read_seeds=[0])
    assert rep["nothing_to_recover"] and rep["lost"] == 0 and rep["frozen_weights"] == 0
