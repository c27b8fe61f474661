"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Heavy artifacts (trained MNIST models, the synth_temporal ablation) are built
once per session.  Run with ``pytest tests/test_acceptance.py -v``.
"""
import copy
import filecmp
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from rramsnn import experiments as ex
from rramsnn.cli import main
from rramsnn.config import load_config
from rramsnn.datasets import data_dir
from rramsnn.heterogeneity import HeterogeneityModel
from rramsnn.seeding import make_rng
from rramsnn.snn import build_topology, init_weights
from rramsnn.training import check_gradients, save_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
FULL_MNIST = (data_dir() / "mnist.npz").exists()

pytestmark = pytest.mark.slow


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def with_overrides(cfg: dict, **sections) -> dict:
    out = copy.deepcopy(cfg)
    for sec, vals in sections.items():
        out[sec].update(vals)
    return out


# --------------------------------------------------------------------------- shared artifacts

@pytest.fixture(scope="session")
def mnist_cfg():
    # without the full set, fall back to the 8000 / 2000 split of the bundled subset
    over = None if FULL_MNIST else {"dataset": {"n_train": 8000, "n_test": 2000}}
    return load_config(CONFIGS / "mnist.yaml", over)


@pytest.fixture(scope="session")
def mnist_ds(mnist_cfg):
    return ex.build_dataset(mnist_cfg)


@pytest.fixture(scope="session")
def mnist_nhc(mnist_cfg, mnist_ds):
    return ex.train_model(mnist_cfg, "NHC", 0, mnist_ds)


@pytest.fixture(scope="session")
def mnist_hom(mnist_cfg, mnist_ds):
    return ex.train_model(mnist_cfg, "homogeneous", 0, mnist_ds)


@pytest.fixture(scope="session")
def mnist_ckpt(mnist_nhc, tmp_path_factory):
    p = tmp_path_factory.mktemp("mnist") / "nhc.npz"
    save_checkpoint(mnist_nhc, p)
    return p


@pytest.fixture(scope="session")
def st_cfg():
    return load_config(CONFIGS / "synth_temporal.yaml", {"ablation": {"ann": False}})


@pytest.fixture(scope="session")
def st_ablation(st_cfg):
    return ex.run_ablation(st_cfg)


@pytest.fixture(scope="session")
def st_nhc(st_cfg):
    return ex.train_model(st_cfg, "NHC", 0)


def row(ablation: dict, model: str, weights: str) -> dict:
    return next(r for r in ablation["rows"] if r["model"] == model and r["weights"] == weights)


# --------------------------------------------------------------------------- 1

def test_criterion_01_gradients_match_finite_differences(capsys):
    t0 = time.perf_counter()
    errs, sizes = [], []
    for k in range(20):
        rng = make_rng(k, "acceptance-gc")
        n_in, hidden, n_out = (int(v) for v in rng.integers(2, 5, 3))
        recurrent = bool(k % 2)
        T = int(rng.integers(4, 13))
        net = build_topology(n_in, n_out, (hidden,), recurrent, heterogeneity=HeterogeneityModel(seed=k),
                             reset="subtract" if k % 4 < 2 else "to-zero")
        w = init_weights(net, k, scale=3.0)
        sizes.append(sum(v.size for v in w.values()))
        x = (rng.random((2, T, n_in)) < 0.4).astype(float)
        errs.append(check_gradients(net, x, rng.integers(0, n_out, 2), w))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 1e-4 and max(sizes) <= 64 and dt < 60
    verdict(capsys, 1, ok, f"max relative error {max(errs):.2e} over 20 networks "
                           f"(<= {max(sizes)} params), {dt:.1f} s")


# --------------------------------------------------------------------------- 2

def test_criterion_02_noiseless_transfer_is_bit_exact(capsys, mnist_cfg, mnist_ds, mnist_nhc):
    t0 = time.perf_counter()
    cfg = with_overrides(mnist_cfg, device={"noiseless": True})
    prog = ex.transfer_run(cfg, mnist_nhc)
    x, y = mnist_ds.test[0][:500], mnist_ds.test[1][:500]
    net = mnist_nhc.topology
    sw = ex.software_accuracy(net, prog.dequantized(), x, y)
    hw = ex.crossbar_accuracy(net, prog, x, y, 0.0, 0, cfg["evaluation"]["read_policy"])
    dt = time.perf_counter() - t0
    verdict(capsys, 2, sw == hw and dt < 120,
            f"crossbar {hw:.4f} vs dequantized software {sw:.4f} on 500 samples, {dt:.1f} s")


# --------------------------------------------------------------------------- 3

def test_criterion_03_mnist_accuracy(capsys, mnist_cfg, mnist_ds, mnist_nhc):
    x, y = mnist_ds.test
    net = mnist_nhc.topology
    fl = ex.software_accuracy(net, mnist_nhc.weights, x, y)
    q = ex.software_accuracy(net, ex.quantized_weights(mnist_nhc.weights, ex.level_table(mnist_cfg),
                                                       mnist_cfg["transfer"]["scale_policy"]), x, y)
    lo_f, lo_q, label = (0.95, 0.935, "full MNIST") if FULL_MNIST else (0.92, 0.90, "10k subset (CI thresholds)")
    verdict(capsys, 3, fl >= lo_f and q >= lo_q,
            f"{label}, {len(y)} test samples: float {100 * fl:.2f}% (>= {100 * lo_f:.1f}), "
            f"3-bit {100 * q:.2f}% (>= {100 * lo_q:.1f})")


# --------------------------------------------------------------------------- 4

def test_criterion_04_heterogeneity_helps_temporal_task(capsys, st_ablation):
    nhc = np.array(row(st_ablation, "NHC", "float")["per_seed"])
    hom = np.array(row(st_ablation, "Hom", "float")["per_seed"])
    diff = 100 * (nhc.mean() - hom.mean())
    p = stats.ttest_rel(nhc, hom, alternative="greater").pvalue
    verdict(capsys, 4, diff >= 1.0 and p < 0.1,
            f"synth_temporal NHC {100 * nhc.mean():.2f}% vs homogeneous {100 * hom.mean():.2f}% "
            f"over {len(nhc)} substrate seeds: +{diff:.2f} pts, paired one-sided p = {p:.3g}")


# --------------------------------------------------------------------------- 5

def test_criterion_05_calibration_is_necessary(capsys, st_ablation, mnist_cfg, mnist_ds, mnist_nhc, mnist_hom):
    st_drop = 100 * (row(st_ablation, "NHC", "float")["mean"] - row(st_ablation, "NC", "float")["mean"])
    x, y = mnist_ds.test
    fresh = ex.topology(mnist_cfg, mnist_ds, True, mnist_cfg["ablation"]["nc_seed_offset"])
    nc = ex.software_accuracy(fresh, mnist_hom.weights, x, y)
    nhc = ex.software_accuracy(mnist_nhc.topology, mnist_nhc.weights, x, y)
    mnist_drop = 100 * (nhc - nc)
    verdict(capsys, 5, st_drop >= 5.0 and mnist_drop >= 2.0,
            f"non-calibrated loses {st_drop:.2f} pts on synth_temporal (>= 5), "
            f"{mnist_drop:.2f} pts on MNIST (>= 2)")


# --------------------------------------------------------------------------- 6

def _ordering(rows, times):
    means = [100 * np.mean([r["accuracy"] for r in rows if r["time"] == t]) for t in times]
    ordered = all(a >= b - 0.3 for a, b in zip(means, means[1:]))
    return means, ordered


def test_criterion_06_accuracy_degrades_in_time_order(capsys, mnist_cfg, mnist_ds, mnist_nhc, st_cfg, st_nhc):
    times = ["0s", "5s", "1h"]
    parts, ok = [], True
    for name, cfg, run in (("MNIST", mnist_cfg, mnist_nhc), ("synth_temporal", st_cfg, st_nhc)):
        cfg = with_overrides(cfg, evaluation={"times": times, "read_seeds": 5})
        ds = mnist_ds if name == "MNIST" else ex.build_dataset(cfg)
        x, y = ex.eval_split(cfg, ds)
        rows = ex.accuracy_over_time(cfg, run.topology, ex.transfer_run(cfg, run), x, y)
        means, ordered = _ordering(rows, times)
        ok &= ordered
        if name == "MNIST":
            ok &= means[0] - means[-1] <= 2.5
        parts.append(f"{name} " + " / ".join(f"{m:.2f}" for m in means))
    verdict(capsys, 6, ok, "acc at 0s / 5s / 1h over 5 read seeds: " + "; ".join(parts)
            + " (0.3 pt band, MNIST drop <= 2.5)")


# --------------------------------------------------------------------------- 7

def test_criterion_07_ber_resilience(capsys, mnist_cfg, mnist_ckpt):
    cfg = with_overrides(mnist_cfg, faults={"bers": [0.0, 1e-4, 1e-3, 1e-2, 1e-1], "fault_seeds": 10})
    curve = ex.ber_sweep(cfg, mnist_ckpt)["curve"]
    m = [100 * c["mean"] for c in curve]
    near = m[0] - m[2] <= 1.0
    mono = all(b <= a + 0.5 for a, b in zip(m, m[1:]))
    verdict(capsys, 7, near and mono,
            "MNIST over 10 fault seeds, BER 0/1e-4/1e-3/1e-2/1e-1: " + " / ".join(f"{v:.2f}" for v in m))


# --------------------------------------------------------------------------- 8

def test_criterion_08_fault_aware_retraining_recovers(capsys, mnist_cfg, mnist_ds, mnist_nhc, st_cfg, st_nhc):
    reps = {}
    for name, cfg, run, ds in (("MNIST", mnist_cfg, mnist_nhc, mnist_ds),
                               ("synth_temporal", st_cfg, st_nhc, None)):
        reps[name] = ex.recovery(cfg, run, 1e-2, 3, fault_seed=0, ds=ds)
    mn, st = reps["MNIST"], reps["synth_temporal"]

    def epochs(rep):
        return 99 if rep["epochs_to_90pct"] is None else rep["epochs_to_90pct"]

    final_gap = 100 * (mn["clean_accuracy"] - mn["epochs"][-1]["accuracy"])
    if mn["nothing_to_recover"]:
        ok = final_gap <= 1.0
        core = f"MNIST lost {100 * mn['lost']:.2f} pts (< 1 sample), retrained within {final_gap:.2f} pts of clean"
    else:
        ok = mn["epochs_to_90pct"] is not None and mn["epochs_to_90pct"] <= 3
        core = (f"MNIST lost {100 * mn['lost']:.2f} pts, recovery fraction by epoch "
                + ", ".join(f"{e['recovery_fraction']:.2f}" for e in mn["epochs"]))
    ok &= epochs(st) >= epochs(mn)
    verdict(capsys, 8, ok, f"{core}; epochs to 90%: MNIST {mn['epochs_to_90pct']}, "
                           f"synth_temporal {st['epochs_to_90pct']} (lost {100 * st['lost']:.2f} pts)")


# --------------------------------------------------------------------------- 9

def test_criterion_09_device_statistics(capsys, tmp_path):
    t0 = time.perf_counter()
    code = main(["--run-dir", str(tmp_path), "device-check"])
    dt = time.perf_counter() - t0
    import json
    rep = json.loads((tmp_path / "device_check.json").read_text())
    failed = [k for k, v in rep["checks"].items() if not v]
    verdict(capsys, 9, code == 0 and not failed and dt < 120,
            f"checks {sorted(rep['checks'])} failed={failed}, PSD slope {rep['psd_slope']:.3f}, {dt:.1f} s")


# --------------------------------------------------------------------------- 10

def test_criterion_10_energy_trend(capsys, mnist_cfg, mnist_ds, mnist_nhc):
    rep = ex.energy_report(mnist_cfg, mnist_nhc, mnist_ds)
    e = rep["energy"]
    frac = rep["row_activation"]["input"]["mean_active_fraction"]
    verdict(capsys, 10, e["e_total"] < e["e_baseline"] / 10 and frac < 0.2,
            f"SNN {e['e_total']:.3e} J vs baseline {e['e_baseline']:.3e} J per inference "
            f"(ratio {e['baseline_over_snn']:.1f}), mean active rows {100 * frac:.1f}%")


# --------------------------------------------------------------------------- 11

def test_criterion_11_jobs_do_not_change_outputs(capsys, tmp_path):
    cfg = tmp_path / "small.yaml"
    cfg.write_text("task: synth_temporal\n"
                   "dataset: {classes: 3, T: 20, channels: 6, jitter: 1.0, n_train: 60, n_test: 30}\n"
                   "network: {hidden: [8]}\n"
                   "training: {epochs: 2, learning_rate: 0.005, batch_size: 20}\n"
                   "evaluation: {read_seeds: 2}\n"
                   "faults: {bers: [0.0, 0.01], fault_seeds: 4}\n"
                   "ablation: {substrate_seeds: 2}\n")
    files = {"ablate": ["ablation.csv", "ablation.json"], "ber-sweep": ["ber_sweep.csv", "ber_sweep.json"]}
    same = []
    for cmd, names in files.items():
        dirs = []
        for jobs in (1, 4):
            d = tmp_path / f"{cmd}-{jobs}"
            assert main(["--config", str(cfg), "--jobs", str(jobs), "--run-dir", str(d), cmd]) == 0
            dirs.append(d)
        same += [filecmp.cmp(dirs[0] / n, dirs[1] / n, shallow=False) for n in names]
    verdict(capsys, 11, all(same), f"{sum(same)}/{len(same)} metric files byte-identical for --jobs 1 vs 4")
