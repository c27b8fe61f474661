"""Experiment grid: calibration ablations, accuracy over time, BER sweeps, fault-aware retraining.

Every grid cell is an independent job keyed by its seeds, so results are
identical whether cells run serially or in a process pool.
"""
from __future__ import annotations

import functools
import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datasets as dsets
from .config import parse_duration
from .energy import EnergyModel, RunStats, estimate, row_activation_stats
from .errors import ConfigError
from .heterogeneity import HeterogeneityModel, load_empirical_table
from .rram import CrossbarArray, ConductanceLevelTable, inject_faults, load_level_table, program_cells, read_sequence
from .seeding import make_rng
from .snn import CrossbarWeights, NetworkTopology, RealWeights, build_topology, forward, predict
from .training import (Adam, TrainingConfig, TrainRun, cross_entropy, new_run, retrain_with_faults,
                       substrate_hash, train)
from .transfer import (ProgrammedNetwork, QuantizationScheme, dequantize, hash_seed, program_network, quantize,
                       reprogram_healthy)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- builders

def build_dataset(cfg: dict) -> dsets.EncodedDataset:
    d = cfg["dataset"]
    task = cfg["task"]
    if task == "mnist":
        params = {"path": d["path"], "n_train": d["n_train"], "n_test": d["n_test"], "T": d["T"], "dt": d["dt"],
                  "max_rate": d["max_rate"], "seed": d["seed"]}
        return _cached(dsets.load_mnist, "mnist", params)
    if task == "synth_temporal":
        params = {"classes": d["classes"], "T": d["T"], "C": d["channels"], "jitter": d["jitter"],
                  "seed": d["seed"], "n_train": d["n_train"] or 1000, "n_test": d["n_test"] or 500,
                  "spikes_per_channel": d["spikes_per_channel"], "dt": d["dt"]}
        return _cached(dsets.synth_temporal, "synth_temporal", params)
    if task == "ecg":
        if not d["path"]:
            raise ConfigError("task 'ecg' needs dataset.path pointing at a beat-window CSV export")
        return dsets.load_ecg(d["path"], d["classes"], threshold=d["threshold"], leads=d["leads"], dt=d["dt"],
                              seed=d["seed"])
    raise ConfigError(f"unknown task {task!r}")


@functools.lru_cache(maxsize=4)
def _cached_inner(name, key):
    builder, params = _BUILDERS[name], dict(key)
    return builder(**params)


_BUILDERS = {"mnist": dsets.load_mnist, "synth_temporal": dsets.synth_temporal}


def _cached(builder, name, params):
    key = tuple(sorted((k, v) for k, v in params.items()))
    return _cached_inner(name, key)


def heterogeneity_model(cfg: dict, substrate_seed: int) -> HeterogeneityModel:
    h = dict(cfg["heterogeneity"])
    table_csv = h.pop("empirical_table_csv")
    table = load_empirical_table(table_csv) if table_csv else None
    h["seed"] = int(h["seed"]) + int(substrate_seed)
    return HeterogeneityModel(empirical_table=table, **h)


def topology(cfg: dict, ds: dsets.EncodedDataset, heterogeneous: bool, substrate_seed: int = 0) -> NetworkTopology:
    n, h = cfg["network"], cfg["heterogeneity"]
    return build_topology(ds.channels, ds.n_classes, tuple(n["hidden"]), n["recurrent"],
                          heterogeneity=heterogeneity_model(cfg, substrate_seed) if heterogeneous else None,
                          dt=ds.dt, v_th=n["v_th"], reset=n["reset"], refractory_steps=n["refractory_steps"],
                          mean_tau_mem=h["mean_tau_mem"], mean_tau_syn=h["mean_tau_syn"], readout=n["readout"])


def training_config(cfg: dict, mode: str | None = None, seed: int | None = None) -> TrainingConfig:
    t = dict(cfg["training"])
    if mode is not None:
        t["mode"] = mode
    if seed is not None:
        t["seed"] = int(t["seed"]) + int(seed)
    return TrainingConfig(**t)


def level_table(cfg: dict) -> ConductanceLevelTable:
    d = dict(cfg["device"])
    noiseless = d.pop("noiseless")
    csv_path = d.pop("table_csv")
    table = load_level_table(csv_path, **d) if csv_path else ConductanceLevelTable.default(**d)
    return table.noiseless() if noiseless else table


def train_model(cfg: dict, mode: str, substrate_seed: int = 0, ds=None, progress=None) -> TrainRun:
    """Train one model; NHC runs on a heterogeneous substrate, the others on nominal taus."""
    ds = ds if ds is not None else build_dataset(cfg)
    net = topology(cfg, ds, heterogeneous=(mode == "NHC"), substrate_seed=substrate_seed)
    run = new_run(training_config(cfg, mode, substrate_seed), net)
    run.meta["substrate_seed"] = int(substrate_seed)
    train(run, ds, progress=progress)
    return run


# --------------------------------------------------------------------------- evaluation

def eval_split(cfg: dict, ds) -> tuple[np.ndarray, np.ndarray]:
    x, y = ds.test
    n = cfg["evaluation"]["n_test"]
    return x[:n], y[:n]


def software_accuracy(net: NetworkTopology, weights: dict, x, y, batch_size: int = 256) -> float:
    return float(np.mean(predict(net, x, RealWeights(weights), batch_size) == y))


def crossbar_accuracy(net: NetworkTopology, programmed: ProgrammedNetwork, x, y, t: float, read_seed: int,
                      policy: str = "per-sample", batch_size: int = 64, arrays: dict | None = None) -> float:
    """Accuracy with weights read from independent replicas of the programmed arrays."""
    if arrays is None:
        reps = programmed.replicas(read_seed)
    else:
        reps = {k: a.replica(read_seed=hash_seed(read_seed, k)) for k, a in arrays.items()}
    src = CrossbarWeights(reps, t, policy)
    return float(np.mean(predict(net, x, src, batch_size) == y))


def quantized_weights(weights: dict, table: ConductanceLevelTable, scale_policy: str) -> dict:
    scheme = QuantizationScheme.for_table(table, scale_policy=scale_policy)
    return {k: dequantize(*quantize(w, scheme), scheme=scheme) for k, w in weights.items()}


def transfer_run(cfg: dict, run: TrainRun) -> ProgrammedNetwork:
    tr = cfg["transfer"]
    return program_network(run.effective_weights(), level_table(cfg), seed=tr["program_seed"],
                           scale_policy=tr["scale_policy"], tile_capacity=tr["tile_capacity"])


def accuracy_over_time(cfg: dict, net: NetworkTopology, programmed: ProgrammedNetwork, x, y,
                       read_seeds=None) -> list[dict]:
    ev = cfg["evaluation"]
    seeds = range(ev["read_seeds"]) if read_seeds is None else read_seeds
    rows = []
    for label in ev["times"]:
        t = parse_duration(label)
        for r in seeds:
            acc = crossbar_accuracy(net, programmed, x, y, t, r, ev["read_policy"], ev["batch_size"])
            rows.append({"time": label, "t_seconds": t, "read_seed": int(r), "accuracy": acc})
    return rows


# --------------------------------------------------------------------------- parallel map

def parallel_map(fn, items: list, jobs: int = 1) -> list:
    """Map ``fn`` over ``items`` serially or in a process pool; output order follows ``items``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    import multiprocessing as mp
    with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- ANN reference

def _ann_features(x: np.ndarray, bins: int) -> np.ndarray:
    B, T, C = x.shape
    bins = max(1, min(bins, T))
    edges = np.linspace(0, T, bins + 1).astype(int)
    return np.concatenate([x[:, a:b].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1).astype(np.float32)


def ann_accuracy(ds, hidden: int = 128, epochs: int = 15, seed: int = 0, time_bins: int = 1, lr: float = 1e-3,
                 batch_size: int = 64) -> float:
    """Two-layer ReLU perceptron on time-binned spike counts (float weights)."""
    xtr, ytr = ds.train
    xte, yte = ds.test
    ftr, fte = _ann_features(xtr, time_bins), _ann_features(xte, time_bins)
    mu, sd = ftr.mean(0), ftr.std(0) + 1e-6
    ftr, fte = (ftr - mu) / sd, (fte - mu) / sd
    rng = make_rng(seed, "ann-init")
    n_in = ftr.shape[1]
    p = {"W1": rng.uniform(-1, 1, (n_in, hidden)).astype(np.float32) / np.sqrt(n_in),
         "b1": np.zeros(hidden, np.float32),
         "W2": rng.uniform(-1, 1, (hidden, ds.n_classes)).astype(np.float32) / np.sqrt(hidden),
         "b2": np.zeros(ds.n_classes, np.float32)}
    opt = Adam(lr)
    for ep in range(epochs):
        order = make_rng(seed, "ann-shuffle", ep).permutation(len(ftr))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            h = np.maximum(ftr[idx] @ p["W1"] + p["b1"], 0)
            _, g = cross_entropy((h @ p["W2"] + p["b2"]).astype(np.float64), ytr[idx])
            g = g.astype(np.float32)
            gh = (g @ p["W2"].T) * (h > 0)
            opt.step(p, {"W2": h.T @ g, "b2": g.sum(0), "W1": ftr[idx].T @ gh, "b1": gh.sum(0)})
    h = np.maximum(fte @ p["W1"] + p["b1"], 0)
    return float(np.mean((h @ p["W2"] + p["b2"]).argmax(1) == yte))


# --------------------------------------------------------------------------- ablation

def _ablation_cell(args) -> dict:
    cfg, mode, s = args
    ds = build_dataset(cfg)
    x, y = eval_split(cfg, ds)
    run = train_model(cfg, mode, s, ds)
    table = level_table(cfg)
    policy = cfg["transfer"]["scale_policy"]
    out = {}

    def grid(model, net, weights):
        res = {"float": software_accuracy(net, weights, x, y),
               "3bit": software_accuracy(net, quantized_weights(weights, table, policy), x, y)}
        tr = cfg["transfer"]
        prog = program_network(weights, table, seed=tr["program_seed"] + s, scale_policy=policy,
                               tile_capacity=tr["tile_capacity"])
        ev = cfg["evaluation"]
        for label in ev["times"]:
            res[f"rram@{label}"] = crossbar_accuracy(net, prog, x, y, parse_duration(label), s,
                                                     ev["read_policy"], ev["batch_size"])
        out[model] = res

    if mode == "NHC":
        grid("NHC", run.topology, run.weights)
        out["substrate_hash"] = {"NHC": substrate_hash(run.topology)}
    else:
        grid("Hom", run.topology, run.weights)
        fresh = topology(cfg, ds, True, s + cfg["ablation"]["nc_seed_offset"])
        grid("NC", fresh, run.weights)
        out["substrate_hash"] = {"Hom": substrate_hash(run.topology), "NC": substrate_hash(fresh)}
    out["seed"], out["mode"] = s, mode
    return out


def _ann_cell(args) -> dict:
    cfg, s = args
    ds = build_dataset(cfg)
    bins = 1 if cfg["task"] == "mnist" else ds.timesteps
    return {"seed": s, "ANN": {"float": ann_accuracy(ds, cfg["network"]["hidden"][0], cfg["training"]["epochs"],
                                                    s, bins, cfg["training"]["learning_rate"])}}


def run_ablation(cfg: dict, jobs: int = 1) -> dict:
    """Calibration ablation grid averaged over substrate seeds.

    NC means: trained on the nominal (homogeneous) substrate, evaluated on a
    freshly sampled heterogeneous substrate.
    """
    seeds = list(range(cfg["ablation"]["substrate_seeds"]))
    cells = [(cfg, m, s) for s in seeds for m in ("NHC", "homogeneous")]
    results = parallel_map(_ablation_cell, cells, jobs)
    if cfg["ablation"]["ann"]:
        results += parallel_map(_ann_cell, [(cfg, s) for s in seeds], jobs)
    per_seed: dict = {}
    hashes: dict = {}
    for r in results:
        for model, vals in r.items():
            if model in ("seed", "mode"):
                continue
            if model == "substrate_hash":
                for k, h in vals.items():
                    hashes[f"{k}/seed{r['seed']}"] = h
                continue
            for w, acc in vals.items():
                per_seed.setdefault((model, w), {})[r["seed"]] = acc
    order_models = ("ANN", "NC", "Hom", "NHC")
    weights_order = ["float", "3bit"] + [f"rram@{t}" for t in cfg["evaluation"]["times"]]
    rows = []
    for m in order_models:
        for w in weights_order:
            if (m, w) in per_seed:
                vals = [per_seed[(m, w)][s] for s in sorted(per_seed[(m, w)])]
                rows.append({"model": m, "weights": w, "mean": float(np.mean(vals)), "std": float(np.std(vals)),
                             "n_seeds": len(vals), "per_seed": vals})
    return {"task": cfg["task"], "rows": rows, "substrate_hashes": dict(sorted(hashes.items()))}


# --------------------------------------------------------------------------- BER sweep / recovery

def fault_arrays(programmed: ProgrammedNetwork, ber: float, fault_seed: int) -> dict:
    return {k: inject_faults(a, ber, make_rng(fault_seed, "fault-seed", k).integers(2**31))
            for k, a in programmed.arrays.items()}


def _ber_cell(args) -> list[dict]:
    cfg, ckpt_path, f = args
    from .training import load_checkpoint
    run, _ = load_checkpoint(ckpt_path)
    ds = build_dataset(cfg)
    x, y = eval_split(cfg, ds)
    programmed = transfer_run(cfg, run)
    ev = cfg["evaluation"]
    rows = []
    for ber in cfg["faults"]["bers"]:
        arrays = fault_arrays(programmed, float(ber), f)
        n_faults = int(sum((a.fault != 0).sum() for a in arrays.values()))
        acc = crossbar_accuracy(run.topology, programmed, x, y, 0.0, f, ev["read_policy"], ev["batch_size"],
                                arrays=arrays)
        rows.append({"ber": float(ber), "fault_seed": f, "faulted_cells": n_faults, "accuracy": acc})
    return rows


def ber_sweep(cfg: dict, ckpt_path, jobs: int = 1) -> dict:
    seeds = list(range(cfg["faults"]["fault_seeds"]))
    raw = [r for rows in parallel_map(_ber_cell, [(cfg, str(ckpt_path), f) for f in seeds], jobs) for r in rows]
    curve = []
    for ber in cfg["faults"]["bers"]:
        accs = [r["accuracy"] for r in raw if r["ber"] == float(ber)]
        curve.append({"ber": float(ber), "mean": float(np.mean(accs)), "std": float(np.std(accs)), "n": len(accs)})
    return {"task": cfg["task"], "curve": curve, "raw": raw}


def frozen_from_faults(programmed: ProgrammedNetwork, arrays: dict) -> tuple[dict, dict]:
    """Masks of logical weights touching a faulted cell and their effective values at t = 0."""
    masks, values = {}, {}
    for k, a in arrays.items():
        bad = a.fault != 0
        masks[k] = bad[:, 0::2] | bad[:, 1::2]
        values[k] = a.effective_weights(a.mean_conductance(0.0))
    return masks, values


def recovery(cfg: dict, run: TrainRun, ber: float, epochs: int, fault_seed: int = 0, ds=None,
             read_seeds=None) -> dict:
    """Accuracy before fault-aware retraining, after each retraining epoch, and the recovered fraction."""
    ds = ds if ds is not None else build_dataset(cfg)
    x, y = eval_split(cfg, ds)
    ev = cfg["evaluation"]
    seeds = list(range(ev["read_seeds"])) if read_seeds is None else list(read_seeds)
    programmed = transfer_run(cfg, run)
    arrays = fault_arrays(programmed, ber, fault_seed)
    net = run.topology

    def acc(arrs):
        return float(np.mean([crossbar_accuracy(net, programmed, x, y, 0.0, r, ev["read_policy"], ev["batch_size"],
                                                arrays=arrs) for r in seeds]))

    clean = acc(programmed.arrays)
    before = acc(arrays)
    lost = clean - before
    masks, values = frozen_from_faults(programmed, arrays)
    report = {"task": cfg["task"], "ber": float(ber), "fault_seed": fault_seed, "clean_accuracy": clean,
              "before_accuracy": before, "lost": lost,
              "frozen_weights": int(sum(m.sum() for m in masks.values())), "epochs": []}
    nothing = lost * len(y) < 1.0
    report["nothing_to_recover"] = bool(nothing)
    current = run
    for ep in range(1, epochs + 1):
        current = retrain_with_faults(current, ds, masks, values, epochs=1)
        new_arrays = {}
        for k, a in arrays.items():
            lv, sg, _ = quantize(current.effective_weights()[k], programmed.scheme, scale=programmed.scales[k])
            new_arrays[k] = reprogram_healthy(a, lv, sg, a.gain, seed=cfg["transfer"]["program_seed"] + ep)
        after = acc(new_arrays)
        frac = None if nothing else (after - before) / lost
        report["epochs"].append({"epoch": ep, "accuracy": after, "recovery_fraction": frac})
    fracs = [e["recovery_fraction"] for e in report["epochs"]]
    hit = [e["epoch"] for e in report["epochs"] if e["recovery_fraction"] is not None and e["recovery_fraction"] >= 0.9]
    report["epochs_to_90pct"] = 0 if nothing else (hit[0] if hit else None)
    report["final_recovery_fraction"] = fracs[-1] if fracs else None
    frozen_ok = all(np.array_equal(current.effective_weights()[k][masks[k]], values[k][masks[k]]) for k in masks)
    report["frozen_weights_unchanged"] = bool(frozen_ok)
    return report


# --------------------------------------------------------------------------- energy

def energy_report(cfg: dict, run: TrainRun, ds=None) -> dict:
    ds = ds if ds is not None else build_dataset(cfg)
    x, y = eval_split(cfg, ds)
    e = dict(cfg["energy"])
    window = e.pop("window")
    model = EnergyModel(**e)
    net = run.topology
    totals = None
    correct = 0
    for i in range(0, len(x), 256):
        res = forward(net, x[i:i + 256], RealWeights(run.effective_weights()))
        correct += int((res.predictions == y[i:i + 256]).sum())
        st = RunStats.from_forward(net, res)
        if totals is None:
            totals = st
        else:
            totals = RunStats({k: totals.events[k] + st.events[k] for k in st.events}, st.fanout, st.rows,
                              totals.neuron_spikes + st.neuron_spikes, st.timesteps, totals.samples + st.samples)
    breakdown = estimate(totals, model)
    rows_in = row_activation_stats(x, window)
    return {"task": cfg["task"], "accuracy": correct / len(y), "energy": breakdown,
            "events_per_inference": {k: v / totals.samples for k, v in totals.events.items()},
            "neuron_spikes_per_inference": totals.neuron_spikes / totals.samples,
            "row_activation": {"input": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                                         for k, v in rows_in.items()}}}


# --------------------------------------------------------------------------- device statistics

def psd_slope(seq: np.ndarray, f_lo: float = 1 / 1024, f_hi: float = 1 / 16) -> float:
    """Log-log slope of the Welch PSD of a read sequence over ``[f_lo, f_hi]`` (cycles per read)."""
    from scipy.signal import welch

    f, p = welch(seq - seq.mean(), fs=1.0, nperseg=min(len(seq), 4096))
    band = (f >= f_lo) & (f <= f_hi)
    return float(np.polyfit(np.log10(f[band]), np.log10(p[band]), 1)[0])


def device_statistics(table: ConductanceLevelTable, seed: int = 0, n_cells: int = 4096, n_reads: int = 2 ** 16,
                      n_r2r_reads: int = 64, psd_level: int | None = None) -> dict:
    """Programming accuracy, retention drift, read-noise spectrum and relative read noise per level."""
    n = table.n_levels
    per_level = []
    for lv in range(n):
        rng = make_rng(seed, "device-check", lv)
        cols = 2 * max(1, n_cells // 128)
        levels = np.full((n_cells // cols, cols), lv, dtype=np.int8)
        arr = CrossbarArray(table, levels, program_cells(table, levels, rng), capacity=None, seed=seed + lv)
        g0 = arr.read(0.0)
        reads = np.stack([arr.read(0.0) for _ in range(n_r2r_reads)])
        rel = float(np.mean(reads.std(axis=0) / reads.mean(axis=0)))
        g1h = arr.mean_conductance(3600.0)
        target = float(table.target_mean[lv])
        per_level.append({"level": lv, "target": target, "mean_t0": float(g0.mean()),
                          "rel_error_t0": float(g0.mean() / target - 1.0), "std_t0": float(g0.std()),
                          "drift_1h": float(arr.mean_conductance(0.0).mean() - g1h.mean()),
                          "delta_g_over_g": rel})
    lv = n // 2 if psd_level is None else psd_level
    slope = psd_slope(read_sequence(table, lv, n_reads, seed=seed))
    dg = [p["delta_g_over_g"] for p in per_level]
    checks = {
        "means_within_2pct": all(abs(p["rel_error_t0"]) <= 0.02 for p in per_level),
        "drift_low_gt_high": per_level[0]["drift_1h"] > per_level[-1]["drift_1h"],
        "psd_slope_in_range": -1.2 <= slope <= -0.8,
        "dg_over_g_non_increasing": all(b <= a for a, b in zip(dg[:-1], dg[1:])),
    }
    return {"levels": per_level, "psd_level": lv, "psd_slope": slope, "checks": checks, "passed": all(checks.values())}
