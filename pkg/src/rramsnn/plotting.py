"""Matplotlib figures written next to the metric files (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no software tag: identical figures give identical bytes
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ablation(result: dict, path) -> Path:
    rows = result["rows"]
    models = list(dict.fromkeys(r["model"] for r in rows))
    kinds = list(dict.fromkeys(r["weights"] for r in rows))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / len(kinds)
    for j, kind in enumerate(kinds):
        xs, ms, ss = [], [], []
        for i, m in enumerate(models):
            hit = [r for r in rows if r["model"] == m and r["weights"] == kind]
            if hit:
                xs.append(i + j * width)
                ms.append(100 * hit[0]["mean"])
                ss.append(100 * hit[0]["std"])
        ax.bar(xs, ms, width, yerr=ss, label=kind, capsize=2)
    ax.set_xticks(np.arange(len(models)) + 0.4 - width / 2, models)
    ax.set_ylabel("accuracy (%)")
    ax.set_title(result["task"])
    ax.legend(fontsize=7, ncol=len(kinds))
    return _save(fig, path)


def plot_over_time(rows: list[dict], path, title: str = "") -> Path:
    labels = list(dict.fromkeys(r["time"] for r in rows))
    means = [100 * np.mean([r["accuracy"] for r in rows if r["time"] == lb]) for lb in labels]
    stds = [100 * np.std([r["accuracy"] for r in rows if r["time"] == lb]) for lb in labels]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.errorbar(range(len(labels)), means, yerr=stds, marker="o", capsize=3)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel("time after programming")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    return _save(fig, path)


def plot_ber(result: dict, path) -> Path:
    curve = result["curve"]
    bers = np.array([c["ber"] for c in curve])
    floor = bers[bers > 0].min() / 10 if (bers > 0).any() else 1e-5
    x = np.where(bers > 0, bers, floor)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.errorbar(x, [100 * c["mean"] for c in curve], yerr=[100 * c["std"] for c in curve], marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("bit error rate (leftmost point: no faults)")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(result["task"])
    return _save(fig, path)


def plot_recovery(report: dict, path) -> Path:
    ep = [0] + [e["epoch"] for e in report["epochs"]]
    acc = [report["before_accuracy"]] + [e["accuracy"] for e in report["epochs"]]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(ep, [100 * a for a in acc], marker="o", label="faulted")
    ax.axhline(100 * report["clean_accuracy"], ls="--", color="k", label="fault-free")
    ax.set_xlabel("retraining epoch")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"{report['task']}, BER {report['ber']:g}")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_energy(report: dict, path) -> Path:
    e = report["energy"]
    rows = report["row_activation"]["input"]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    names = ["RRAM reads", "neurons", "SNN total", "baseline"]
    vals = [e["e_rram"], e["e_neuron"], e["e_total"], e["e_baseline"]]
    a1.bar(names, vals)
    a1.set_yscale("log")
    a1.set_ylabel("energy per inference (J)")
    hist = np.asarray(rows["histogram"], dtype=float)
    frac = np.arange(len(hist)) / rows["rows"]
    a2.bar(100 * frac, hist / hist.sum(), width=100 / rows["rows"], label="SNN")
    a2.axvline(100, color="r", label="ANN (all rows)")
    a2.set_xlabel("active rows per time step (%)")
    a2.set_ylabel("fraction of steps")
    a2.legend(fontsize=7)
    return _save(fig, path)


def plot_device(stats: dict, path) -> Path:
    lv = stats["levels"]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.errorbar([p["target"] for p in lv], [p["mean_t0"] for p in lv], yerr=[p["std_t0"] for p in lv],
                marker="o", ls="none", capsize=3)
    a1.plot([p["target"] for p in lv], [p["target"] for p in lv], "k--", lw=0.8)
    a1.set_xlabel("target (uS)")
    a1.set_ylabel("read at t=0 (uS)")
    a2.plot([p["target"] for p in lv], [p["delta_g_over_g"] for p in lv], marker="o", label="dG/G")
    a2.plot([p["target"] for p in lv], [p["drift_1h"] / p["target"] for p in lv], marker="s", label="drift 1 h / G")
    a2.set_xscale("log")
    a2.set_xlabel("target (uS)")
    a2.legend(fontsize=7)
    a2.set_title(f"PSD slope {stats['psd_slope']:.2f}")
    return _save(fig, path)
