"""Command-line front end: ``rramsnn [global options] <command> [options]``.

Every command resolves its configuration (defaults < ``--config`` file <
``--set key.path=value`` flags), writes its outputs into one run directory
and embeds the resolved config and version string in each artifact.

Exit codes: 0 success, 2 configuration / contract error, 3 numerical fault,
4 device self-test failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import plotting
from .config import config_hash, dotted_overrides, load_config, parse_duration, version_string
from .errors import ConfigError, ContractViolation, NumericalFault
from .training import load_checkpoint, save_checkpoint
from .transfer import ProgrammedNetwork

log = logging.getLogger("rramsnn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


class Context:
    """Resolved config plus the run directory every artifact goes to."""

    def __init__(self, cfg: dict, run_dir: Path, jobs: int):
        self.cfg = cfg
        self.run_dir = run_dir
        self.jobs = jobs
        self.provenance = {"config": cfg, "config_hash": config_hash(cfg), "version": version_string()}

    def path(self, name: str) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return self.run_dir / name

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        p.write_text(json.dumps({**payload, "provenance": self.provenance}, indent=1, sort_keys=True,
                                default=_jsonable) + "\n")
        return p

    def write_csv(self, name: str, header: list[str], rows: list[list]) -> Path:
        """CSV with two leading ``#`` lines carrying version and resolved config."""
        buf = io.StringIO()
        buf.write(f"# version: {self.provenance['version']} config_hash: {self.provenance['config_hash']}\n")
        buf.write(f"# config: {json.dumps(self.cfg, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        p = self.path(name)
        p.write_text(buf.getvalue())
        return p

    def figure(self, fn, data, name: str) -> Path:
        return fn(data, self.path(name))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# --------------------------------------------------------------------------- commands

def cmd_train(ctx: Context, args) -> int:
    cfg = ctx.cfg
    run = ex.train_model(cfg, cfg["training"]["mode"], 0,
                         progress=lambda m: log.info("%s", json.dumps(m, sort_keys=True)))
    out = Path(args.out) if args.out else ctx.path("checkpoint.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run, out, extra=ctx.provenance)
    ctx.write_json("train_metrics.json", {"checkpoint": str(out), "metrics": run.metrics, "meta": run.meta})
    test = [m for m in run.metrics if m["split"] == "test"]
    if test:
        print(f"test accuracy {test[-1]['accuracy']:.4f}")
    print(f"checkpoint {out}")
    return EXIT_OK


def cmd_transfer(ctx: Context, args) -> int:
    run, _ = load_checkpoint(args.ckpt)
    prog = ex.transfer_run(ctx.cfg, run)
    out = Path(args.out) if args.out else ctx.path("arrays.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    prog.save(out, extra={**ctx.provenance, "checkpoint": str(args.ckpt)})
    report = prog.report(run.effective_weights())
    ctx.write_json("transfer_report.json", report)
    for k, v in report["layers"].items():
        print(f"{k}: scale {v['scale']:.4g} gain {v['gain']:.4g} cells {v['cells']} "
              f"mse {v['quantization_mse']:.3g} levels {v['level_histogram']}")
    print(f"arrays {out}")
    return EXIT_OK


def cmd_eval(ctx: Context, args) -> int:
    prog, extra = ProgrammedNetwork.load(args.array)
    ckpt = args.ckpt or extra.get("checkpoint")
    if not ckpt:
        raise ConfigError("array file does not name its checkpoint; pass --ckpt")
    run, _ = load_checkpoint(ckpt)
    ds = ex.build_dataset(ctx.cfg)
    x, y = ex.eval_split(ctx.cfg, ds)
    ev = ctx.cfg["evaluation"]
    times = args.at or ev["times"]
    seeds = range(args.seeds if args.seeds is not None else ev["read_seeds"])
    rows = []
    for label in times:
        t = parse_duration(label)
        for r in seeds:
            acc = ex.crossbar_accuracy(run.topology, prog, x, y, t, r, ev["read_policy"], ev["batch_size"])
            rows.append({"time": label, "t_seconds": t, "read_seed": r, "accuracy": acc})
    sw = ex.software_accuracy(run.topology, prog.dequantized(), x, y)
    ctx.write_json("eval.json", {"rows": rows, "dequantized_software_accuracy": sw})
    ctx.write_csv("eval.csv", ["time", "t_seconds", "read_seed", "accuracy"],
                  [[r["time"], r["t_seconds"], r["read_seed"], _fmt(r["accuracy"])] for r in rows])
    ctx.figure(lambda d, p: plotting.plot_over_time(d, p, ctx.cfg["task"]), rows, "eval.png")
    for label in times:
        accs = [r["accuracy"] for r in rows if r["time"] == label]
        print(f"t={label}: {np.mean(accs):.4f} +/- {np.std(accs):.4f} over {len(accs)} read seeds")
    print(f"dequantized software: {sw:.4f}")
    return EXIT_OK


def cmd_ablate(ctx: Context, args) -> int:
    res = ex.run_ablation(ctx.cfg, ctx.jobs)
    task = res["task"]
    ctx.write_json("ablation.json", res)
    ctx.write_csv("ablation.csv", ["model", "weights", f"{task}_mean", f"{task}_std", "n_seeds"],
                  [[r["model"], r["weights"], _fmt(r["mean"]), _fmt(r["std"]), r["n_seeds"]] for r in res["rows"]])
    ctx.figure(plotting.plot_ablation, res, "ablation.png")
    for r in res["rows"]:
        print(f"{r['model']:>4} {r['weights']:>9}: {100 * r['mean']:.2f} +/- {100 * r['std']:.2f}")
    return EXIT_OK


def _checkpoint_or_train(ctx: Context, args) -> str:
    if args.ckpt:
        return args.ckpt
    path = ctx.path("checkpoint.npz")
    run = ex.train_model(ctx.cfg, ctx.cfg["training"]["mode"], 0)
    save_checkpoint(run, path, extra=ctx.provenance)
    return str(path)


def cmd_ber_sweep(ctx: Context, args) -> int:
    ckpt = _checkpoint_or_train(ctx, args)
    res = ex.ber_sweep(ctx.cfg, ckpt, ctx.jobs)
    ctx.write_json("ber_sweep.json", res)
    ctx.write_csv("ber_sweep.csv", ["ber", "mean", "std", "n_seeds"],
                  [[c["ber"], _fmt(c["mean"]), _fmt(c["std"]), c["n"]] for c in res["curve"]])
    ctx.figure(plotting.plot_ber, res, "ber_sweep.png")
    for c in res["curve"]:
        print(f"BER {c['ber']:g}: {100 * c['mean']:.2f} +/- {100 * c['std']:.2f}")
    return EXIT_OK


def cmd_recover(ctx: Context, args) -> int:
    ckpt = _checkpoint_or_train(ctx, args)
    run, _ = load_checkpoint(ckpt)
    f = ctx.cfg["faults"]
    rep = ex.recovery(ctx.cfg, run, f["ber"], f["retrain_epochs"], fault_seed=args.fault_seed)
    ctx.write_json("recovery.json", rep)
    ctx.write_csv("recovery.csv", ["epoch", "accuracy", "recovery_fraction"],
                  [[0, _fmt(rep["before_accuracy"]), ""]] +
                  [[e["epoch"], _fmt(e["accuracy"]),
                    "" if e["recovery_fraction"] is None else _fmt(e["recovery_fraction"])] for e in rep["epochs"]])
    ctx.figure(plotting.plot_recovery, rep, "recovery.png")
    if rep["nothing_to_recover"]:
        print(f"BER {rep['ber']:g}: nothing to recover (lost {100 * rep['lost']:.2f} pts)")
    else:
        print(f"BER {rep['ber']:g}: clean {rep['clean_accuracy']:.4f} faulted {rep['before_accuracy']:.4f} "
              f"epochs to 90% recovery: {rep['epochs_to_90pct']}")
    return EXIT_OK


def cmd_energy(ctx: Context, args) -> int:
    run, _ = load_checkpoint(args.ckpt)
    rep = ex.energy_report(ctx.cfg, run)
    ctx.write_json("energy.json", rep)
    e = rep["energy"]
    ctx.write_csv("energy.csv", ["component", "joules_per_inference"],
                  [[k, f"{e[k]:.6e}"] for k in ("e_rram", "e_neuron", "e_static", "e_total", "e_baseline")])
    ctx.figure(plotting.plot_energy, rep, "energy.png")
    print(f"SNN {e['e_total']:.3e} J, baseline {e['e_baseline']:.3e} J, ratio {e['baseline_over_snn']:.1f}; "
          f"mean active rows {100 * rep['row_activation']['input']['mean_active_fraction']:.1f}%")
    return EXIT_OK


def cmd_device_check(ctx: Context, args) -> int:
    stats = ex.device_statistics(ex.level_table(ctx.cfg), seed=args.seed)
    ctx.write_json("device_check.json", stats)
    ctx.figure(plotting.plot_device, stats, "device_check.png")
    for name, ok in stats["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"PSD slope {stats['psd_slope']:.3f}")
    return EXIT_OK if stats["passed"] else EXIT_CHECK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rramsnn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE", help="override a config value")
    p.add_argument("--jobs", type=int, help="worker processes (default: run.jobs)")
    p.add_argument("--run-dir", help="output directory (default: <run.out_dir>/<timestamp>-<config hash>)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        s = sub.add_parser(name, **kw)
        s.set_defaults(fn=fn)
        # accept global options after the subcommand too
        s.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
        s.add_argument("--jobs", dest="sub_jobs", type=int, help=argparse.SUPPRESS)
        return s

    s = add("train", cmd_train, help="train a model")
    s.add_argument("--out", help="checkpoint path")
    s = add("transfer", cmd_transfer, help="quantize and program a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", help="array file path")
    s = add("eval", cmd_eval, help="crossbar accuracy at times after programming")
    s.add_argument("--array", required=True)
    s.add_argument("--ckpt", help="checkpoint (default: the one recorded in the array file)")
    s.add_argument("--at", action="append", help="duration such as 0s, 5s, 1h (repeatable)")
    s.add_argument("--seeds", type=int, help="number of read seeds")
    s = add("ablate", cmd_ablate, help="calibration ablation grid")
    s.add_argument("--task", help="mnist, synth_temporal or ecg")
    s = add("ber-sweep", cmd_ber_sweep, help="accuracy versus stuck-at bit error rate")
    s.add_argument("--ckpt", help="checkpoint (default: train one from the config)")
    s.add_argument("--bers", help="comma-separated BERs")
    s.add_argument("--seeds", type=int, help="number of fault seeds")
    s = add("recover", cmd_recover, help="fault-aware retraining")
    s.add_argument("--ckpt", help="checkpoint (default: train one from the config)")
    s.add_argument("--ber", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--fault-seed", type=int, default=0)
    s = add("energy", cmd_energy, help="event-count energy report")
    s.add_argument("--ckpt", required=True)
    s = add("device-check", cmd_device_check, help="device-model statistical self-test")
    s.add_argument("--seed", type=int, default=0)
    return p


def _flag_overrides(args) -> dict:
    """Command flags that map onto config keys."""
    over: dict = {}
    if getattr(args, "task", None):
        over["task"] = args.task
    if getattr(args, "bers", None):
        try:
            over.setdefault("faults", {})["bers"] = [float(b) for b in args.bers.split(",")]
        except ValueError as e:
            raise ConfigError(f"--bers: {e}") from None
    if args.command == "ber-sweep" and args.seeds is not None:
        over.setdefault("faults", {})["fault_seeds"] = args.seeds
    if getattr(args, "ber", None) is not None:
        over.setdefault("faults", {})["ber"] = args.ber
    if getattr(args, "epochs", None) is not None:
        over.setdefault("faults", {})["retrain_epochs"] = args.epochs
    return over


def _deep_update(a: dict, b: dict) -> dict:
    for k, v in b.items():
        a[k] = _deep_update(a.get(k, {}), v) if isinstance(v, dict) and isinstance(a.get(k), dict) else v
    return a


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config_path = args.sub_config or args.config
        overrides = _deep_update(dotted_overrides(args.set), _flag_overrides(args))
        cfg = load_config(config_path, overrides)
        jobs = args.sub_jobs or args.jobs or cfg["run"]["jobs"]
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.run_dir:
            run_dir = Path(args.run_dir)
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            run_dir = Path(cfg["run"]["out_dir"]) / f"{stamp}-{args.command}-{config_hash(cfg)}"
        ctx = Context(cfg, run_dir, jobs)
        code = args.fn(ctx, args)
        print(f"outputs in {run_dir}")
        return code
    except (ConfigError, ContractViolation, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFault as e:
        print(f"numerical fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
