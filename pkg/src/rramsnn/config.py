"""Experiment configuration: defaults < YAML file < command-line overrides.

Unknown keys are rejected with the list of valid keys, so a typo can never
silently fall back to a default.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
import subprocess
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS: dict = {
    "task": "mnist",
    "dataset": {
        "path": None,            # mnist .npz / ECG beat CSV
        "n_train": None,
        "n_test": None,
        "T": 20,
        "dt": 1e-3,
        "max_rate": 400.0,       # mnist rate code
        "seed": 0,
        "classes": 10,           # synth_temporal / ecg
        "channels": 20,
        "jitter": 5.0,
        "spikes_per_channel": 2,
        "threshold": 0.1,        # ecg delta modulation
        "leads": 1,
    },
    "network": {
        "hidden": [128],
        "recurrent": False,
        "v_th": 1.0,
        "reset": "subtract",
        "refractory_steps": 0,
        "readout": "leaky-integrator-sum",
    },
    "heterogeneity": {
        "family": "lognormal",
        "mean_tau_mem": 20e-3,
        "mean_tau_syn": 10e-3,
        "cv": 0.3,
        "seed": 0,
        "empirical_table_csv": None,
    },
    "training": {
        "mode": "NHC",
        "surrogate_slope": 10.0,
        "learning_rate": 1e-3,
        "epochs": 15,
        "batch_size": 64,
        "seed": 0,
        "optimizer": "adam",
        "l2": 0.0,
        "quant_aware": False,
        "detach_reset": True,
        "init_scale": 1.0,
        "divergence_factor": 10.0,   # abort when the epoch loss stays above this x the initial loss
    },
    "device": {
        "table_csv": None,
        "tau_relax": 10e-3,
        "t_retention": 3600.0,
        "rtn_dwell_reads": 10.0,
        "pink_rel": 1.0,
        "noiseless": False,
    },
    "transfer": {
        "scale_policy": "percentile",
        "tile_capacity": 4096,
        "program_seed": 0,
    },
    "evaluation": {
        "read_policy": "per-sample",
        "read_seeds": 5,
        "times": ["0s", "5s", "1h"],
        "batch_size": 64,
        "n_test": None,
    },
    "faults": {
        "bers": [0.0, 1e-4, 1e-3, 1e-2, 1e-1],
        "fault_seeds": 10,
        "ber": 1e-2,
        "retrain_epochs": 3,
    },
    "ablation": {
        "substrate_seeds": 5,
        "nc_seed_offset": 1000,
        "ann": True,
    },
    "energy": {
        "e_read": 5e-15,
        "e_neuron_spike": 2e-12,
        "v_read": 0.1,
        "baseline_e_route": 3e-11,
        "static_per_step": 0.0,
        "accounting": "per-spike",
        "window": 1,
    },
    "run": {
        "out_dir": "runs",
        "jobs": 1,
    },
}

TASKS = ("mnist", "synth_temporal", "ecg")

_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ms|s|m|h|d)?\s*$")
_UNITS = {"ms": 1e-3, "s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0, None: 1.0}


def parse_duration(text) -> float:
    """'5s' -> 5.0, '1h' -> 3600.0, '250ms' -> 0.25; bare numbers are seconds."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _DURATION.match(str(text))
    if not m:
        raise ConfigError(f"cannot parse duration {text!r}; use a number with unit s, m, h, d or ms")
    return float(m.group(1)) * _UNITS[m.group(2)]


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}; valid keys here: {', '.join(sorted(base))}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    if cfg["task"] not in TASKS:
        raise ConfigError(f"unknown task {cfg['task']!r}; expected one of {TASKS}")
    for t in cfg["evaluation"]["times"]:
        parse_duration(t)
    return cfg


def dotted_overrides(pairs: list[str]) -> dict:
    """['training.epochs=3', 'task=ecg'] -> nested dict; values parsed as YAML scalars."""
    out: dict = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, val = item.split("=", 1)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(val)
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:12]


def version_string() -> str:
    from . import __version__

    try:
        out = subprocess.run(["git", "describe", "--always", "--tags", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
