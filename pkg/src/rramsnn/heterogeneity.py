"""Time-constant heterogeneity of analog LIF neurons and DPI synapses.

Arrays of nominally identical subthreshold circuits biased with the same
voltage leak at different rates.  We model the spread of the resulting
time constants with a configurable distribution (lognormal by default),
parameterized by the mean and the coefficient of variation (std / mean).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, OutOfRangeError
from .seeding import make_rng

FAMILIES = ("lognormal", "truncated-normal", "empirical-table")
KINDS = ("membrane", "synapse", "readout-membrane", "readout-synapse")

# lower truncation bound of the truncated-normal family, as a fraction of the mean
TRUNCATION_FRACTION = 0.05


@dataclass(frozen=True)
class HeterogeneityModel:
    family: str = "lognormal"
    mean_tau_mem: float = 20e-3
    mean_tau_syn: float = 10e-3
    cv: float = 0.3
    seed: int = 0
    empirical_table: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown heterogeneity family {self.family!r}; expected one of {FAMILIES}")
        if not self.cv >= 0:
            raise ConfigError(f"cv must be >= 0, got {self.cv}")
        if not (self.mean_tau_mem > 0 and self.mean_tau_syn > 0):
            raise ConfigError("mean time constants must be positive")
        if self.empirical_table is not None:
            object.__setattr__(self, "empirical_table", tuple((float(t), float(p)) for t, p in self.empirical_table))
            taus = np.array([t for t, _ in self.empirical_table])
            probs = np.array([p for _, p in self.empirical_table])
            if len(taus) == 0 or np.any(taus <= 0) or np.any(probs < 0):
                raise ConfigError("empirical table needs positive taus and non-negative masses")
            if abs(probs.sum() - 1.0) > 1e-9:
                raise ConfigError(f"empirical table masses sum to {probs.sum()!r}, not 1")
        elif self.family == "empirical-table":
            raise ConfigError("family 'empirical-table' requires empirical_table")

    def mean_for(self, kind: str) -> float:
        return self.mean_tau_syn if kind.endswith("synapse") else self.mean_tau_mem

    def lognormal_params(self, kind: str) -> tuple[float, float]:
        """(mu, sigma) of the underlying normal so the lognormal has the configured mean and cv."""
        sigma2 = math.log1p(self.cv**2)
        return math.log(self.mean_for(kind)) - 0.5 * sigma2, math.sqrt(sigma2)


def sample_time_constants(model: HeterogeneityModel, count: int, kind: str = "membrane", stream=0) -> np.ndarray:
    """Draw ``count`` strictly positive time constants (seconds).

    The result is a pure function of ``(model, count, kind, stream)``;
    ``stream`` lets callers draw independent populations (e.g. one per layer)
    from the same model.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if kind not in KINDS:
        raise ConfigError(f"unknown tau kind {kind!r}; expected one of {KINDS}")
    mean = model.mean_for(kind)
    rng = make_rng(model.seed, "tau", kind, stream)

    if model.family == "empirical-table":
        taus = np.array([t for t, _ in model.empirical_table])
        probs = np.array([p for _, p in model.empirical_table])
        return rng.choice(taus, size=count, p=probs / probs.sum())
    if model.cv == 0:
        return np.full(count, mean)
    if model.family == "lognormal":
        mu, sigma = model.lognormal_params(kind)
        return rng.lognormal(mu, sigma, size=count)

    # truncated normal by rejection; acceptance is > 99.9% for cv <= 0.5
    std = model.cv * mean
    lower = TRUNCATION_FRACTION * mean
    out = np.empty(0)
    while out.size < count:
        draw = rng.normal(mean, std, size=count)
        out = np.concatenate([out, draw[draw > lower]])
    return out[:count]


def load_empirical_table(path) -> tuple[tuple[float, float], ...]:
    """Read a two-column CSV (tau_seconds, probability); a header row is optional."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            try:
                rows.append((float(rec[0]), float(rec[1])))
            except ValueError:
                if rows:
                    raise ConfigError(f"{path}: malformed row {rec!r}") from None
    if not rows:
        raise ConfigError(f"{path}: no (tau_seconds, probability) rows found")
    return tuple(rows)


@dataclass(frozen=True)
class BiasCurve:
    """Mean time constant as a function of the leak bias voltage."""

    points: tuple[tuple[float, float], ...]
    monotone: bool = True
    _v: np.ndarray = field(init=False, repr=False, compare=False)
    _log_tau: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = tuple((float(v), float(t)) for v, t in self.points)
        object.__setattr__(self, "points", pts)
        v = np.array([p[0] for p in pts])
        tau = np.array([p[1] for p in pts])
        if len(pts) < 2 or np.any(np.diff(v) <= 0):
            raise ConfigError("bias voltages must be strictly increasing (>= 2 points)")
        if np.any(tau <= 0):
            raise ConfigError("curve time constants must be positive")
        if self.monotone and np.any(np.diff(tau) >= 0):
            raise ConfigError("monotone curve requires tau strictly decreasing with bias")
        object.__setattr__(self, "_v", v)
        object.__setattr__(self, "_log_tau", np.log(tau))


def tau_from_bias(curve: BiasCurve, bias: float) -> float:
    """Piecewise log-linear interpolation of the bias curve; no extrapolation."""
    v = curve._v
    if not v[0] <= bias <= v[-1]:
        raise OutOfRangeError(f"bias {bias} V outside curve range [{v[0]}, {v[-1]}] V")
    hit = np.flatnonzero(v == bias)
    if hit.size:
        return curve.points[hit[0]][1]
    return float(np.exp(np.interp(bias, v, curve._log_tau)))


def model_from_dict(d: dict) -> HeterogeneityModel:
    d = dict(d)
    table = d.pop("empirical_table", None)
    table_csv = d.pop("empirical_table_csv", None)
    if table_csv is not None:
        table = load_empirical_table(Path(table_csv))
    return HeterogeneityModel(empirical_table=table, **d)
