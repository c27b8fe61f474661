"""Multilevel 1T1R RRAM cells and crossbar arrays with temporal non-idealities.

Conductances are in microsiemens, voltages in volts, currents in microamps
and times in seconds.  A read at time ``t`` after programming composes

* retention drift: the level mean moves down by
  ``drift_rate[level] * log10(1 + t / t_retention)``;
* relaxation: the cell's programming deviation from its level target is
  stretched by ``1 + (broadening - 1) * (1 - exp(-t / tau_relax))``;
* random telegraph noise: a symmetric two-state excursion of
  ``+/- rtn_rel * g_programmed / 2`` whose phase is a Markov chain over reads;
* 1/f noise: the normalized sum of octave-spaced telegraph processes, with a
  standard deviation proportional to ``rtn_rel * g_programmed``.

Stuck-at faults replace the cell by a fixed conductance drawn at injection.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractViolation
from .seeding import make_rng

FAULT_NONE, FAULT_LOW, FAULT_HIGH = 0, 1, 2
FAULT_NAMES = ("none", "stuck_low", "stuck_high")
SNAPSHOT_VERSION = 1
DEFAULT_CAPACITY = 4096


@dataclass(frozen=True)
class ConductanceLevelTable:
    target_mean: np.ndarray
    sigma_program: np.ndarray
    relax_broadening: np.ndarray
    retention_drift_rate: np.ndarray
    rtn_rel_amplitude: np.ndarray
    tau_relax: float = 10e-3
    t_retention: float = 3600.0
    rtn_dwell_reads: float = 10.0
    pink_rel: float = 1.0
    pink_octaves: int = 8
    pink_max_flip: float = 0.5
    floor: float = 0.1
    stuck_low: tuple[float, float] = (1.0, 0.5)
    stuck_high: tuple[float, float] = (200.0, 25.0)

    def __post_init__(self):
        for name in ("target_mean", "sigma_program", "relax_broadening", "retention_drift_rate", "rtn_rel_amplitude"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.target_mean.size
        if n < 2 or any(getattr(self, k).shape != (n,) for k in
                        ("sigma_program", "relax_broadening", "retention_drift_rate", "rtn_rel_amplitude")):
            raise ConfigError("level table columns must be 1-D and of equal length (>= 2)")
        if np.any(self.target_mean <= 0) or np.any(np.diff(self.target_mean) <= 0):
            raise ConfigError("target_mean must be positive and strictly increasing in level")
        if np.any(self.sigma_program < 0) or np.any(self.retention_drift_rate < 0) or np.any(self.rtn_rel_amplitude < 0):
            raise ConfigError("sigmas, drift rates and RTN amplitudes must be >= 0")
        if np.any(self.relax_broadening < 1):
            raise ConfigError("relax_broadening must be >= 1")
        if np.any(np.diff(self.rtn_rel_amplitude) > 0):
            raise ConfigError("rtn_rel_amplitude must be non-increasing with conductance")
        if not (self.tau_relax > 0 and self.t_retention > 0 and self.rtn_dwell_reads >= 1):
            raise ConfigError("tau_relax, t_retention must be > 0 and rtn_dwell_reads >= 1")
        if not 0 < self.pink_max_flip <= 0.5 or self.pink_octaves < 1 or self.pink_rel < 0:
            raise ConfigError("pink_max_flip in (0, 0.5], pink_octaves >= 1, pink_rel >= 0 required")

    @property
    def n_levels(self) -> int:
        return int(self.target_mean.size)

    @classmethod
    def default(cls, **overrides) -> "ConductanceLevelTable":
        n = 8
        base = dict(
            target_mean=np.geomspace(10.0, 150.0, n),
            sigma_program=np.full(n, 3.0),
            relax_broadening=np.full(n, 1.5),
            retention_drift_rate=np.linspace(2.0, 0.2, n),
            rtn_rel_amplitude=np.geomspace(0.15, 0.02, n),
        )
        base.update(overrides)
        return cls(**base)

    def noiseless(self) -> "ConductanceLevelTable":
        """Same level means with every stochastic and temporal term switched off."""
        z = np.zeros(self.n_levels)
        return replace(self, sigma_program=z, relax_broadening=np.ones(self.n_levels),
                       retention_drift_rate=z, rtn_rel_amplitude=z)

    def pink_flip_probs(self) -> np.ndarray:
        return self.pink_max_flip * 2.0 ** -np.arange(self.pink_octaves)

    def drift(self, t: float) -> np.ndarray:
        """Per-level downward mean shift (uS) at ``t`` seconds after programming."""
        return self.retention_drift_rate * math.log10(1.0 + t / self.t_retention)

    def relaxation_factor(self, t: float) -> np.ndarray:
        return 1.0 + (self.relax_broadening - 1.0) * (1.0 - math.exp(-t / self.tau_relax))

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ConductanceLevelTable":
        d = dict(d)
        for k in ("stuck_low", "stuck_high"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def load_level_table(path, **params) -> ConductanceLevelTable:
    """Read ``level, mean_uS, sigma_uS, relax_broadening, drift_uS_per_decade, rtn_rel_amplitude`` rows."""
    cols = ("level", "mean_uS", "sigma_uS", "relax_broadening", "drift_uS_per_decade", "rtn_rel_amplitude")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != set(cols):
        raise ConfigError(f"{path}: expected CSV header {','.join(cols)}")
    rows.sort(key=lambda r: int(r["level"]))
    if [int(r["level"]) for r in rows] != list(range(len(rows))):
        raise ConfigError(f"{path}: levels must be 0..n-1 without gaps")
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return ConductanceLevelTable(target_mean=col("mean_uS"), sigma_program=col("sigma_uS"),
                                 relax_broadening=col("relax_broadening"),
                                 retention_drift_rate=col("drift_uS_per_decade"),
                                 rtn_rel_amplitude=col("rtn_rel_amplitude"), **params)


def _draw_positive_normal(rng: np.random.Generator, mean, sigma, size=None) -> np.ndarray:
    """Normal draws truncated to > 0 by resampling the offending entries."""
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), size if size is not None else np.shape(mean))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mean.shape)
    g = mean + sigma * rng.standard_normal(mean.shape)
    bad = g <= 0
    while np.any(bad):
        g[bad] = mean[bad] + sigma[bad] * rng.standard_normal(int(bad.sum()))
        bad = g <= 0
    return g


# --------------------------------------------------------------------------- single cells

@dataclass
class RramCellState:
    level: int
    g_programmed: float
    rtn_phase: int
    rtn_amplitude: float
    fault: str = "none"
    g_stuck: float | None = None
    pink_state: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.g_programmed <= 0:
            raise ConfigError("g_programmed must be positive")
        if (self.fault == "none") != (self.g_stuck is None):
            raise ConfigError("g_stuck must be set exactly when the cell is faulted")


def program_level(table: ConductanceLevelTable, level: int, rng: np.random.Generator) -> RramCellState:
    """Program one cell to ``level``; the conductance is drawn around the level target."""
    if not 0 <= level < table.n_levels:
        raise ConfigError(f"level {level} outside 0..{table.n_levels - 1}")
    g = float(_draw_positive_normal(rng, table.target_mean[level], table.sigma_program[level], size=()))
    return RramCellState(
        level=int(level),
        g_programmed=g,
        rtn_phase=int(rng.integers(2)),
        rtn_amplitude=table.rtn_rel_amplitude[level] * g / 2.0,
        pink_state=rng.choice(np.array([-1, 1], dtype=np.int8), size=table.pink_octaves),
    )


def read_conductance(cell: RramCellState, table: ConductanceLevelTable, t_since_program: float,
                     rng: np.random.Generator) -> float:
    """One read of ``cell`` at ``t_since_program`` seconds; advances its noise state in place."""
    if t_since_program < 0:
        raise ContractViolation(f"read time must be >= 0, got {t_since_program}")
    if cell.fault != "none":
        return cell.g_stuck
    k = cell.level
    g = cell.g_programmed
    if cell.pink_state is None:
        cell.pink_state = rng.choice(np.array([-1, 1], dtype=np.int8), size=table.pink_octaves)
    pink_std = table.pink_rel * table.rtn_rel_amplitude[k] * g
    value = (g + (table.relaxation_factor(t_since_program)[k] - 1.0) * (g - table.target_mean[k])
             - table.drift(t_since_program)[k]
             + (cell.rtn_amplitude if cell.rtn_phase else -cell.rtn_amplitude)
             + pink_std * cell.pink_state.sum() / math.sqrt(table.pink_octaves))
    # advance the telegraph processes by one read
    if rng.random() < 1.0 / table.rtn_dwell_reads:
        cell.rtn_phase ^= 1
    flips = rng.random(table.pink_octaves) < table.pink_flip_probs()
    cell.pink_state = np.where(flips, -cell.pink_state, cell.pink_state).astype(np.int8)
    return max(float(value), table.floor)


# --------------------------------------------------------------------------- arrays

def _packed_bernoulli(rng: np.random.Generator, p: float, n: int) -> np.ndarray:
    """``n`` Bernoulli(p) draws packed into bits (uint8, big-endian bit order).

    For p = 2**-k each draw is the AND of k fair random bits, which is far
    cheaper than one uniform per entry.
    """
    k = -math.log2(p) if p > 0 else math.inf
    nbytes = (n + 7) // 8
    if k == int(k) and 1 <= k <= 16:
        planes = np.frombuffer(rng.bytes(int(k) * nbytes), dtype=np.uint8).reshape(int(k), nbytes)
        return np.bitwise_and.reduce(planes, axis=0)
    return np.packbits(rng.random(n) < p)


def _bernoulli(rng: np.random.Generator, p: float, shape) -> np.ndarray:
    """Boolean mask of the given shape with P(True) = p."""
    n = int(np.prod(shape))
    return np.unpackbits(_packed_bernoulli(rng, p, n), count=n).view(bool).reshape(shape)


class CrossbarArray:
    """A rows x cols array of cells holding a signed weight matrix as differential pairs.

    Logical weight ``(i, j)`` lives on row ``i`` in columns ``2j`` (G+) and
    ``2j + 1`` (G-); its effective value is ``gain * (G+ - G-)``.  Cell state
    is stored as parallel arrays.  Reads mutate the telegraph-noise state, so
    an instance has a single owner; use :meth:`replica` for independent
    evaluation copies.
    """

    def __init__(self, table: ConductanceLevelTable, level: np.ndarray, g_programmed: np.ndarray,
                 gain: float = 1.0, capacity: int | None = DEFAULT_CAPACITY, seed: int = 0):
        level = np.asarray(level, dtype=np.int8)
        if level.ndim != 2 or level.shape[1] % 2:
            raise ConfigError("crossbar needs a 2-D level map with an even number of columns")
        rows, cols = level.shape
        if capacity is not None and rows * cols > capacity:
            raise ConfigError(f"array needs {rows * cols} cells but capacity is {capacity}")
        self.table = table
        self.level = level
        self.g_programmed = np.asarray(g_programmed, dtype=np.float64)
        self.gain = float(gain)
        self.capacity = capacity
        self.fault = np.zeros(level.shape, dtype=np.int8)
        self.g_stuck = np.full(level.shape, np.nan)
        self._init_noise(seed)

    # -- construction helpers
    def _init_noise(self, seed: int) -> None:
        rng = make_rng(seed, "rram-noise-init")
        shape = self.level.shape
        self.rtn_phase = rng.integers(0, 2, size=shape).astype(bool)
        up = rng.random((self.table.pink_octaves, self.level.size)) < 0.5
        # octave states packed 8 cells per byte; a set bit means +1
        self._pink_bits = np.packbits(up, axis=1)
        self._flip_p = np.concatenate([[1.0 / self.table.rtn_dwell_reads], self.table.pink_flip_probs()])
        self._sum_pink()
        self.reads = 0
        self._read_rng = make_rng(seed, "rram-read")
        self._base_cache = (None, None)
        self._refresh_static()

    def _sum_pink(self) -> None:
        up = np.unpackbits(self._pink_bits, axis=1, count=self.level.size)
        self._pink_sum = (2 * up.sum(axis=0, dtype=np.int16) - np.int16(self.table.pink_octaves)).reshape(self.shape)

    @property
    def pink_state(self) -> np.ndarray:
        """Octave telegraph states as +/-1, shape (octaves, rows, cols)."""
        up = np.unpackbits(self._pink_bits, axis=1, count=self.level.size).reshape((-1,) + self.shape)
        return np.where(up == 1, 1, -1).astype(np.int8)

    def _refresh_static(self) -> None:
        tab = self.table
        lv = self.level
        self.rtn_amplitude = tab.rtn_rel_amplitude[lv] * self.g_programmed / 2.0
        self._pink_scale = tab.pink_rel * tab.rtn_rel_amplitude[lv] * self.g_programmed / math.sqrt(tab.pink_octaves)
        self._deviation = self.g_programmed - tab.target_mean[lv]
        self._noisy = bool(np.any(self.rtn_amplitude) or np.any(self._pink_scale))
        self._base_cache = (None, None)

    @property
    def shape(self) -> tuple[int, int]:
        return self.level.shape

    @property
    def noisy(self) -> bool:
        """True when consecutive reads can differ (telegraph or pink noise present)."""
        return self._noisy

    @property
    def logical_shape(self) -> tuple[int, int]:
        return self.level.shape[0], self.level.shape[1] // 2

    def pairing(self, i: int, j: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """Physical (row, col) of the G+ and G- cells of logical weight (i, j)."""
        return (i, 2 * j), (i, 2 * j + 1)

    def replica(self, read_seed: int) -> "CrossbarArray":
        """Independent copy with fresh read-noise streams; programmed state and faults shared by value."""
        other = object.__new__(CrossbarArray)
        other.table = self.table
        other.level = self.level
        other.g_programmed = self.g_programmed
        other.gain = self.gain
        other.capacity = self.capacity
        other.fault = self.fault.copy()
        other.g_stuck = self.g_stuck.copy()
        other._init_noise(read_seed)
        return other

    def cell(self, r: int, c: int) -> RramCellState:
        f = int(self.fault[r, c])
        return RramCellState(level=int(self.level[r, c]), g_programmed=float(self.g_programmed[r, c]),
                             rtn_phase=int(self.rtn_phase[r, c]), rtn_amplitude=float(self.rtn_amplitude[r, c]),
                             fault=FAULT_NAMES[f], g_stuck=None if f == FAULT_NONE else float(self.g_stuck[r, c]),
                             pink_state=self.pink_state[:, r, c].copy())

    # -- reading
    def _healthy_mean(self, t: float) -> np.ndarray:
        """Drift + relaxation mean of every cell ignoring faults; cached for the last ``t``."""
        if self._base_cache[0] != t:
            tab = self.table
            lv = self.level
            g = self.g_programmed + (tab.relaxation_factor(t)[lv] - 1.0) * self._deviation - tab.drift(t)[lv]
            self._base_cache = (t, g)
        return self._base_cache[1]

    def mean_conductance(self, t: float) -> np.ndarray:
        """Noise-free conductance at ``t`` (drift + relaxation, no RTN / 1/f); faults applied."""
        if t < 0:
            raise ContractViolation(f"read time must be >= 0, got {t}")
        g = np.where(self.fault != FAULT_NONE, self.g_stuck, self._healthy_mean(t))
        return np.maximum(g, self.table.floor)

    def read(self, t: float) -> np.ndarray:
        """One read of every cell at ``t`` seconds after programming (uS); advances the noise state."""
        if t < 0:
            raise ContractViolation(f"read time must be >= 0, got {t}")
        g = self._healthy_mean(t)
        if self._noisy:
            g = (g + np.where(self.rtn_phase, self.rtn_amplitude, -self.rtn_amplitude)
                 + self._pink_scale * self._pink_sum)
        if self.fault.any():
            g = np.where(self.fault != FAULT_NONE, self.g_stuck, g)
        self._advance()
        return np.maximum(g, self.table.floor)

    def _advance(self) -> None:
        self.reads += 1
        if not self._noisy:
            return
        rng = self._read_rng
        self.rtn_phase ^= _bernoulli(rng, self._flip_p[0], self.shape)
        for j, p in enumerate(self._flip_p[1:]):
            self._pink_bits[j] ^= _packed_bernoulli(rng, p, self.level.size)
        self._sum_pink()

    def effective_weights(self, g: np.ndarray) -> np.ndarray:
        return self.gain * (g[:, 0::2] - g[:, 1::2])

    def read_weights(self, t: float) -> np.ndarray:
        return self.effective_weights(self.read(t))

    # -- persistence
    def to_arrays(self) -> dict:
        return {"level": self.level, "g_programmed": self.g_programmed, "fault": self.fault, "g_stuck": self.g_stuck}

    def header(self) -> dict:
        return {"version": SNAPSHOT_VERSION, "gain": self.gain, "capacity": self.capacity,
                "shape": list(self.shape), "table": self.table.to_dict()}

    @classmethod
    def from_arrays(cls, header: dict, arrays: dict, seed: int = 0) -> "CrossbarArray":
        if header.get("version") != SNAPSHOT_VERSION:
            raise ConfigError(f"unsupported crossbar snapshot version {header.get('version')}")
        arr = cls(ConductanceLevelTable.from_dict(header["table"]), arrays["level"], arrays["g_programmed"],
                  gain=header["gain"], capacity=header["capacity"], seed=seed)
        arr.fault = np.asarray(arrays["fault"], dtype=np.int8).copy()
        arr.g_stuck = np.asarray(arrays["g_stuck"], dtype=np.float64).copy()
        return arr

    def save(self, path) -> None:
        np.savez_compressed(path, header=np.array(json.dumps(self.header())), **self.to_arrays())

    @classmethod
    def load(cls, path, seed: int = 0) -> "CrossbarArray":
        with np.load(path) as z:
            return cls.from_arrays(json.loads(str(z["header"])), {k: z[k] for k in z.files if k != "header"}, seed)


def inject_faults(array: CrossbarArray, ber: float, seed: int) -> CrossbarArray:
    """Return a copy of ``array`` where each cell is stuck with probability ``ber``.

    A single uniform draw per cell decides the fault, so for a fixed seed the
    faulted set at a lower BER is a subset of the set at a higher BER.
    Previously injected faults are kept.
    """
    if not 0.0 <= ber <= 1.0:
        raise ConfigError(f"BER must be in [0, 1], got {ber}")
    out = array.replica(read_seed=0)
    out.reads = array.reads
    rng = make_rng(seed, "faults")
    u = rng.random(array.shape)
    high = rng.random(array.shape) < 0.5
    z = rng.standard_normal(array.shape)
    new = (u < ber) & (out.fault == FAULT_NONE)
    tab = array.table
    lo_g = np.maximum(tab.stuck_low[0] + tab.stuck_low[1] * z, tab.floor)
    hi_g = np.maximum(tab.stuck_high[0] + tab.stuck_high[1] * z, tab.floor)
    out.fault[new] = np.where(high[new], FAULT_HIGH, FAULT_LOW)
    out.g_stuck[new] = np.where(high[new], hi_g[new], lo_g[new])
    return out


def column_current(array: CrossbarArray, active_rows, read_voltage: float, t: float) -> np.ndarray:
    """Per-column current (uA) when ``active_rows`` are driven at ``read_voltage``."""
    rows = np.fromiter(sorted(set(int(r) for r in active_rows)), dtype=np.int64)
    if rows.size and (rows[0] < 0 or rows[-1] >= array.shape[0]):
        raise ConfigError("active rows outside the array")
    g = array.read(t)
    if not rows.size:
        return np.zeros(array.shape[1])
    return read_voltage * g[rows].sum(axis=0)


def program_cells(table: ConductanceLevelTable, levels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`program_level`: one programmed conductance per entry of ``levels``."""
    levels = np.asarray(levels)
    if levels.size and (levels.min() < 0 or levels.max() >= table.n_levels):
        raise ConfigError(f"levels outside 0..{table.n_levels - 1}")
    return _draw_positive_normal(rng, table.target_mean[levels], table.sigma_program[levels], size=levels.shape)


def read_sequence(table: ConductanceLevelTable, level: int, n_reads: int, t: float = 0.0, seed: int = 0) -> np.ndarray:
    """``n_reads`` consecutive reads of one freshly programmed cell (for noise diagnostics)."""
    rng = make_rng(seed, "program")
    g = program_cells(table, np.array([[level, 0]]), rng)
    arr = CrossbarArray(table, np.array([[level, 0]]), g, seed=seed, capacity=None)
    return np.array([arr.read(t)[0, 0] for _ in range(n_reads)])
