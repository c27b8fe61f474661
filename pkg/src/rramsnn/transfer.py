"""Discretize trained weights and program them into simulated crossbars.

A signed weight is stored as a differential pair: its magnitude level is
programmed on the cell selected by the sign (G+ for positive, G- for
negative) and the partner cell sits at level 0.  With level targets
``g_k`` the effective weight is ``gain * (g_k - g_0)``, so the usable
magnitudes are ``scale * m_k`` with ``m_k = (g_k - g_0) / (g_top - g_0)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .rram import DEFAULT_CAPACITY, ConductanceLevelTable, CrossbarArray, program_cells
from .seeding import make_rng


@dataclass(frozen=True)
class QuantizationScheme:
    bits: int = 3
    scale_policy: str = "percentile"
    percentile: float = 99.7
    level_means: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.bits < 1:
            raise ConfigError("bits must be >= 1")
        if self.scale_policy not in ("max", "percentile"):
            raise ConfigError(f"scale_policy must be 'max' or 'percentile', got {self.scale_policy!r}")
        if self.level_means is not None:
            means = tuple(float(m) for m in self.level_means)
            if len(means) != 2 ** self.bits:
                raise ConfigError(f"{self.bits} bits need {2 ** self.bits} level means, got {len(means)}")
            if any(b <= a for a, b in zip(means, means[1:])):
                raise ConfigError("level means must be strictly increasing")
            object.__setattr__(self, "level_means", means)

    @classmethod
    def for_table(cls, table: ConductanceLevelTable, **kw) -> "QuantizationScheme":
        bits = int(round(np.log2(table.n_levels)))
        if 2 ** bits != table.n_levels:
            raise ConfigError("number of conductance levels must be a power of two")
        return cls(bits=bits, level_means=tuple(table.target_mean), **kw)

    def means(self) -> np.ndarray:
        """Level targets (uS); uniform spacing when no table is attached."""
        if self.level_means is not None:
            return np.asarray(self.level_means)
        return np.arange(2 ** self.bits, dtype=np.float64)

    def fractions(self) -> np.ndarray:
        g = self.means()
        return (g - g[0]) / (g[-1] - g[0])


def tensor_scale(weights: np.ndarray, scheme: QuantizationScheme) -> float:
    mag = np.abs(weights)
    scale = float(mag.max()) if scheme.scale_policy == "max" else float(np.percentile(mag, scheme.percentile))
    if scale <= 0:
        scale = float(mag.max())
    return scale if scale > 0 else 1.0


def quantize(weights: np.ndarray, scheme: QuantizationScheme, scale: float | None = None):
    """Nearest-level quantization.

    Returns ``(levels, signs, scale)``: integer level indices, signs in
    {-1, 0, +1} (0 only for level 0) and the per-tensor scale.  Ties round
    to the level further from zero.
    """
    w = np.asarray(weights, dtype=np.float64)
    if not np.isfinite(w).all():
        raise ConfigError("cannot quantize non-finite weights")
    if scale is None:
        scale = tensor_scale(w, scheme)
    m = scheme.fractions()
    mag = np.abs(w) / scale
    # midpoints between consecutive levels; a value on a midpoint goes up
    mids = 0.5 * (m[:-1] + m[1:])
    levels = np.searchsorted(mids, mag, side="right").astype(np.int8)
    signs = np.where(levels == 0, 0, np.sign(w)).astype(np.int8)
    return levels, signs, float(scale)


def gain_for(scale: float, scheme: QuantizationScheme) -> float:
    g = scheme.means()
    return scale / (g[-1] - g[0])


def dequantize(levels: np.ndarray, signs: np.ndarray, scale: float, scheme: QuantizationScheme) -> np.ndarray:
    """Weights as a noiseless crossbar would read them: ``sign * gain * (g_k - g_0)``.

    Computed with the same float operations as the crossbar path so that a
    noiseless array reproduces these values bit for bit.
    """
    g = scheme.means()
    gain = gain_for(scale, scheme)
    pos = gain * (g[levels] - g[0])
    neg = gain * (g[0] - g[levels])
    return np.where(signs > 0, pos, np.where(signs < 0, neg, gain * (g[0] - g[0])))


def level_maps(levels: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Physical level map (rows, 2 * cols): G+ at even columns, G- at odd columns."""
    rows, cols = levels.shape
    out = np.zeros((rows, 2 * cols), dtype=np.int8)
    out[:, 0::2] = np.where(signs > 0, levels, 0)
    out[:, 1::2] = np.where(signs < 0, levels, 0)
    return out


def program_array(levels: np.ndarray, signs: np.ndarray, table: ConductanceLevelTable, gain: float, *,
                  seed: int = 0, capacity: int | None = DEFAULT_CAPACITY, name: str = "") -> CrossbarArray:
    """Program a quantized matrix into a new crossbar."""
    phys = level_maps(levels, signs)
    need = phys.size
    if capacity is not None and need > capacity:
        raise ConfigError(f"matrix {name or ''} {levels.shape} needs {need} cells, array capacity is {capacity}")
    g = program_cells(table, phys, make_rng(seed, "program", name))
    return CrossbarArray(table, phys, g, gain=gain, capacity=capacity, seed=seed)


def reprogram_healthy(array: CrossbarArray, levels: np.ndarray, signs: np.ndarray, gain: float,
                      seed: int) -> CrossbarArray:
    """Reprogram every logical weight whose two cells are both healthy; faulted pairs keep their state.

    The gain is updated, which rescales faulted pairs too.
    """
    phys = level_maps(levels, signs)
    bad = array.fault != 0
    bad_pair = bad[:, 0::2] | bad[:, 1::2]
    bad_cells = np.repeat(bad_pair, 2, axis=1)
    new_level = np.where(bad_cells, array.level, phys).astype(np.int8)
    g_new = program_cells(array.table, new_level, make_rng(seed, "reprogram"))
    g = np.where(bad_cells, array.g_programmed, g_new)
    out = CrossbarArray(array.table, new_level, g, gain=gain, capacity=array.capacity, seed=seed)
    out.fault = array.fault.copy()
    out.g_stuck = array.g_stuck.copy()
    return out


@dataclass
class ProgrammedNetwork:
    """Crossbars for every weight matrix of a network plus the quantization record."""

    arrays: dict[str, CrossbarArray]
    scales: dict[str, float]
    scheme: QuantizationScheme
    levels: dict[str, np.ndarray]
    signs: dict[str, np.ndarray]

    def dequantized(self) -> dict[str, np.ndarray]:
        return {k: dequantize(self.levels[k], self.signs[k], self.scales[k], self.scheme) for k in self.arrays}

    def replicas(self, read_seed: int) -> dict[str, CrossbarArray]:
        return {k: a.replica(read_seed=hash_seed(read_seed, k)) for k, a in self.arrays.items()}

    def report(self, weights: dict[str, np.ndarray] | None = None) -> dict:
        """Per-layer scale, level histogram and (if weights given) quantization MSE."""
        rep = {"scheme": asdict(self.scheme), "layers": {}}
        for k, a in self.arrays.items():
            entry = {"scale": self.scales[k], "gain": a.gain, "cells": int(a.level.size),
                     "level_histogram": np.bincount(self.levels[k].ravel(), minlength=2 ** self.scheme.bits).tolist()}
            if weights is not None:
                dq = dequantize(self.levels[k], self.signs[k], self.scales[k], self.scheme)
                entry["quantization_mse"] = float(np.mean((weights[k] - dq) ** 2))
            rep["layers"][k] = entry
        return rep

    def save(self, path, extra: dict | None = None) -> None:
        header = {"scheme": asdict(self.scheme), "scales": self.scales,
                  "arrays": {k: a.header() for k, a in self.arrays.items()}, "extra": extra or {}}
        blobs = {}
        for k, a in self.arrays.items():
            for name, v in a.to_arrays().items():
                blobs[f"{k}__{name}"] = v
            blobs[f"{k}__q_levels"] = self.levels[k]
            blobs[f"{k}__q_signs"] = self.signs[k]
        with open(path, "wb") as fh:
            np.savez_compressed(fh, header=np.array(json.dumps(header, sort_keys=True)), **blobs)

    @classmethod
    def load(cls, path) -> tuple["ProgrammedNetwork", dict]:
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            data = {k: z[k] for k in z.files if k != "header"}
        scheme_d = dict(header["scheme"])
        if scheme_d.get("level_means") is not None:
            scheme_d["level_means"] = tuple(scheme_d["level_means"])
        scheme = QuantizationScheme(**scheme_d)
        arrays, levels, signs = {}, {}, {}
        for k, h in header["arrays"].items():
            arrays[k] = CrossbarArray.from_arrays(
                h, {n: data[f"{k}__{n}"] for n in ("level", "g_programmed", "fault", "g_stuck")})
            levels[k] = data[f"{k}__q_levels"]
            signs[k] = data[f"{k}__q_signs"]
        return cls(arrays, header["scales"], scheme, levels, signs), header.get("extra", {})


def hash_seed(seed: int, key: str) -> int:
    return int(make_rng(seed, "replica", key).integers(2**31))


def program_network(weights: dict[str, np.ndarray], table: ConductanceLevelTable, *, seed: int = 0,
                    scale_policy: str = "percentile", tile_capacity: int = DEFAULT_CAPACITY) -> ProgrammedNetwork:
    """Quantize and program every weight matrix.

    Large matrices are spread over as many ``tile_capacity``-cell tiles as
    needed; each matrix becomes one logical :class:`CrossbarArray` whose
    capacity is the total of its tiles.
    """
    scheme = QuantizationScheme.for_table(table, scale_policy=scale_policy)
    arrays, scales, levels, signs = {}, {}, {}, {}
    for k, w in weights.items():
        lv, sg, scale = quantize(w, scheme)
        tiles = -(-2 * w.size // tile_capacity)
        arrays[k] = program_array(lv, sg, table, gain_for(scale, scheme), seed=seed,
                                  capacity=tiles * tile_capacity, name=k)
        scales[k], levels[k], signs[k] = scale, lv, sg
    return ProgrammedNetwork(arrays, scales, scheme, levels, signs)
