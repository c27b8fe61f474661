"""Event-count energy estimates and crossbar row-activation statistics.

The RRAM-SNN pays one differential-pair read (two cells) per presynaptic
spike per fan-out column, plus a fixed cost per neuron spike.  The baseline
is a routing-based mixed-signal processor that pays ``baseline_e_route`` per
routed synaptic event.  All constants are configuration; the defaults are
illustrative orders of magnitude, not measurements:

* ``e_read``: 0.1 V read pulse of 10 ns on a ~50 uS cell, V^2 G t = 5 fJ;
* ``e_neuron_spike``: 2 pJ per analog LIF spike;
* ``baseline_e_route``: 30 pJ per routed event (digital AER broadcast + lookup).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class EnergyModel:
    e_read: float = 5e-15
    e_neuron_spike: float = 2e-12
    v_read: float = 0.1
    baseline_e_route: float = 3e-11
    static_per_step: float = 0.0
    accounting: str = "per-spike"

    def __post_init__(self):
        if min(self.e_read, self.e_neuron_spike, self.baseline_e_route, self.static_per_step) < 0:
            raise ConfigError("energy constants must be >= 0")
        if self.accounting not in ("per-spike", "per-timestep"):
            raise ConfigError("accounting must be 'per-spike' or 'per-timestep'")


@dataclass
class RunStats:
    """Event counts for one batch of inferences.

    ``events[name]`` is the total number of presynaptic spikes into weight
    matrix ``name``; ``fanout[name]`` its output width and ``rows[name]`` its
    input width.  ``neuron_spikes`` counts hidden-layer output spikes.
    """

    events: dict[str, float]
    fanout: dict[str, int]
    rows: dict[str, int]
    neuron_spikes: float
    timesteps: int
    samples: int = 1

    @classmethod
    def from_forward(cls, net, result) -> "RunStats":
        shapes = net.weight_shapes()
        B, T = result.trace.shape[:2]
        return cls(events={k: float(v.sum()) for k, v in result.active_rows.items()},
                   fanout={k: s[1] for k, s in shapes.items()}, rows={k: s[0] for k, s in shapes.items()},
                   neuron_spikes=float(sum(c.sum() for c in result.hidden_counts)), timesteps=T, samples=B)

    def scaled(self, factor: float) -> "RunStats":
        return RunStats({k: v * factor for k, v in self.events.items()}, self.fanout, self.rows,
                        self.neuron_spikes * factor, self.timesteps, self.samples)


def estimate(stats: RunStats, model: EnergyModel = EnergyModel()) -> dict:
    """Energy breakdown per inference (joules) and the baseline/SNN ratio."""
    n = max(stats.samples, 1)
    if model.accounting == "per-spike":
        reads = sum(stats.events[k] * stats.fanout[k] for k in stats.events)
    else:
        reads = sum(stats.rows[k] * stats.fanout[k] * stats.timesteps * n for k in stats.events)
    e_rram = reads * 2 * model.e_read / n
    e_neuron = stats.neuron_spikes * model.e_neuron_spike / n
    e_static = model.static_per_step * stats.timesteps
    total = e_rram + e_neuron + e_static
    e_base = sum(stats.events[k] * stats.fanout[k] for k in stats.events) * model.baseline_e_route / n
    return {
        "e_rram": e_rram,
        "e_neuron": e_neuron,
        "e_static": e_static,
        "e_total": total,
        "e_baseline": e_base,
        "baseline_over_snn": e_base / total if total > 0 else float("inf"),
        "constants": asdict(model),
    }


def row_activation_stats(rasters: np.ndarray, window: int = 1) -> dict:
    """Distribution of simultaneously active rows (input lines) per time window.

    ``rasters`` is (B, T, C) or (T, C).  A row is active in a window if it
    carries at least one spike there.  The ANN reference drives every row in
    every window, i.e. a point mass at ``C``.
    """
    x = np.asarray(rasters)
    if x.ndim == 2:
        x = x[None]
    if window < 1:
        raise ConfigError("window must be >= 1")
    B, T, C = x.shape
    nw = T // window
    if nw == 0:
        raise ConfigError("window longer than the raster")
    active = x[:, :nw * window].reshape(B, nw, window, C).any(axis=2).sum(axis=2).ravel()
    hist = np.bincount(active, minlength=C + 1)
    ann = np.zeros(C + 1, dtype=np.int64)
    ann[C] = hist.sum()
    return {"rows": C, "window": window, "histogram": hist, "ann_histogram": ann,
            "mean_active": float(active.mean()), "mean_active_fraction": float(active.mean() / C)}


def column_currents(g: np.ndarray, active_masks: np.ndarray, read_voltage: float) -> np.ndarray:
    """Per-column currents (uA) for each activation pattern: ``V * mask @ G``.

    ``g`` is (rows, cols) in uS, ``active_masks`` (N, rows) boolean.
    """
    return read_voltage * (np.asarray(active_masks, dtype=np.float64) @ g)
