"""Discrete-time LIF networks with exponential (DPI-style) synapses.

Per neuron ``j`` and step::

    i_syn <- alpha_j * i_syn + sum_i W_ij s_in_i + sum_k R_kj s_prev_k
    v     <- beta_j * v + (1 - beta_j) * i_syn
    spike  = v >= v_th,  then reset (subtract or to-zero)

with ``alpha = exp(-dt / tau_syn)`` and ``beta = exp(-dt / tau_mem)``.  The
readout layer is a set of non-spiking leaky integrators whose membrane trace
is summed (or max-pooled) over time to give class logits.

Weights come from a :class:`WeightSource`: fixed real matrices for software
simulation, or a programmed crossbar read at some time after programming.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation, NumericalFault
from .seeding import make_rng

RASTER_MAGIC = b"SPKR"
RASTER_VERSION = 1


@dataclass
class LifLayerParams:
    n: int
    tau_mem: np.ndarray
    tau_syn: np.ndarray
    v_th: float = 1.0
    reset: str = "subtract"
    refractory_steps: int = 0

    def __post_init__(self):
        self.tau_mem = np.broadcast_to(np.asarray(self.tau_mem, dtype=np.float64), (self.n,)).copy()
        tau_syn = np.asarray(self.tau_syn, dtype=np.float64)
        self.tau_syn = tau_syn.copy() if tau_syn.ndim == 2 else np.broadcast_to(tau_syn, (self.n,)).copy()
        if self.reset not in ("subtract", "to-zero"):
            raise ConfigError(f"reset must be 'subtract' or 'to-zero', got {self.reset!r}")
        if self.refractory_steps < 0:
            raise ConfigError("refractory_steps must be >= 0")
        if self.tau_syn.ndim == 2 and self.tau_syn.shape[1] != self.n:
            raise ConfigError("per-synapse tau_syn must have shape (n_in, n)")

    @property
    def per_synapse(self) -> bool:
        return self.tau_syn.ndim == 2

    def decays(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """(alpha, beta) synaptic and membrane decay factors for step ``dt``."""
        if np.any(self.tau_mem <= dt) or np.any(self.tau_syn <= dt):
            raise ConfigError(f"all time constants must exceed dt={dt}")
        return np.exp(-dt / self.tau_syn), np.exp(-dt / self.tau_mem)


@dataclass
class ReadoutParams:
    n: int
    tau_mem: np.ndarray
    tau_syn: np.ndarray

    def __post_init__(self):
        self.tau_mem = np.broadcast_to(np.asarray(self.tau_mem, dtype=np.float64), (self.n,)).copy()
        self.tau_syn = np.broadcast_to(np.asarray(self.tau_syn, dtype=np.float64), (self.n,)).copy()

    def decays(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        if np.any(self.tau_mem <= dt) or np.any(self.tau_syn <= dt):
            raise ConfigError(f"all time constants must exceed dt={dt}")
        return np.exp(-dt / self.tau_syn), np.exp(-dt / self.tau_mem)


@dataclass
class NetworkTopology:
    input_dim: int
    hidden: list[tuple[LifLayerParams, bool]]
    readout_params: ReadoutParams
    dt: float = 1e-3
    readout: str = "leaky-integrator-sum"

    def __post_init__(self):
        if not self.hidden:
            raise ConfigError("network needs at least one hidden layer")
        if self.readout not in ("leaky-integrator-sum", "max-over-time"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        for l, (p, rec) in enumerate(self.hidden):
            if p.per_synapse and (rec or p.tau_syn.shape[0] != self.layer_inputs(l)):
                raise ConfigError("per-synapse tau_syn needs a feedforward layer with shape (n_in, n)")

    @property
    def output_dim(self) -> int:
        return self.readout_params.n

    def layer_inputs(self, l: int) -> int:
        return self.input_dim if l == 0 else self.hidden[l - 1][0].n

    def weight_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        for l, (p, rec) in enumerate(self.hidden):
            shapes[f"W{l}"] = (self.layer_inputs(l), p.n)
            if rec:
                shapes[f"R{l}"] = (p.n, p.n)
        shapes["Wout"] = (self.hidden[-1][0].n, self.output_dim)
        return shapes

    def substrate(self) -> dict[str, np.ndarray]:
        """All time constants, keyed for checkpoints and hashing."""
        out = {}
        for l, (p, _) in enumerate(self.hidden):
            out[f"tau_mem{l}"] = p.tau_mem
            out[f"tau_syn{l}"] = p.tau_syn
        out["tau_mem_out"] = self.readout_params.tau_mem
        out["tau_syn_out"] = self.readout_params.tau_syn
        return out


@dataclass
class SpikeRaster:
    """Binary T x C spike tensor sampled every ``dt`` seconds."""

    data: np.ndarray
    dt: float = 1e-3

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ConfigError("raster must be a T x C array with T >= 1")
        if data.size and not np.isin(data, (0, 1)).all():
            raise ConfigError("raster entries must be 0 or 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        self.data = data.astype(np.uint8)

    @property
    def timesteps(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def to_events_csv(self, path) -> None:
        t, c = np.nonzero(self.data)
        with open(path, "w") as fh:
            fh.write(f"# T={self.timesteps} C={self.channels} dt={self.dt!r}\n")
            fh.write("time_step,channel\n")
            for a, b in zip(t, c):
                fh.write(f"{a},{b}\n")

    @classmethod
    def from_events_csv(cls, path, timesteps: int | None = None, channels: int | None = None,
                        dt: float | None = None) -> "SpikeRaster":
        meta = {}
        events = []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                meta.update(kv.split("=", 1) for kv in line[1:].split())
            elif line and not line.startswith("time_step"):
                a, b = line.split(",")
                events.append((int(a), int(b)))
        T = timesteps or int(meta.get("T", 0)) or (max(e[0] for e in events) + 1)
        C = channels or int(meta.get("C", 0)) or (max(e[1] for e in events) + 1)
        data = np.zeros((T, C), dtype=np.uint8)
        for a, b in events:
            data[a, b] = 1
        return cls(data, dt if dt is not None else float(meta.get("dt", 1e-3)))

    def save(self, path) -> None:
        """Dense format: magic, u32 header length, JSON header, packed bits."""
        header = json.dumps({"T": self.timesteps, "C": self.channels, "dt": self.dt,
                             "version": RASTER_VERSION}).encode()
        with open(path, "wb") as fh:
            fh.write(RASTER_MAGIC + struct.pack("<I", len(header)) + header)
            fh.write(np.packbits(self.data, axis=None).tobytes())

    @classmethod
    def load(cls, path) -> "SpikeRaster":
        blob = Path(path).read_bytes()
        if blob[:4] != RASTER_MAGIC:
            raise ConfigError(f"{path}: not a raster file")
        (hlen,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8:8 + hlen])
        if header.get("version") != RASTER_VERSION:
            raise ConfigError(f"{path}: unsupported raster version {header.get('version')}")
        bits = np.unpackbits(np.frombuffer(blob[8 + hlen:], dtype=np.uint8))
        T, C = header["T"], header["C"]
        return cls(bits[:T * C].reshape(T, C), header["dt"])


# --------------------------------------------------------------------------- stepping

@dataclass
class LayerState:
    v: np.ndarray
    i_syn: np.ndarray
    spikes: np.ndarray
    refractory: np.ndarray

    @classmethod
    def zeros(cls, batch: int, params: LifLayerParams, dtype=np.float64) -> "LayerState":
        n = params.n
        i_shape = (batch,) + params.tau_syn.shape
        return cls(np.zeros((batch, n), dtype), np.zeros(i_shape, dtype), np.zeros((batch, n), dtype),
                   np.zeros((batch, n), np.int32))


def _project(s: np.ndarray, W: np.ndarray) -> np.ndarray:
    """s @ W for shared (2-D) or per-sample (3-D) weight matrices."""
    if W.ndim == 2:
        return s @ W
    return np.matmul(s[:, None, :], W)[:, 0, :]


def layer_step(state: LayerState, params: LifLayerParams, s_in: np.ndarray, W: np.ndarray,
               R: np.ndarray | None = None, dt: float = 1e-3, drive: np.ndarray | None = None,
               decays=None) -> tuple[LayerState, np.ndarray]:
    """Advance one LIF layer by one step; returns the new state and its output spikes.

    ``drive`` optionally supplies a precomputed ``s_in @ W`` (the forward pass
    batches the feedforward projection over time).
    """
    alpha, beta = decays if decays is not None else params.decays(dt)
    if params.per_synapse:
        w = W if W.ndim == 3 else W[None]
        i_syn = alpha * state.i_syn + s_in[:, :, None] * w
        current = i_syn.sum(axis=1)
    else:
        inp = drive if drive is not None else _project(s_in, W)
        i_syn = alpha * state.i_syn + inp
        if R is not None:
            i_syn = i_syn + _project(state.spikes, R)
        current = i_syn
    v = beta * state.v + (1.0 - beta) * current
    if not np.isfinite(v).all():
        raise NumericalFault("non-finite membrane potential in layer_step")
    refr = state.refractory > 0
    spikes = (v >= params.v_th) & ~refr
    if params.reset == "subtract":
        v = v - params.v_th * spikes
    else:
        v = np.where(spikes, 0.0, v)
    v = np.where(refr, 0.0, v)
    counter = np.where(spikes, params.refractory_steps, np.maximum(state.refractory - 1, 0))
    s = spikes.astype(v.dtype)
    return LayerState(v, i_syn, s, counter), s


# --------------------------------------------------------------------------- weight sources

class WeightSource:
    """Supplies effective weight matrices to :func:`forward`."""

    per_timestep = False

    def read(self, layer: str, t_since_program: float | None = None) -> np.ndarray:
        raise NotImplementedError

    def batch(self, batch_size: int) -> dict[str, np.ndarray]:
        """Matrices for one batch: 2-D if shared, (B, n_in, n_out) if drawn per sample."""
        raise NotImplementedError


class RealWeights(WeightSource):
    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = {k: np.asarray(v) for k, v in weights.items()}

    def read(self, layer, t_since_program=None):
        return self.weights[layer]

    def batch(self, batch_size):
        return self.weights


class CrossbarWeights(WeightSource):
    """Weights read from programmed crossbars ``t`` seconds after programming.

    ``policy`` selects how often the arrays are read: ``per-sample`` (one read
    snapshot per inference sample), ``per-timestep`` (a new read every
    simulation step) or ``per-batch`` (one snapshot shared by a batch).
    """

    POLICIES = ("per-sample", "per-timestep", "per-batch")

    def __init__(self, arrays: dict, t: float, policy: str = "per-sample"):
        if t < 0:
            raise ContractViolation(f"read time must be >= 0, got {t}")
        if policy not in self.POLICIES:
            raise ConfigError(f"unknown read policy {policy!r}; expected one of {self.POLICIES}")
        self.arrays = arrays
        self.t = float(t)
        self.policy = policy
        self.per_timestep = policy == "per-timestep"

    def read(self, layer, t_since_program=None):
        t = self.t if t_since_program is None else t_since_program
        if t < 0:
            raise ContractViolation(f"read time must be >= 0, got {t}")
        return self.arrays[layer].read_weights(t)

    def batch(self, batch_size):
        # reads of a noise-free array are all identical, so one snapshot serves every sample
        if self.policy == "per-batch" or not any(a.noisy for a in self.arrays.values()):
            return {k: a.read_weights(self.t) for k, a in self.arrays.items()}
        return {k: np.stack([a.read_weights(self.t) for _ in range(batch_size)]) for k, a in self.arrays.items()}


# --------------------------------------------------------------------------- forward

@dataclass
class ForwardResult:
    trace: np.ndarray                 # (B, T, n_out) readout membrane
    logits: np.ndarray                # (B, n_out)
    hidden_counts: list[np.ndarray]   # per layer (B, n) spike counts
    active_rows: dict[str, np.ndarray] = field(default_factory=dict)   # per weight matrix (B, T) active input lines

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def _as_batch(rasters) -> np.ndarray:
    if isinstance(rasters, SpikeRaster):
        return rasters.data[None]
    arr = np.asarray(rasters)
    return arr[None] if arr.ndim == 2 else arr


def forward(net: NetworkTopology, rasters, source: WeightSource, dtype=np.float64) -> ForwardResult:
    """Simulate ``net`` on a batch of rasters (B, T, C) or a single :class:`SpikeRaster`."""
    x = _as_batch(rasters)
    B, T, C = x.shape
    if C != net.input_dim:
        raise ConfigError(f"raster has {C} channels, network expects {net.input_dim}")
    shapes = net.weight_shapes()
    weights = {k: np.asarray(v, dtype=dtype) for k, v in source.batch(B).items()}
    for k, shp in shapes.items():
        if k not in weights or weights[k].shape[-2:] != shp:
            raise ConfigError(f"weight {k!r} missing or not of shape {shp}")

    states = [LayerState.zeros(B, p, dtype) for p, _ in net.hidden]
    decays = [p.decays(net.dt) for p, _ in net.hidden]
    a_out, b_out = net.readout_params.decays(net.dt)
    i_out = np.zeros((B, net.output_dim), dtype)
    v_out = np.zeros((B, net.output_dim), dtype)
    trace = np.empty((B, T, net.output_dim), dtype)
    counts = [np.zeros((B, p.n)) for p, _ in net.hidden]
    active = {k: np.zeros((B, T), np.int32) for k in shapes}

    xf = x.astype(dtype)
    first, _ = net.hidden[0]
    pre_drive = None
    if not source.per_timestep and not first.per_synapse:
        W0 = weights["W0"]
        pre_drive = xf @ W0 if W0.ndim == 2 else np.matmul(xf, W0)

    for t in range(T):
        if source.per_timestep and t > 0:
            weights = {k: np.asarray(v, dtype=dtype) for k, v in source.batch(B).items()}
        s = xf[:, t]
        for l, (p, rec) in enumerate(net.hidden):
            active[f"W{l}"][:, t] = (s > 0).sum(axis=1)
            if rec:
                active[f"R{l}"][:, t] = (states[l].spikes > 0).sum(axis=1)
            drive = pre_drive[:, t] if (l == 0 and pre_drive is not None) else None
            states[l], s = layer_step(states[l], p, s, weights[f"W{l}"], weights.get(f"R{l}") if rec else None,
                                      net.dt, drive=drive, decays=decays[l])
            counts[l] += s
        active["Wout"][:, t] = (s > 0).sum(axis=1)
        i_out = a_out * i_out + _project(s, weights["Wout"])
        v_out = b_out * v_out + (1.0 - b_out) * i_out
        trace[:, t] = v_out
    if not np.isfinite(trace).all():
        raise NumericalFault("non-finite readout trace")
    logits = trace.sum(axis=1) if net.readout == "leaky-integrator-sum" else trace.max(axis=1)
    return ForwardResult(trace, logits, counts, active)


def predict(net: NetworkTopology, rasters: np.ndarray, source: WeightSource, batch_size: int = 256,
            dtype=np.float64) -> np.ndarray:
    """Predicted labels for a stack of rasters, evaluated in batches."""
    out = []
    for i in range(0, len(rasters), batch_size):
        out.append(forward(net, rasters[i:i + batch_size], source, dtype).predictions)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------------------- construction

def build_topology(input_dim: int, output_dim: int, hidden_sizes=(128,), recurrent=False, *,
                   heterogeneity=None, dt: float = 1e-3, v_th: float = 1.0, reset: str = "subtract",
                   refractory_steps: int = 0, mean_tau_mem: float = 20e-3, mean_tau_syn: float = 10e-3,
                   readout: str = "leaky-integrator-sum") -> NetworkTopology:
    """Topology with homogeneous taus, or taus sampled from ``heterogeneity`` when given.

    ``recurrent`` may be a bool (applies to every hidden layer) or a sequence of flags.
    """
    from .heterogeneity import sample_time_constants

    flags = [recurrent] * len(hidden_sizes) if isinstance(recurrent, bool) else list(recurrent)

    def taus(kind, n, stream):
        if heterogeneity is None:
            return np.full(n, mean_tau_mem if kind.endswith("membrane") else mean_tau_syn)
        return sample_time_constants(heterogeneity, n, kind, stream)

    hidden = []
    for l, n in enumerate(hidden_sizes):
        p = LifLayerParams(n, taus("membrane", n, l), taus("synapse", n, l), v_th, reset, refractory_steps)
        hidden.append((p, bool(flags[l])))
    ro = ReadoutParams(output_dim, taus("readout-membrane", output_dim, 0), taus("readout-synapse", output_dim, 0))
    return NetworkTopology(input_dim, hidden, ro, dt, readout)


def init_weights(net: NetworkTopology, seed: int, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Uniform fan-in scaled initialization, deterministic in ``seed``."""
    out = {}
    for name, (n_in, n_out) in net.weight_shapes().items():
        rng = make_rng(seed, "init", name)
        bound = scale / np.sqrt(n_in)
        if name.startswith("R"):
            bound *= 0.5
        out[name] = rng.uniform(-bound, bound, size=(n_in, n_out))
    return out
