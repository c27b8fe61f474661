"""Off-chip surrogate-gradient training (full BPTT) on a fixed neuron substrate.

The trainer unrolls the LIF network of :mod:`rramsnn.snn` over time, keeps
every per-step membrane value, and back-propagates the cross-entropy of the
time-summed readout.  The spike nonlinearity is a Heaviside step in the
forward pass; in the backward pass its derivative is replaced by the
fast-sigmoid surrogate ``1 / (lam * |x| + 1) ** 2``.

In calibrated mode the network is built on time constants sampled once from
the measured heterogeneity distribution; the substrate is frozen into the
computation graph and never updated, so the weights learn to compensate it.

``spike_fn="relaxed"`` swaps the Heaviside for the smooth function
``x / (1 + lam * |x|) + 1 / lam``, whose exact derivative is the surrogate.
Finite differences of that relaxed model are then a true oracle for
:func:`backward`.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericalFault
from .seeding import make_rng
from .snn import NetworkTopology, LifLayerParams, ReadoutParams, init_weights

log = logging.getLogger(__name__)

MODES = ("NHC", "non_calibrated", "homogeneous")
CHECKPOINT_VERSION = 1


def surrogate_grad(x, lam: float = 10.0):
    """Fast-sigmoid surrogate derivative of the spike step; peak 1 at ``x = 0``."""
    if lam <= 0:
        raise ConfigError("surrogate slope must be positive")
    return 1.0 / (lam * np.abs(x) + 1.0) ** 2


def relaxed_spike(x, lam: float = 10.0):
    return x / (1.0 + lam * np.abs(x)) + 1.0 / lam


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "NHC"
    surrogate: str = "fast-sigmoid"
    surrogate_slope: float = 10.0
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    l2: float = 0.0
    bptt_full: bool = True
    quant_aware: bool = False
    quant_aware_epochs: int = 2
    detach_reset: bool = True
    init_scale: float = 1.0
    divergence_factor: float = 10.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.surrogate != "fast-sigmoid":
            raise ConfigError("only the fast-sigmoid surrogate is implemented")
        if not (self.learning_rate > 0 and self.surrogate_slope > 0 and self.epochs >= 1 and self.batch_size >= 1):
            raise ConfigError("learning_rate, surrogate_slope must be > 0; epochs, batch_size >= 1")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.bptt_full:
            raise ConfigError("only full (untruncated) BPTT is implemented")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def substrate_hash(net: NetworkTopology) -> str:
    h = hashlib.sha256()
    for k, v in sorted(net.substrate().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class TrainRun:
    config: TrainingConfig
    topology: NetworkTopology
    weights: dict[str, np.ndarray]
    metrics: list[dict] = field(default_factory=list)
    frozen_mask: dict[str, np.ndarray] = field(default_factory=dict)
    frozen_values: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def effective_weights(self) -> dict[str, np.ndarray]:
        """Trainable weights with any frozen (faulted) entries substituted."""
        out = {}
        for k, w in self.weights.items():
            if k in self.frozen_mask:
                w = np.where(self.frozen_mask[k], self.frozen_values[k], w)
            out[k] = w
        return out

    def log_metric(self, **rec) -> None:
        self.metrics.append(dict(rec))


def new_run(config: TrainingConfig, topology: NetworkTopology) -> TrainRun:
    weights = init_weights(topology, config.seed, config.init_scale)
    return TrainRun(config, topology, weights, meta={"substrate_hash": substrate_hash(topology)})


# --------------------------------------------------------------------------- forward / backward

@dataclass
class Tape:
    """Per-step quantities kept by the recording forward pass."""

    inputs: list[np.ndarray]          # per hidden layer: its input spikes (B, T, n_in)
    u: list[np.ndarray]               # pre-reset membrane (B, T, n)
    s: list[np.ndarray]               # spikes (B, T, n)
    refr: list[np.ndarray | None]     # refractory masks (B, T, n) or None
    readout_in: np.ndarray            # (B, T, n_last)
    trace: np.ndarray                 # (B, T, n_out)
    logits: np.ndarray                # (B, n_out)


def record_forward(net: NetworkTopology, x: np.ndarray, weights: dict[str, np.ndarray], *,
                   spike_fn: str = "hard", lam: float = 10.0, dtype=np.float32) -> Tape:
    """Unrolled forward pass (layer-major) that stores what :func:`backward` needs."""
    if net.readout != "leaky-integrator-sum":
        raise ConfigError("training supports the leaky-integrator-sum readout only")
    B, T, _ = x.shape
    layer_in = x.astype(dtype, copy=False)
    tape = Tape([], [], [], [], None, None, None)
    for l, (p, rec) in enumerate(net.hidden):
        if p.per_synapse:
            raise ConfigError("training supports per-neuron (shared) synaptic time constants only")
        if spike_fn == "relaxed" and p.refractory_steps:
            raise ConfigError("the relaxed model has no refractory period")
        alpha, beta = (a.astype(dtype) for a in p.decays(net.dt))
        W = weights[f"W{l}"].astype(dtype, copy=False)
        R = weights[f"R{l}"].astype(dtype, copy=False) if rec else None
        drive = layer_in @ W
        U = np.empty((B, T, p.n), dtype)
        S = np.empty((B, T, p.n), dtype)
        refr_all = np.zeros((B, T, p.n), bool) if p.refractory_steps else None
        i_syn = np.zeros((B, p.n), dtype)
        v = np.zeros((B, p.n), dtype)
        s = np.zeros((B, p.n), dtype)
        counter = np.zeros((B, p.n), np.int32)
        for t in range(T):
            i_syn = alpha * i_syn + drive[:, t]
            if rec:
                i_syn = i_syn + s @ R
            u = beta * v + (1 - beta) * i_syn
            if spike_fn == "hard":
                s = (u >= p.v_th).astype(dtype)
            else:
                s = relaxed_spike(u - p.v_th, lam).astype(dtype)
            if refr_all is not None:
                refr = counter > 0
                refr_all[:, t] = refr
                s = s * ~refr
                counter = np.where(s > 0, p.refractory_steps, np.maximum(counter - 1, 0))
            v = u - p.v_th * s if p.reset == "subtract" else u * (1 - s)
            if refr_all is not None:
                v = np.where(refr_all[:, t], 0, v).astype(dtype)
            U[:, t] = u
            S[:, t] = s
        if not np.isfinite(U).all():
            raise NumericalFault(f"non-finite membrane potential in hidden layer {l}")
        tape.inputs.append(layer_in)
        tape.u.append(U)
        tape.s.append(S)
        tape.refr.append(refr_all)
        layer_in = S
    a_o, b_o = (a.astype(dtype) for a in net.readout_params.decays(net.dt))
    drive = layer_in @ weights["Wout"].astype(dtype, copy=False)
    trace = np.empty_like(drive)
    i_o = np.zeros((B, net.output_dim), dtype)
    v_o = np.zeros((B, net.output_dim), dtype)
    for t in range(T):
        i_o = a_o * i_o + drive[:, t]
        v_o = b_o * v_o + (1 - b_o) * i_o
        trace[:, t] = v_o
    tape.readout_in = layer_in
    tape.trace = trace
    tape.logits = trace.sum(axis=1)
    return tape


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = len(labels)
    loss = -float(logp[np.arange(B), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def loss_value(net, x, labels, weights, *, spike_fn="hard", lam=10.0, l2=0.0, dtype=np.float64) -> float:
    tape = record_forward(net, x, weights, spike_fn=spike_fn, lam=lam, dtype=dtype)
    loss, _ = cross_entropy(tape.logits.astype(np.float64), labels)
    return loss + 0.5 * l2 * sum(float((w.astype(np.float64) ** 2).sum()) for w in weights.values())


def backward(net: NetworkTopology, tape: Tape, labels: np.ndarray, weights: dict[str, np.ndarray], *,
             lam: float = 10.0, detach_reset: bool = True, l2: float = 0.0,
             spike_fn: str = "hard") -> tuple[float, dict[str, np.ndarray]]:
    """Reverse-mode gradients of the loss for every weight matrix.

    Returns ``(loss, grads)``.  With ``spike_fn="hard"`` the spike derivative
    is the surrogate; with ``"relaxed"`` it is the exact derivative of the
    relaxed spike (the same function), so both modes share this code path.
    ``detach_reset`` stops gradients through the spike-triggered reset.
    """
    dtype = tape.trace.dtype
    loss, g_logits = cross_entropy(tape.logits.astype(np.float64), labels)
    g_logits = g_logits.astype(dtype)
    B, T, _ = tape.trace.shape
    grads = {}

    # readout: logits = sum_t v_t ; v_t = b v_{t-1} + (1-b) i_t ; i_t = a i_{t-1} + s_t Wout
    a_o, b_o = (a.astype(dtype) for a in net.readout_params.decays(net.dt))
    g_i = np.empty_like(tape.trace)
    e = np.zeros_like(g_logits)
    h = np.zeros_like(g_logits)
    for t in range(T - 1, -1, -1):
        e = g_logits + b_o * e
        h = (1 - b_o) * e + a_o * h
        g_i[:, t] = h
    Wout = weights["Wout"].astype(dtype, copy=False)
    grads["Wout"] = tape.readout_in.reshape(B * T, -1).T @ g_i.reshape(B * T, -1)
    g_s_above = g_i @ Wout.T

    for l in range(len(net.hidden) - 1, -1, -1):
        p, rec = net.hidden[l]
        alpha, beta = (a.astype(dtype) for a in p.decays(net.dt))
        U, S, refr = tape.u[l], tape.s[l], tape.refr[l]
        W = weights[f"W{l}"].astype(dtype, copy=False)
        R = weights[f"R{l}"].astype(dtype, copy=False) if rec else None
        dspike = surrogate_grad(U - p.v_th, lam).astype(dtype)
        g_I = np.empty_like(U)
        g_u_next = np.zeros((B, p.n), dtype)
        g_I_next = np.zeros((B, p.n), dtype)
        for t in range(T - 1, -1, -1):
            g_v = beta * g_u_next
            keep = 1.0 if refr is None else ~refr[:, t]
            g_s = g_s_above[:, t]
            if rec:
                g_s = g_s + g_I_next @ R.T
            if p.reset == "subtract":
                dv_du = keep
                if not detach_reset:
                    g_s = g_s - p.v_th * g_v * keep
            else:
                dv_du = (1 - S[:, t]) * keep
                if not detach_reset:
                    g_s = g_s - U[:, t] * g_v * keep
            g_u = g_s * dspike[:, t] * keep + g_v * dv_du
            g_Ii = (1 - beta) * g_u + alpha * g_I_next
            g_I[:, t] = g_Ii
            g_u_next, g_I_next = g_u, g_Ii
        flat = g_I.reshape(B * T, -1)
        grads[f"W{l}"] = tape.inputs[l].reshape(B * T, -1).T @ flat
        if rec:
            S_prev = np.concatenate([np.zeros_like(S[:, :1]), S[:, :-1]], axis=1)
            grads[f"R{l}"] = S_prev.reshape(B * T, -1).T @ flat
        if l > 0:
            g_s_above = g_I @ W.T

    if l2:
        for k in grads:
            grads[k] = grads[k] + l2 * weights[k].astype(dtype)
        loss += 0.5 * l2 * sum(float((w.astype(np.float64) ** 2).sum()) for w in weights.values())
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalFault(f"non-finite gradient for {k}")
    return loss, grads


def gradients(net, x, labels, weights, *, lam=10.0, spike_fn="hard", detach_reset=True, l2=0.0, dtype=np.float64):
    tape = record_forward(net, x, weights, spike_fn=spike_fn, lam=lam, dtype=dtype)
    return backward(net, tape, labels, weights, lam=lam, detach_reset=detach_reset, l2=l2, spike_fn=spike_fn)


def check_gradients(net, x, labels, weights, *, lam=10.0, eps=1e-5, floor=1e-3) -> float:
    """Largest elementwise relative error between backward gradients and central differences.

    Both sides use the relaxed spike with gradients through the reset, i.e.
    one smooth function, so the two should agree to finite-difference
    precision.  Error per entry: ``|g - fd| / max(|g|, |fd|, floor * max|g|)``;
    the floor keeps entries many orders below the largest gradient from
    measuring only floating-point cancellation in the differences.
    """
    w64 = {k: np.asarray(v, dtype=np.float64).copy() for k, v in weights.items()}
    _, grads = gradients(net, x, labels, w64, lam=lam, spike_fn="relaxed", detach_reset=False)
    scale = floor * max(float(np.abs(g).max()) for g in grads.values())
    worst = 0.0
    for k, w in w64.items():
        fd = np.empty_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + eps
            up = loss_value(net, x, labels, w64, spike_fn="relaxed", lam=lam)
            w[idx] = orig - eps
            down = loss_value(net, x, labels, w64, spike_fn="relaxed", lam=lam)
            w[idx] = orig
            fd[idx] = (up - down) / (2 * eps)
        err = np.abs(grads[k] - fd) / np.maximum(np.maximum(np.abs(grads[k]), np.abs(fd)), scale + 1e-300)
        worst = max(worst, float(err.max()))
    return worst


# --------------------------------------------------------------------------- optimizers

class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.k = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        self.k += 1
        for n, g in grads.items():
            m = self.m.setdefault(n, np.zeros_like(g))
            v = self.v.setdefault(n, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.k)
            vh = v / (1 - self.b2 ** self.k)
            params[n] -= (self.lr * mh / (np.sqrt(vh) + self.eps)).astype(params[n].dtype)


class SGDMomentum:
    def __init__(self, lr=1e-2, momentum=0.9):
        self.lr, self.mu, self.vel = lr, momentum, {}

    def step(self, params, grads):
        for n, g in grads.items():
            v = self.vel.setdefault(n, np.zeros_like(g))
            v *= self.mu
            v += g
            params[n] -= (self.lr * v).astype(params[n].dtype)


def make_optimizer(cfg: TrainingConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate)
    return SGDMomentum(cfg.learning_rate, cfg.momentum)


# --------------------------------------------------------------------------- training loop

def accuracy(net: NetworkTopology, x: np.ndarray, y: np.ndarray, weights, batch_size=500, dtype=np.float32) -> float:
    """Fraction correct using the training-path forward (hard spikes)."""
    correct = 0
    for i in range(0, len(x), batch_size):
        tape = record_forward(net, x[i:i + batch_size], weights, dtype=dtype)
        correct += int((tape.logits.argmax(1) == y[i:i + batch_size]).sum())
    return correct / max(len(x), 1)


def _quantized_view(weights: dict, scheme) -> dict:
    from .transfer import dequantize, quantize
    return {k: dequantize(*quantize(w, scheme), scheme=scheme).astype(w.dtype) for k, w in weights.items()}


def train(run: TrainRun, dataset, *, epochs: int | None = None, eval_every: int = 1, quant_scheme=None,
          progress=None) -> TrainRun:
    """Train ``run`` in place on ``dataset`` (an :class:`~rramsnn.datasets.EncodedDataset`).

    Appends one metrics record per epoch (train loss/accuracy and, if a test
    split is present, test accuracy).  Frozen (faulted) weights stay fixed.
    Raises :class:`NumericalFault` if the epoch loss exceeds
    ``divergence_factor`` times the initial loss for two consecutive epochs.
    """
    cfg = run.config
    dtype = np.dtype(cfg.dtype)
    net = run.topology
    x_tr, y_tr = dataset.train
    x_te, y_te = dataset.test
    params = {k: np.asarray(w, dtype=dtype).copy() for k, w in run.weights.items()}
    masks = {k: run.frozen_mask[k] for k in run.frozen_mask}
    frozen = {k: run.frozen_values[k].astype(dtype) for k in run.frozen_values}
    opt = make_optimizer(cfg)
    n_epochs = epochs if epochs is not None else cfg.epochs
    start_epoch = len([m for m in run.metrics if m.get("split") == "train"])
    initial_loss = None
    bad_epochs = 0
    if quant_scheme is None and cfg.quant_aware:
        from .transfer import QuantizationScheme
        quant_scheme = QuantizationScheme()

    for ep in range(n_epochs):
        order = make_rng(cfg.seed, "shuffle", start_epoch + ep).permutation(len(x_tr))
        qat = cfg.quant_aware and ep >= n_epochs - cfg.quant_aware_epochs
        losses, correct = [], 0
        for i in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            eff = {k: (np.where(masks[k], frozen[k], w) if k in masks else w) for k, w in params.items()}
            if qat:
                eff = _quantized_view(eff, quant_scheme)
            if initial_loss is None:
                initial_loss = loss_value(net, x_tr[idx], y_tr[idx], eff, lam=cfg.surrogate_slope,
                                          l2=cfg.l2, dtype=dtype)
            tape = record_forward(net, x_tr[idx], eff, lam=cfg.surrogate_slope, dtype=dtype)
            loss, grads = backward(net, tape, y_tr[idx], eff, lam=cfg.surrogate_slope,
                                   detach_reset=cfg.detach_reset, l2=cfg.l2)
            for k in masks:
                grads[k] = np.where(masks[k], 0, grads[k]).astype(dtype)
            opt.step(params, grads)
            losses.append(loss * len(idx))
            correct += int((tape.logits.argmax(1) == y_tr[idx]).sum())
        epoch = start_epoch + ep + 1
        mean_loss = float(np.sum(losses) / len(order))
        run.log_metric(epoch=epoch, split="train", loss=round(mean_loss, 6), accuracy=round(correct / len(order), 6))
        run.weights = {k: w.copy() for k, w in params.items()}
        if len(x_te) and (ep + 1) % eval_every == 0:
            acc = accuracy(net, x_te, y_te, run.effective_weights(), dtype=dtype)
            run.log_metric(epoch=epoch, split="test", accuracy=round(acc, 6))
        if progress:
            progress(run.metrics[-1])
        log.info("epoch %d loss %.4f", epoch, mean_loss)
        if not np.isfinite(mean_loss):
            raise NumericalFault(f"loss became non-finite at epoch {epoch}")
        bad_epochs = bad_epochs + 1 if mean_loss > cfg.divergence_factor * initial_loss else 0
        if bad_epochs >= 2:
            raise NumericalFault(f"training diverged: loss {mean_loss:.3g} > "
                                 f"{cfg.divergence_factor} x initial {initial_loss:.3g} for 2 epochs")
    return run


def retrain_with_faults(run: TrainRun, dataset, frozen_mask: dict, frozen_values: dict, epochs: int,
                        progress=None) -> TrainRun:
    """Continue training with faulted logical weights frozen at their faulted values.

    Returns a new :class:`TrainRun`; the input run is not modified.
    """
    new = TrainRun(run.config, run.topology, {k: w.copy() for k, w in run.weights.items()},
                   [dict(m) for m in run.metrics], {k: np.asarray(m, bool) for k, m in frozen_mask.items()},
                   {k: np.asarray(v) for k, v in frozen_values.items()}, dict(run.meta))
    return train(new, dataset, epochs=epochs, progress=progress)


# --------------------------------------------------------------------------- checkpoints

def topology_to_dict(net: NetworkTopology) -> dict:
    return {"input_dim": net.input_dim, "dt": net.dt, "readout": net.readout,
            "hidden": [{"n": p.n, "recurrent": rec, "v_th": p.v_th, "reset": p.reset,
                        "refractory_steps": p.refractory_steps} for p, rec in net.hidden],
            "output_dim": net.output_dim}


def topology_from_dict(d: dict, taus: dict) -> NetworkTopology:
    hidden = []
    for l, h in enumerate(d["hidden"]):
        p = LifLayerParams(h["n"], taus[f"tau_mem{l}"], taus[f"tau_syn{l}"], h["v_th"], h["reset"],
                           h["refractory_steps"])
        hidden.append((p, h["recurrent"]))
    ro = ReadoutParams(d["output_dim"], taus["tau_mem_out"], taus["tau_syn_out"])
    return NetworkTopology(d["input_dim"], hidden, ro, d["dt"], d["readout"])


def save_checkpoint(run: TrainRun, path, extra: dict | None = None) -> None:
    header = {"version": CHECKPOINT_VERSION, "config": asdict(run.config), "config_hash": run.config.digest(),
              "topology": topology_to_dict(run.topology), "metrics": run.metrics, "meta": run.meta,
              "extra": extra or {}}
    arrays = {f"w_{k}": v for k, v in run.weights.items()}
    arrays.update({f"tau_{k}": v for k, v in run.topology.substrate().items()})
    arrays.update({f"mask_{k}": v for k, v in run.frozen_mask.items()})
    arrays.update({f"frozen_{k}": v for k, v in run.frozen_values.items()})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[TrainRun, dict]:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {header.get('version')}")
        pick = lambda pre: {k[len(pre):]: z[k] for k in z.files if k.startswith(pre)}  # noqa: E731
        weights, taus = pick("w_"), pick("tau_")
        masks, frozen = pick("mask_"), pick("frozen_")
    cfg = TrainingConfig(**header["config"])
    run = TrainRun(cfg, topology_from_dict(header["topology"], taus), weights, header["metrics"],
                   masks, frozen, header["meta"])
    return run, header.get("extra", {})


def with_substrate(run: TrainRun, topology: NetworkTopology) -> TrainRun:
    """The same weights placed on another substrate (e.g. a freshly sampled chip)."""
    return replace(run, topology=topology)
