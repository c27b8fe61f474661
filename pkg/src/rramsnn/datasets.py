"""Spike-encoded benchmark datasets.

* MNIST: rate (Bernoulli) coding of pixel intensities.
* ECG: per-beat windows, delta-modulated into up/down spike channels per lead.
* ``synth_temporal``: classes that differ only in spike timing, a desk-scale
  stand-in for spoken-digit event data.

Loaders read local files only; nothing is downloaded.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .seeding import make_rng
from .snn import SpikeRaster

CACHE_VERSION = 1
ECG_FORMAT = ("one beat per row: label,x0,x1,...,xN (first row may be a header); "
              "with n leads the N+1 samples are the leads concatenated in equal segments")


def data_dir() -> Path:
    env = os.environ.get("RRAMSNN_DATA")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


@dataclass
class EncodedDataset:
    name: str
    train: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    n_classes: int
    dt: float = 1e-3
    encoding: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {x.shape[1:] for x, _ in (self.train, self.test) if len(x)}
        if len(shapes) > 1:
            raise ConfigError(f"{self.name}: splits disagree on raster shape {shapes}")
        for x, y in (self.train, self.test):
            if len(x) != len(y):
                raise ConfigError(f"{self.name}: rasters and labels differ in length")
            if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
                raise ConfigError(f"{self.name}: labels outside 0..{self.n_classes - 1}")

    @property
    def timesteps(self) -> int:
        return self.train[0].shape[1]

    @property
    def channels(self) -> int:
        return self.train[0].shape[2]

    def samples(self, split: str = "train"):
        x, y = getattr(self, split)
        for r, lab in zip(x, y):
            yield SpikeRaster(r, self.dt), int(lab)

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "EncodedDataset":
        xtr, ytr = self.train
        xte, yte = self.test
        return EncodedDataset(self.name, (xtr[:n_train], ytr[:n_train]), (xte[:n_test], yte[:n_test]),
                              self.n_classes, self.dt, dict(self.encoding))


# --------------------------------------------------------------------------- encoders

def encode_rate(images: np.ndarray, T: int, dt: float = 1e-3, max_rate: float = 100.0, seed: int = 0) -> np.ndarray:
    """Bernoulli rate code: each step a pixel fires with probability ``pixel * max_rate * dt``.

    ``images`` is (N, P) or (P,) with values in [0, 1]; returns uint8 (N, T, P).
    """
    img = np.asarray(images, dtype=np.float64)
    single = img.ndim == 1
    img = np.atleast_2d(img)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ConfigError("pixel values must lie in [0, 1]")
    if max_rate * dt > 1:
        raise ConfigError(f"max_rate * dt = {max_rate * dt} exceeds 1 (spike probability > 1)")
    p = img * (max_rate * dt)
    rng = make_rng(seed, "rate-code")
    out = np.empty((len(img), T, img.shape[1]), dtype=np.uint8)
    for i in range(len(img)):
        out[i] = rng.random((T, img.shape[1])) < p[i]
    return out[0] if single else out


def delta_modulate(signal: np.ndarray, threshold: float) -> np.ndarray:
    """Up/down spike channels: one event each time the signal moves ``threshold`` from the tracker.

    The tracker starts at zero and moves by at most one threshold per step.
    ``signal`` is (T,) or (T, leads); output is (T, 2 * leads) uint8.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if threshold <= 0:
        raise ConfigError("delta-modulation threshold must be positive")
    T, L = x.shape
    out = np.zeros((T, 2 * L), dtype=np.uint8)
    ref = np.zeros(L)
    for t in range(T):
        up = x[t] - ref >= threshold
        down = ref - x[t] >= threshold
        out[t, 0::2] = up
        out[t, 1::2] = down
        ref = ref + threshold * (up.astype(float) - down)
    return out


# --------------------------------------------------------------------------- MNIST

def _read_mnist_arrays(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]:
    with np.load(path) as z:
        if "x_train" in z.files:
            return (z["x_train"].reshape(len(z["x_train"]), -1), z["y_train"],
                    z["x_test"].reshape(len(z["x_test"]), -1), z["y_test"])
        if "images" in z.files:
            return z["images"].reshape(len(z["images"]), -1), z["labels"], None, None
    raise ConfigError(f"{path}: expected arrays (x_train, y_train, x_test, y_test) or (images, labels)")


def load_mnist(path=None, *, n_train: int | None = None, n_test: int | None = None, T: int = 25,
               dt: float = 1e-3, max_rate: float = 200.0, seed: int = 0, test_fraction: float = 0.2) -> EncodedDataset:
    """Rate-coded MNIST.

    ``path`` is an ``.npz`` holding either the standard train/test split or a
    single ``images``/``labels`` pool (split here by a seeded permutation).
    Defaults to the full set ``mnist.npz`` in the data directory when present,
    otherwise the bundled 10k subset ``mnist10k.npz``.
    """
    if path is None:
        full = data_dir() / "mnist.npz"
        path = full if full.exists() else data_dir() / "mnist10k.npz"
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"MNIST file {path} not found; provide an .npz with x_train/y_train/x_test/y_test "
                          "or images/labels (uint8 pixels)")
    xtr, ytr, xte, yte = _read_mnist_arrays(path)
    if xte is None:
        perm = make_rng(seed, "mnist-split").permutation(len(xtr))
        n_te = int(round(test_fraction * len(xtr)))
        te, tr = perm[:n_te], perm[n_te:]
        xtr, ytr, xte, yte = xtr[tr], ytr[tr], xtr[te], ytr[te]
    xtr, ytr, xte, yte = xtr[:n_train], ytr[:n_train], xte[:n_test], yte[:n_test]
    scale = 255.0 if xtr.dtype == np.uint8 or xtr.max() > 1 else 1.0
    enc = lambda x, split: encode_rate(x / scale, T, dt, max_rate, seed=seed * 1000 + split)  # noqa: E731
    return EncodedDataset("mnist", (enc(xtr, 1), ytr.astype(np.int64)), (enc(xte, 2), yte.astype(np.int64)), 10, dt,
                          {"kind": "rate", "T": T, "max_rate": max_rate, "seed": seed, "source": path.name})


# --------------------------------------------------------------------------- ECG

def load_ecg(path, classes: int = 5, *, threshold: float = 0.1, leads: int = 1, dt: float = 1e-3,
             test_fraction: float = 0.2, seed: int = 0) -> EncodedDataset:
    """Beat-window CSV export -> delta-modulated spikes, keeping the ``classes`` most frequent labels.

    Labels are re-indexed 0..classes-1 by decreasing frequency (ties by label text).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"ECG beat file {path} not found; expected CSV with {ECG_FORMAT}")
    labels, beats = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                if i == 0:
                    continue
                raise ConfigError(f"{path}:{i + 1}: non-numeric sample; expected {ECG_FORMAT}") from None
            labels.append(row[0].strip())
            beats.append(vals)
    if not beats or len({len(b) for b in beats}) != 1:
        raise ConfigError(f"{path}: beats missing or of unequal length; expected {ECG_FORMAT}")
    counts = Counter(labels)
    if len(counts) < classes:
        raise ConfigError(f"{path}: only {len(counts)} labels present, {classes} requested")
    keep = [lab for lab, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:classes]]
    index = {lab: k for k, lab in enumerate(keep)}
    sel = [i for i, lab in enumerate(labels) if lab in index]
    X = np.asarray([beats[i] for i in sel])
    y = np.asarray([index[labels[i]] for i in sel], dtype=np.int64)
    if X.shape[1] % leads:
        raise ConfigError(f"{path}: {X.shape[1]} samples do not split into {leads} leads")
    X = X.reshape(len(X), leads, -1).transpose(0, 2, 1)
    rasters = np.stack([delta_modulate(b, threshold) for b in X])
    perm = make_rng(seed, "ecg-split").permutation(len(y))
    n_te = int(round(test_fraction * len(y)))
    te, tr = np.sort(perm[:n_te]), np.sort(perm[n_te:])
    return EncodedDataset("ecg", (rasters[tr], y[tr]), (rasters[te], y[te]), classes, dt,
                          {"kind": "delta", "threshold": threshold, "leads": leads, "labels": keep})


def synth_ecg_beats(n_per_class: int, freqs=(3.0, 7.0), length: int = 100, noise: float = 0.0,
                    seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sinusoidal 'beats' of distinct frequencies (cycles per window), for loader tests."""
    rng = make_rng(seed, "synth-ecg")
    t = np.arange(length) / length
    X, y = [], []
    for k, f in enumerate(freqs):
        for _ in range(n_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            X.append(np.sin(2 * np.pi * f * t + phase) + noise * rng.standard_normal(length))
            y.append(k)
    return np.asarray(X), np.asarray(y)


# --------------------------------------------------------------------------- synthetic temporal task

def _place(times: np.ndarray, T: int) -> np.ndarray:
    """Map spike times of one channel to distinct bins in [0, T), moving collisions to the nearest free bin."""
    taken = np.zeros(T, bool)
    out = []
    for t in np.clip(np.rint(times).astype(int), 0, T - 1):
        if taken[t]:
            free = np.flatnonzero(~taken)
            t = free[np.argmin(np.abs(free - t) * 2 + (free < t))]
        taken[t] = True
        out.append(t)
    return np.asarray(out, dtype=int)


def synth_temporal(classes: int = 10, T: int = 50, C: int = 40, jitter: float = 2.0, seed: int = 0, *,
                   n_train: int = 1000, n_test: int = 500, spikes_per_channel: int = 2,
                   dt: float = 1e-3) -> EncodedDataset:
    """Classes distinguished only by spike timing.

    Each class is a fixed template where every channel emits exactly
    ``spikes_per_channel`` spikes at random times.  Samples jitter each spike
    by a Gaussian of std ``jitter`` steps; colliding spikes are moved to the
    nearest free bin so per-channel counts stay exactly equal across classes.
    """
    if classes < 2:
        raise ConfigError("synth_temporal needs at least 2 classes")
    if spikes_per_channel > T:
        raise ConfigError("more spikes per channel than time steps")
    rng = make_rng(seed, "synth-templates")
    templates = np.stack([np.stack([np.sort(rng.choice(T, spikes_per_channel, replace=False)) for _ in range(C)])
                          for _ in range(classes)])  # (classes, C, k)

    def draw(n, split):
        r = make_rng(seed, "synth-samples", split)
        y = np.arange(n) % classes
        r.shuffle(y)
        x = np.zeros((n, T, C), dtype=np.uint8)
        for i, lab in enumerate(y):
            for c in range(C):
                times = templates[lab, c] + (jitter * r.standard_normal(spikes_per_channel) if jitter else 0)
                x[i, _place(times, T), c] = 1
        return x, y.astype(np.int64)

    return EncodedDataset("synth_temporal", draw(n_train, "train"), draw(n_test, "test"), classes, dt,
                          {"kind": "synth_temporal", "T": T, "C": C, "jitter": jitter, "seed": seed,
                           "spikes_per_channel": spikes_per_channel})


def rate_baseline_accuracy(dataset: EncodedDataset) -> float:
    """Test accuracy of a logistic regression on per-channel spike counts."""
    from sklearn.linear_model import LogisticRegression

    xtr, ytr = dataset.train
    xte, yte = dataset.test
    ftr, fte = xtr.sum(axis=1), xte.sum(axis=1)
    if np.all(ftr == ftr[0]):
        # identical features for every sample: the best any classifier can do is the majority class
        return float(np.mean(yte == np.bincount(ytr).argmax()))
    clf = LogisticRegression(max_iter=2000).fit(ftr, ytr)
    return float(clf.score(fte, yte))


# --------------------------------------------------------------------------- SHD hook

def load_shd(path, *, T: int = 100, duration: float = 1.0, channels: int = 700, split: str = "train") -> tuple:
    """Bin a Spiking Heidelberg Digits HDF5 file (spikes/times, spikes/units, labels) into rasters.

    Returns ``(x, y)``; pair a train and a test file into an :class:`EncodedDataset`.
    """
    import h5py

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"SHD file {path} not found (expects the published HDF5 layout)")
    with h5py.File(path, "r") as f:
        times, units, labels = f["spikes"]["times"], f["spikes"]["units"], np.asarray(f["labels"])
        x = np.zeros((len(labels), T, channels), dtype=np.uint8)
        for i in range(len(labels)):
            bins = np.minimum((np.asarray(times[i]) / duration * T).astype(int), T - 1)
            x[i, bins, np.asarray(units[i]).astype(int)] = 1
    return x, labels.astype(np.int64)


# --------------------------------------------------------------------------- cache

def cached(builder, name: str, params: dict, cache_dir=None) -> EncodedDataset:
    """Build a dataset once and reuse it from ``cache_dir`` keyed by a manifest of its parameters."""
    cache_dir = Path(cache_dir) if cache_dir else data_dir() / "cache"
    key = hashlib.sha256(json.dumps({"name": name, "params": params, "v": CACHE_VERSION},
                                    sort_keys=True).encode()).hexdigest()[:16]
    npz = cache_dir / f"{name}-{key}.npz"
    manifest = cache_dir / f"{name}-{key}.json"
    if npz.exists() and manifest.exists():
        meta = json.loads(manifest.read_text())
        with np.load(npz) as z:
            return EncodedDataset(meta["name"], (z["xtr"], z["ytr"]), (z["xte"], z["yte"]), meta["n_classes"],
                                  meta["dt"], meta["encoding"])
    ds = builder(**params)
    cache_dir.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(npz, xtr=ds.train[0], ytr=ds.train[1], xte=ds.test[0], yte=ds.test[1])
    manifest.write_text(json.dumps({"version": CACHE_VERSION, "name": ds.name, "params": params,
                                    "n_classes": ds.n_classes, "dt": ds.dt, "encoding": ds.encoding},
                                   sort_keys=True, indent=1))
    return ds
