"""Multilayer-perceptron regressor from measurements to the state vector.

Plain numpy forward/backward passes, Adam, inverted dropout and a
reduce-on-plateau schedule.  Training runs in float32 by default; float64 is
available for gradient checks.
"""
from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .loadgen import substream

log = logging.getLogger(__name__)

try:  # optional fused optimizer kernel
    import numba

    @numba.njit(cache=True)
    def _adam_kernel(p, g, m, v, lr, b1, b2, c1, c2, eps):  # pragma: no cover - compiled
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)
except ImportError:  # pragma: no cover
    _adam_kernel = None


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, lr: float, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:g}")
        self.epoch, self.lr, self.batch = epoch, lr, batch


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4  # relative improvement that resets patience
    min_lr: float = 1e-4
    dropout: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    validation_fraction: float = 0.2
    hidden: tuple[int, ...] = (500, 500, 500, 500, 500)
    seed: int = 0
    dtype: str = "float32"
    std_floor: float = 1e-8

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("learning_rate", "plateau_factor", "beta1", "beta2", "validation_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs <= 0 or self.batch_size <= 0 or self.plateau_patience <= 0:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.min_lr <= 0 or self.min_lr > self.learning_rate:
            raise ValueError("min_lr must lie in (0, learning_rate]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise ValueError(f"unknown train options: {sorted(bad)}")
        return cls(**doc)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)


# -- scaling -------------------------------------------------------------------

def wrap180(a):
    """Map angles (deg) to [-180, 180)."""
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


@dataclass
class Scaler:
    """z-score per feature, with optional angle de-trending.

    Angle columns (``angle_mask``) are shifted by ``angle_ref`` and wrapped
    before scaling, and shifted back after unscaling.
    """

    mean: np.ndarray
    std: np.ndarray
    angle_mask: np.ndarray | None = None
    angle_ref: np.ndarray | None = None

    @classmethod
    def fit(cls, data: np.ndarray, angle_mask=None, angle_ref=None, floor: float = 1e-8) -> "Scaler":
        data = np.asarray(data, dtype=float)
        mask = None if angle_mask is None else np.asarray(angle_mask, bool)
        ref = None
        if mask is not None and mask.any():
            ref = np.zeros(data.shape[1])
            if angle_ref is None:
                # circular mean of the training data
                rad = np.radians(data[:, mask])
                ref[mask] = np.degrees(np.arctan2(np.sin(rad).mean(0), np.cos(rad).mean(0)))
            else:
                ref[mask] = np.asarray(angle_ref, float)[mask] if np.size(angle_ref) == data.shape[1] \
                    else np.asarray(angle_ref, float)
        tmp = cls(np.zeros(data.shape[1]), np.ones(data.shape[1]), mask, ref)
        d = tmp._detrend(data)
        return cls(d.mean(0), np.maximum(d.std(0), floor), mask, ref)

    def _detrend(self, a):
        if self.angle_ref is None:
            return a
        a = np.array(a, dtype=float, copy=True)
        a[..., self.angle_mask] = wrap180(a[..., self.angle_mask] - self.angle_ref[self.angle_mask])
        return a

    def transform(self, a) -> np.ndarray:
        return (self._detrend(np.asarray(a, float)) - self.mean) / self.std

    def inverse(self, s) -> np.ndarray:
        a = np.asarray(s, float) * self.std + self.mean
        if self.angle_ref is not None:
            a[..., self.angle_mask] = wrap180(a[..., self.angle_mask] + self.angle_ref[self.angle_mask])
        return a

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "angle_mask": None if self.angle_mask is None else self.angle_mask.astype(int).tolist(),
                "angle_ref": None if self.angle_ref is None else self.angle_ref.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        mask = None if d.get("angle_mask") is None else np.asarray(d["angle_mask"], bool)
        ref = None if d.get("angle_ref") is None else np.asarray(d["angle_ref"], float)
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), mask, ref)


# -- model ---------------------------------------------------------------------

@dataclass
class MlpModel:
    """Weights ``W[k]`` have shape (fan_in, fan_out); hidden layers use ReLU."""

    W: list[np.ndarray]
    b: list[np.ndarray]
    dropout: float = 0.0
    in_scaler: Scaler | None = None
    out_scaler: Scaler | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.W) != len(self.b) or not self.W:
            raise ValueError("need matching, non-empty W and b lists")
        for k, (w, b) in enumerate(zip(self.W, self.b)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: bad shapes {w.shape}, {b.shape}")
            if k and self.W[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: fan_in {w.shape[0]} != {self.W[k - 1].shape[1]}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.W[0].shape[0]] + [w.shape[1] for w in self.W]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.W], [b.copy() for b in self.b], self.dropout,
                        self.in_scaler, self.out_scaler, dict(self.meta))

    def astype(self, dtype) -> "MlpModel":
        return MlpModel([w.astype(dtype) for w in self.W], [b.astype(dtype) for b in self.b], self.dropout,
                        self.in_scaler, self.out_scaler, dict(self.meta))


def _label_key(label) -> int:
    return zlib.crc32(repr(label).encode())


def init_model(m: int, n: int, seed: int = 0, hidden: Sequence[int] = (500,) * 5, dropout: float = 0.0,
               dtype="float64", out_labels: Sequence | None = None) -> MlpModel:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases.

    With ``out_labels`` each output-layer column is drawn from its own
    stream keyed by its label, so reordering outputs reorders the columns.
    """
    if m <= 0 or n <= 0:
        raise ValueError("m and n must be positive")
    sizes = [m, *hidden, n]
    rng = substream(seed, "init")
    W, b = [], []
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = math.sqrt(2.0 / fi)
        if k == len(sizes) - 2 and out_labels is not None:
            if len(out_labels) != fo:
                raise ValueError("out_labels must match n")
            w = np.stack([substream(seed, "init", _label_key(lab)).standard_normal(fi) for lab in out_labels], 1)
        else:
            w = rng.standard_normal((fi, fo))
        W.append((w * std).astype(dtype))
        b.append(np.zeros(fo, dtype=dtype))
    return MlpModel(W, b, dropout)


def forward(model: MlpModel, z: np.ndarray, train: bool = False, rng: np.random.Generator | None = None,
            masks: Sequence[np.ndarray] | None = None, keep_cache: bool = False):
    """Scaled inputs (B, m) -> scaled outputs (B, n).

    In train mode hidden activations are multiplied by inverted-dropout masks,
    either given in ``masks`` or drawn from ``rng``.  Returns the output, and
    the cache for :func:`backward` when ``keep_cache``.
    """
    a = np.asarray(z, dtype=model.W[0].dtype)
    if a.ndim != 2 or a.shape[1] != model.W[0].shape[0]:
        raise ValueError(f"expected input of width {model.W[0].shape[0]}, got {a.shape}")
    nl = len(model.W)
    acts, used = [a], []
    keep = 1.0 - model.dropout
    for k in range(nl):
        h = a @ model.W[k]
        h += model.b[k]
        if k < nl - 1:
            np.maximum(h, 0, out=h)
            if train and model.dropout > 0:
                if masks is not None:
                    mk = masks[k]
                else:
                    mk = (rng.random(h.shape, dtype=np.float32 if h.dtype == np.float32 else np.float64)
                          < keep).astype(h.dtype) / h.dtype.type(keep)
                h *= mk
                used.append(mk)
            else:
                used.append(None)
        a = h
        acts.append(a)
    if keep_cache:
        return a, (acts, used)
    return a


def backward(model: MlpModel, cache, dy: np.ndarray) -> list[np.ndarray]:
    """Gradients [dW0, db0, dW1, db1, ...] given dLoss/dOutput ``dy``."""
    acts, masks = cache
    nl = len(model.W)
    grads: list[np.ndarray] = [None] * (2 * nl)  # type: ignore[list-item]
    d = dy
    for k in range(nl - 1, -1, -1):
        grads[2 * k] = acts[k].T @ d
        grads[2 * k + 1] = d.sum(axis=0)
        if k:
            d = d @ model.W[k].T
            if masks[k - 1] is not None:
                d *= masks[k - 1]
            d *= acts[k] > 0
    return grads


def mse_gradient(model: MlpModel, z: np.ndarray, x: np.ndarray, masks=None, rng=None):
    """Loss mean((f(z) - x)^2) over batch and outputs, and its parameter gradients.

    Dropout is active only when ``masks`` (or ``rng``) is given.
    """
    train = masks is not None or (rng is not None and model.dropout > 0)
    y, cache = forward(model, z, train=train, rng=rng, masks=masks, keep_cache=True)
    r = y - np.asarray(x, dtype=y.dtype)
    if r.size == 0:
        raise ValueError("empty batch")
    loss = float(np.mean(r * r, dtype=np.float64))
    dy = r * y.dtype.type(2.0 / r.size)
    return loss, backward(model, cache, dy)


# -- optimizer -----------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, fused: bool | None = None):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.fused = (_adam_kernel is not None) if fused is None else (fused and _adam_kernel is not None)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        """In-place update with bias-corrected moments."""
        if len(params) != len(self.m):
            raise ValueError("parameter count changed")
        self.t += 1
        b1, b2, eps = self.beta1, self.beta2, self.eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError("gradient/state shape mismatch")
            if self.fused and p.flags.c_contiguous:
                _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                             m.reshape(-1), v.reshape(-1), lr, b1, b2, c1, c2, eps)
            else:
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a
    relative improvement of ``threshold`` in the monitored loss."""

    def __init__(self, lr: float, factor=0.5, patience=10, min_lr=1e-4, threshold=1e-4):
        self.lr, self.factor, self.patience, self.min_lr, self.threshold = lr, factor, patience, min_lr, threshold
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


# -- training ------------------------------------------------------------------

def _batched_loss(model: MlpModel, z: np.ndarray, x: np.ndarray, chunk: int = 4096) -> float:
    tot = 0.0
    for i in range(0, len(z), chunk):
        r = forward(model, z[i:i + chunk]) - x[i:i + chunk]
        tot += float(np.sum(r.astype(np.float64) ** 2))
    return tot / x.size


def train(z: np.ndarray, x: np.ndarray, cfg: TrainConfig | None = None, in_angle_mask=None, out_angle_mask=None,
          out_angle_ref=None, out_labels: Sequence | None = None, meta: dict | None = None,
          progress: bool = False) -> tuple[MlpModel, TrainHistory]:
    """Fit the regressor on (z, x) pairs.

    Scalers are fitted on the training split only.  Returns the weights with
    the best validation loss and the per-epoch history.
    """
    cfg = cfg or TrainConfig()
    z = np.asarray(z, float)
    x = np.asarray(x, float)
    if z.ndim != 2 or x.ndim != 2 or len(z) != len(x):
        raise ValueError("z and x must be 2-D with equal sample counts")
    S = len(z)
    n_val = int(round(S * cfg.validation_fraction))
    n_tr = S - n_val
    if n_tr < cfg.batch_size or n_val < 1:
        raise ValueError("dataset too small for the batch size and validation split")
    perm = substream(cfg.seed, "shuffle", 0).permutation(S)
    tr, va = np.sort(perm[:n_tr]), np.sort(perm[n_tr:])
    dt = np.dtype(cfg.dtype)
    sin = Scaler.fit(z[tr], in_angle_mask, None, cfg.std_floor)
    sout = Scaler.fit(x[tr], out_angle_mask, out_angle_ref, cfg.std_floor)
    zt, xt = sin.transform(z[tr]).astype(dt), sout.transform(x[tr]).astype(dt)
    zv, xv = sin.transform(z[va]).astype(dt), sout.transform(x[va]).astype(dt)

    model = init_model(z.shape[1], x.shape[1], cfg.seed, cfg.hidden, cfg.dropout, dt, out_labels)
    model.in_scaler, model.out_scaler = sin, sout
    model.meta = dict(meta or {}, seed=cfg.seed, train_config=_cfg_dict(cfg))
    params = model.params
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauSchedule(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr,
                            cfg.plateau_threshold)
    drop_rng = substream(cfg.seed, "dropout")
    hist = TrainHistory()
    best_val, best = _batched_loss(model, zv, xv), model.copy()
    B = cfg.batch_size
    for ep in range(cfg.epochs):
        lr = sched.lr
        order = substream(cfg.seed, "shuffle", ep + 1).permutation(n_tr)
        tot = 0.0
        nb = 0
        for bi, i in enumerate(range(0, n_tr, B)):
            idx = order[i:i + B]
            loss, grads = mse_gradient(model, zt[idx], xt[idx], rng=drop_rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(ep, lr, bi)
            opt.step(params, grads, lr)
            tot += loss
            nb += 1
        val = _batched_loss(model, zv, xv)
        if not math.isfinite(val):
            raise TrainingDivergedError(ep, lr, -1)
        hist.train_loss.append(tot / nb)
        hist.val_loss.append(val)
        hist.lr.append(lr)
        if val < best_val:
            best_val, best = val, model.copy()
            hist.best_epoch = ep
        sched.update(val)
        if progress:
            log.info("epoch %d train %.3e val %.3e lr %.2e", ep, tot / nb, val, lr)
    best.meta["best_val_loss"] = best_val
    best.meta["best_epoch"] = hist.best_epoch
    return best, hist


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d


def predict(model: MlpModel, z: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Raw measurements (S, m) -> unscaled estimates (S, n)."""
    z = np.atleast_2d(np.asarray(z, float))
    if z.shape[1] != model.layer_sizes[0]:
        raise ValueError(f"expected {model.layer_sizes[0]} features, got {z.shape[1]}")
    zs = model.in_scaler.transform(z) if model.in_scaler else z
    out = np.empty((len(z), model.layer_sizes[-1]))
    for i in range(0, len(z), chunk):
        out[i:i + chunk] = forward(model, zs[i:i + chunk])
    return model.out_scaler.inverse(out) if model.out_scaler else out


# -- persistence -----------------------------------------------------------------

def save_model(path, model: MlpModel) -> None:
    doc = {
        "layer_sizes": model.layer_sizes,
        "dtype": str(model.W[0].dtype),
        "W": [w.ravel().tolist() for w in model.W],
        "b": [b.tolist() for b in model.b],
        "dropout": model.dropout,
        "in_scaler": model.in_scaler.to_dict() if model.in_scaler else None,
        "out_scaler": model.out_scaler.to_dict() if model.out_scaler else None,
        "meta": model.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> MlpModel:
    with open(path) as fh:
        doc = json.load(fh)
    sizes = doc["layer_sizes"]
    dt = np.dtype(doc.get("dtype", "float64"))
    W = [np.asarray(w, dtype=dt).reshape(fi, fo) for w, fi, fo in zip(doc["W"], sizes[:-1], sizes[1:])]
    b = [np.asarray(v, dtype=dt) for v in doc["b"]]
    return MlpModel(W, b, doc.get("dropout", 0.0),
                    Scaler.from_dict(doc["in_scaler"]) if doc.get("in_scaler") else None,
                    Scaler.from_dict(doc["out_scaler"]) if doc.get("out_scaler") else None,
                    doc.get("meta", {}))
