"""Binary normal vs pseudo-abnormal classifiers on reconstruction differences.

Five conv stages (32, 32, 16, 32, 64 filters, each with 2x2 max-pool), the
frozen encoder's latent summed in after the third stage, then a fully
connected layer and softmax over (pseudo-abnormal, normal).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aed import tensor as T
from aed.cae import in_channels
from aed.tensor import Params, ShapeError

CLAMP = 1e-7
DIFF_MODES = ("absolute", "signed")


@dataclass(frozen=True)
class ClfHyper:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64


@dataclass
class ClfParams:
    stream: str
    params: Params
    diff_mode: str = "absolute"
    input_size: int = 64
    widths: tuple[int, ...] = (32, 32, 16, 32, 64)

    @property
    def channels(self) -> int:
        return in_channels(self.stream)


def init_clf(stream: str, seed: int, diff_mode: str = "absolute", input_size: int = 64,
             widths: tuple[int, ...] = (32, 32, 16, 32, 64)) -> ClfParams:
    """Glorot-uniform conv kernels; the fully connected head starts at zero."""
    if diff_mode not in DIFF_MODES:
        raise ValueError(f"diff_mode must be one of {DIFF_MODES}, got {diff_mode!r}")
    if input_size % 32:
        raise ValueError(f"classifier input size must be divisible by 32, got {input_size}")
    rng = np.random.default_rng(seed)
    c = in_channels(stream)
    tensors = {}
    prev = c
    for i, w in enumerate(widths, start=1):
        tensors[f"conv{i}.w"] = T.glorot_uniform(rng, (3, 3, prev, w))
        tensors[f"conv{i}.b"] = np.zeros(w)
        prev = w
    side = input_size // 32
    tensors["fc.w"] = np.zeros((side * side * prev, 2))
    tensors["fc.b"] = np.zeros(2)
    return ClfParams(stream, Params(tensors), diff_mode, input_size, tuple(widths))


def classifier_input(x: np.ndarray, recon: np.ndarray, mode: str = "absolute") -> np.ndarray:
    if mode == "absolute":
        return np.abs(x - recon)
    if mode == "signed":
        return x - recon
    raise ValueError(f"unknown difference mode {mode!r}")


def _check(cp: ClfParams, diff, latent):
    diff = np.asarray(diff, dtype=T.DTYPE)
    latent = np.asarray(latent, dtype=T.DTYPE)
    single = diff.ndim == 3
    if single:
        diff, latent = diff[None], latent[None]
    s = cp.input_size
    if diff.ndim != 4 or diff.shape[1:] != (s, s, cp.channels):
        raise ShapeError(f"{cp.stream} classifier expects diff items {(s, s, cp.channels)}, got {diff.shape}")
    want = (diff.shape[0], s // 8, s // 8, cp.widths[2])
    if latent.shape != want:
        raise ShapeError(f"latent must have shape {want[1:]}, got {latent.shape[1:]}")
    return diff, latent, single


def _forward(p: dict, diff: np.ndarray, latent: np.ndarray):
    cache = {}
    h = diff
    for i in range(1, 6):
        z = T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        pooled, idx = T.maxpool2d(T.relu(z))
        cache[f"in{i}"], cache[f"z{i}"], cache[f"idx{i}"] = h, z, idx
        h = pooled + latent if i == 3 else pooled
    flat = h.reshape(h.shape[0], -1)
    logits = T.dense(flat, p["fc.w"], p["fc.b"])
    cache["flat"], cache["shape5"] = flat, h.shape
    return T.softmax(logits), cache


def clf_forward(cp: ClfParams, diff, latent) -> np.ndarray:
    """(p_pseudo_abnormal, p_normal) per item."""
    d, lat, single = _check(cp, diff, latent)
    probs, _ = _forward(cp.params.tensors, d, lat)
    return probs[0] if single else probs


def clf_loss(y, y_hat) -> np.ndarray:
    """Binary cross-entropy of the normality probability (normal is y=1)."""
    q = np.clip(y_hat, CLAMP, 1.0 - CLAMP)
    return -(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))


def clf_gradients(cp: ClfParams, diff, latent, y):
    """Mean-loss gradients for every classifier parameter."""
    p = cp.params.tensors
    d, lat, _ = _check(cp, diff, latent)
    y = np.asarray(y, dtype=T.DTYPE).reshape(-1)
    probs, cache = _forward(p, d, lat)
    y_hat = probs[:, 1]
    loss = float(np.mean(clf_loss(y, y_hat)))
    if not np.isfinite(loss):
        raise FloatingPointError(f"{cp.stream} classifier: non-finite loss")
    inside = (y_hat > CLAMP) & (y_hat < 1.0 - CLAMP)
    q = np.clip(y_hat, CLAMP, 1.0 - CLAMP)
    g_yhat = inside * (-y / q + (1.0 - y) / (1.0 - q)) / len(y)
    g_probs = np.zeros_like(probs)
    g_probs[:, 1] = g_yhat
    g_logits = T.softmax_backward(probs, g_probs)
    grads = {}
    g_flat, grads["fc.w"], grads["fc.b"] = T.dense_backward(cache["flat"], p["fc.w"], g_logits)
    g = g_flat.reshape(cache["shape5"])
    for i in range(5, 0, -1):
        ga = T.maxpool2d_backward(g, cache[f"idx{i}"])
        gz = T.relu_backward(cache[f"z{i}"], ga)
        g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = T.conv2d_backward(
            cache[f"in{i}"], p[f"conv{i}.w"], gz, need_input_grad=i > 1)
    return grads, loss


def clf_train_step(cp: ClfParams, diff, latent, y, hyper: ClfHyper) -> tuple[ClfParams, float]:
    """One Adam step on the mean cross-entropy, in place."""
    grads, loss = clf_gradients(cp, diff, latent, y)
    cp.params.apply(grads, hyper.lr)
    return cp, loss


def normality(cp: ClfParams, x, recon, latent) -> np.ndarray:
    """Normality score (probability of the normal class) for raw inputs."""
    probs = clf_forward(cp, classifier_input(x, recon, cp.diff_mode), latent)
    return probs[..., 1]
