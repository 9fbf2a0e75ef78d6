"""Convolutional auto-encoders with main, adversarial and segmentation decoders.

Encoder: three (conv 3x3 + ReLU + 2x2 max-pool) stages. Each decoder: three
(2x upsample + conv) stages. The main and adversarial decoders receive the
pre-pool encoder activations by summation; the segmentation decoder gets none.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from aed import tensor as T
from aed.tensor import Params, ShapeError

STREAMS = ("appearance", "motion-backward", "motion-forward")
SEG_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-4
    lam: float = 0.2
    epochs: int = 20
    batch_size: int = 64
    loss_kind: str = "L2"
    # lam == 1 is only admitted as the end point of a sweep
    allow_unit_lambda: bool = False

    def __post_init__(self):
        top_ok = self.lam < 1.0 or (self.allow_unit_lambda and self.lam == 1.0)
        if not (self.lam >= 0.0 and top_ok):
            raise ValueError(f"reversed-gradient weight must lie in [0, 1), got {self.lam}")
        if self.loss_kind not in ("L2", "L1"):
            raise ValueError(f"loss_kind must be L2 or L1, got {self.loss_kind!r}")


def in_channels(stream: str) -> int:
    if stream not in STREAMS:
        raise ValueError(f"unknown stream {stream!r}")
    return 1 if stream == "appearance" else 2


@dataclass
class CaeParams:
    stream: str
    params: Params
    input_size: int = 64
    widths: tuple[int, int, int] = (32, 32, 16)

    @property
    def channels(self) -> int:
        return in_channels(self.stream)

    @property
    def decoders(self) -> tuple[str, ...]:
        return ("dec", "adv", "seg") if self.stream == "appearance" else ("dec", "adv")


def init_cae(stream: str, seed: int, input_size: int = 64,
             widths: tuple[int, int, int] = (32, 32, 16)) -> CaeParams:
    """Glorot-uniform kernels, zero biases."""
    c = in_channels(stream)
    w1, w2, w3 = widths
    if w1 != w2:
        raise ValueError("the first two encoder widths must match for the 64x64 skip sum")
    if input_size % 8:
        raise ValueError(f"input size must be divisible by 8, got {input_size}")
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple[int, ...]] = {
        "enc.conv1": (3, 3, c, w1),
        "enc.conv2": (3, 3, w1, w2),
        "enc.conv3": (3, 3, w2, w3),
    }
    branches = ["dec", "adv"] + (["seg"] if stream == "appearance" else [])
    for br in branches:
        shapes[f"{br}.conv1"] = (3, 3, w3, w3)
        shapes[f"{br}.conv2"] = (3, 3, w3, w2)
        shapes[f"{br}.conv3"] = (3, 3, w2, 1 if br == "seg" else c)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        tensors[f"{name}.w"] = T.glorot_uniform(rng, shape)
        tensors[f"{name}.b"] = np.zeros(shape[-1], dtype=T.DTYPE)
    return CaeParams(stream, Params(tensors), input_size, widths)


def _check_input(cp: CaeParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=T.DTYPE)
    if x.ndim == 3:
        x = x[None]
    expect = (cp.input_size, cp.input_size, cp.channels)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(f"{cp.stream} auto-encoder expects items of shape {expect}, got {x.shape}")
    return x


def encode(p: dict, x: np.ndarray):
    """Returns the latent and a cache holding the skip activations."""
    cache = {"x": x}
    h = x
    for i in (1, 2, 3):
        z = T.conv2d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"])
        a = T.relu(z)
        pooled, idx = T.maxpool2d(a)
        cache[f"in{i}"], cache[f"z{i}"], cache[f"a{i}"], cache[f"idx{i}"] = h, z, a, idx
        h = pooled
    return h, cache


def encode_backward(p: dict, cache: dict, g_latent: np.ndarray, g_skips: dict) -> dict:
    """Backprop into encoder params; ``g_skips[i]`` is the gradient on a_i."""
    grads = {}
    g = g_latent
    for i in (3, 2, 1):
        ga = T.maxpool2d_backward(g, cache[f"idx{i}"])
        if i in g_skips:
            ga = ga + g_skips[i]
        gz = T.relu_backward(cache[f"z{i}"], ga)
        g, grads[f"enc.conv{i}.w"], grads[f"enc.conv{i}.b"] = T.conv2d_backward(
            cache[f"in{i}"], p[f"enc.conv{i}.w"], gz, need_input_grad=i > 1)
    return grads


def decode(p: dict, branch: str, latent: np.ndarray, skips: dict | None):
    """One decoder branch. ``skips`` maps 1..3 to encoder activations a1..a3."""
    cache = {}
    u1 = T.upsample_nearest(latent)
    z1 = T.conv2d(u1, p[f"{branch}.conv1.w"], p[f"{branch}.conv1.b"])
    h1 = T.relu(z1)
    if skips is not None:
        h1 = h1 + skips[3]
    u2 = T.upsample_nearest(h1)
    z2 = T.conv2d(u2, p[f"{branch}.conv2.w"], p[f"{branch}.conv2.b"])
    h2 = T.relu(z2)
    if skips is not None:
        h2 = h2 + skips[2]
    u3 = T.upsample_nearest(h2)
    if skips is not None:
        u3 = u3 + skips[1]
    out = T.conv2d(u3, p[f"{branch}.conv3.w"], p[f"{branch}.conv3.b"])
    cache.update(u1=u1, z1=z1, u2=u2, z2=z2, u3=u3)
    return out, cache


def decode_backward(p: dict, branch: str, cache: dict, g_out: np.ndarray, with_skips: bool):
    """Returns (param grads, grad on latent, grads on skip activations)."""
    grads = {}
    g_skips = {}
    gu3, grads[f"{branch}.conv3.w"], grads[f"{branch}.conv3.b"] = T.conv2d_backward(
        cache["u3"], p[f"{branch}.conv3.w"], g_out)
    if with_skips:
        g_skips[1] = gu3
    gh2 = T.upsample_nearest_backward(gu3)
    if with_skips:
        g_skips[2] = gh2
    gz2 = T.relu_backward(cache["z2"], gh2)
    gu2, grads[f"{branch}.conv2.w"], grads[f"{branch}.conv2.b"] = T.conv2d_backward(
        cache["u2"], p[f"{branch}.conv2.w"], gz2)
    gh1 = T.upsample_nearest_backward(gu2)
    if with_skips:
        g_skips[3] = gh1
    gz1 = T.relu_backward(cache["z1"], gh1)
    gu1, grads[f"{branch}.conv1.w"], grads[f"{branch}.conv1.b"] = T.conv2d_backward(
        cache["u1"], p[f"{branch}.conv1.w"], gz1)
    g_latent = T.upsample_nearest_backward(gu1)
    return grads, g_latent, g_skips


def _skips(cache: dict) -> dict:
    return {1: cache["a1"], 2: cache["a2"], 3: cache["a3"]}


def cae_forward(cp: CaeParams, x: np.ndarray):
    """Latent, main reconstruction, adversarial reconstruction and (appearance
    only) the segmentation map. Batched when ``x`` is 4-D."""
    single = np.ndim(x) == 3
    xb = _check_input(cp, x)
    p = cp.params.tensors
    latent, cache = encode(p, xb)
    skips = _skips(cache)
    main, _ = decode(p, "dec", latent, skips)
    adv, _ = decode(p, "adv", latent, skips)
    seg = None
    if "seg" in cp.decoders:
        seg = T.sigmoid(decode(p, "seg", latent, None)[0])
    if single:
        return latent[0], main[0], adv[0], None if seg is None else seg[0]
    return latent, main, adv, seg


# --- losses -------------------------------------------------------------------

def recon_error(x: np.ndarray, y: np.ndarray, kind: str = "L2") -> float:
    d = np.asarray(y, dtype=T.DTYPE) - np.asarray(x, dtype=T.DTYPE)
    return float(np.mean(d * d) if kind == "L2" else np.mean(np.abs(d)))


def recon_error_grad(x: np.ndarray, y: np.ndarray, kind: str = "L2") -> np.ndarray:
    """Gradient of :func:`recon_error` w.r.t. the reconstruction ``y``."""
    d = y - x
    if kind == "L2":
        return 2.0 * d / d.size
    return np.sign(d) / d.size


def bce(s: np.ndarray, s_hat: np.ndarray) -> float:
    """Mean binary cross-entropy with the prediction clamped away from 0 and 1."""
    q = np.clip(s_hat, SEG_CLAMP, 1.0 - SEG_CLAMP)
    return float(np.mean(-s * np.log(q) - (1.0 - s) * np.log(1.0 - q)))


def bce_grad(s: np.ndarray, s_hat: np.ndarray) -> np.ndarray:
    inside = (s_hat > SEG_CLAMP) & (s_hat < 1.0 - SEG_CLAMP)
    q = np.clip(s_hat, SEG_CLAMP, 1.0 - SEG_CLAMP)
    return inside * (-s / q + (1.0 - s) / (1.0 - q)) / s.size


def loss_motion(x, main, adv, kind: str = "L2") -> tuple[float, float]:
    return recon_error(x, main, kind), recon_error(x, adv, kind)


def loss_appearance(x, main, s, s_hat, adv, kind: str = "L2") -> tuple[float, float]:
    return recon_error(x, main, kind) + bce(s, s_hat), recon_error(x, adv, kind)


# --- training -----------------------------------------------------------------

@dataclass
class Gradients:
    rec: dict[str, np.ndarray]
    adv: dict[str, np.ndarray]
    losses: dict[str, float] = field(default_factory=dict)


def cae_gradients(cp: CaeParams, x_normal: np.ndarray, x_pseudo: np.ndarray,
                  seg_truth: np.ndarray | None = None, kind: str = "L2") -> Gradients:
    """Per-branch gradients: reconstruction loss on the normal batch (main and
    segmentation decoders plus encoder), adversarial loss on the pseudo-abnormal
    batch (adversarial decoder plus encoder)."""
    p = cp.params.tensors
    xn = _check_input(cp, x_normal)
    xa = _check_input(cp, x_pseudo)

    latent, ecache = encode(p, xn)
    main, dcache = decode(p, "dec", latent, _skips(ecache))
    l_main = recon_error(xn, main, kind)
    rec, g_lat, g_sk = decode_backward(p, "dec", dcache, recon_error_grad(xn, main, kind), True)
    losses = {"rec": l_main}
    if cp.stream == "appearance":
        if seg_truth is None:
            raise ValueError("appearance stream needs segmentation masks")
        s = np.asarray(seg_truth, dtype=T.DTYPE).reshape(xn.shape)
        seg_logit, scache = decode(p, "seg", latent, None)
        s_hat = T.sigmoid(seg_logit)
        l_seg = bce(s, s_hat)
        g_logit = T.sigmoid_backward(s_hat, bce_grad(s, s_hat))
        seg_g, g_lat_s, _ = decode_backward(p, "seg", scache, g_logit, False)
        rec.update(seg_g)
        g_lat = g_lat + g_lat_s
        losses["seg"] = l_seg
        losses["rec"] = l_main + l_seg
    rec.update(encode_backward(p, ecache, g_lat, g_sk))

    latent_a, ecache_a = encode(p, xa)
    advout, acache = decode(p, "adv", latent_a, _skips(ecache_a))
    losses["adv"] = recon_error(xa, advout, kind)
    adv, g_lat_a, g_sk_a = decode_backward(p, "adv", acache, recon_error_grad(xa, advout, kind), True)
    adv.update(encode_backward(p, ecache_a, g_lat_a, g_sk_a))
    for name, val in losses.items():
        if not np.isfinite(val):
            raise FloatingPointError(f"{cp.stream}: non-finite {name} loss")
    return Gradients(rec, adv, losses)


def combine_gradients(cp: CaeParams, grads: Gradients, lam: float) -> dict[str, np.ndarray]:
    """Signed combination fed to Adam: descent on the reconstruction loss for the
    main/segmentation decoders and encoder, descent on the adversarial loss for the
    adversarial decoder, and ascent (weight ``lam``) on it for the encoder."""
    out = {}
    for name in cp.params.tensors:
        branch = name.split(".")[0]
        if branch == "enc":
            out[name] = grads.rec[name] - lam * grads.adv[name]
        elif branch == "adv":
            out[name] = grads.adv[name]
        else:
            out[name] = grads.rec[name]
    return out


def cae_train_step(cp: CaeParams, x_normal, x_pseudo, hyper: TrainHyper,
                   seg_truth=None) -> tuple[CaeParams, dict[str, float]]:
    """One adversarial update, in place. Returns the params and the loss report."""
    if len(x_normal) == 0 or len(x_pseudo) == 0:
        raise ValueError("cae_train_step needs non-empty normal and pseudo-abnormal batches")
    grads = cae_gradients(cp, x_normal, x_pseudo, seg_truth, hyper.loss_kind)
    cp.params.apply(combine_gradients(cp, grads, hyper.lam), hyper.lr)
    return cp, grads.losses


# --- inference ----------------------------------------------------------------

class FrozenCae:
    """Encoder plus main decoder only; weights are read-only copies."""

    def __init__(self, stream: str, tensors: dict[str, np.ndarray], input_size: int = 64,
                 widths: tuple[int, int, int] = (32, 32, 16)):
        self.stream = stream
        self.input_size = input_size
        self.widths = tuple(widths)
        self.tensors = {}
        for name, arr in tensors.items():
            if name.split(".")[0] not in ("enc", "dec"):
                raise ValueError(f"frozen auto-encoder cannot hold {name}")
            a = np.array(arr, dtype=T.DTYPE)
            a.flags.writeable = False
            self.tensors[name] = a

    @property
    def channels(self) -> int:
        return in_channels(self.stream)

    def _check(self, x):
        x = np.asarray(x, dtype=T.DTYPE)
        single = x.ndim == 3
        xb = x[None] if single else x
        expect = (self.input_size, self.input_size, self.channels)
        if xb.ndim != 4 or xb.shape[1:] != expect:
            raise ShapeError(f"{self.stream} auto-encoder expects items of shape {expect}, got {x.shape}")
        return xb, single

    def encode(self, x):
        xb, single = self._check(x)
        latent, _ = encode(self.tensors, xb)
        return latent[0] if single else latent

    def reconstruct(self, x):
        """Returns (latent, main reconstruction)."""
        xb, single = self._check(x)
        latent, cache = encode(self.tensors, xb)
        main, _ = decode(self.tensors, "dec", latent, _skips(cache))
        if single:
            return latent[0], main[0]
        return latent, main


def strip_for_inference(cp: CaeParams) -> FrozenCae:
    keep = {k: v for k, v in cp.params.tensors.items() if k.split(".")[0] in ("enc", "dec")}
    return FrozenCae(cp.stream, keep, cp.input_size, cp.widths)
