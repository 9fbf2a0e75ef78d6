"""Layer primitives with exact gradients, plus Adam.

Tensors are plain float64 numpy arrays in channels-last layout. Every
spatial op accepts a single item ``(H, W, C)`` or a batch ``(N, H, W, C)``
and returns the same rank it was given.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

# upper bound on im2col scratch per chunk (elements)
_COLS_BUDGET = 60_000


class ShapeError(ValueError):
    """Raised when an operand violates a shape precondition."""


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _chunks(n: int, per_item: int):
    step = max(1, _COLS_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Patches of a padded batch as a (N*h*w, 9*C) matrix ordered (kh, kw, c).

    Few-channel inputs are gathered channel-major and returned as a transposed
    view; BLAS consumes either layout without a copy.
    """
    n, _, _, c = xp.shape
    if c < 8:
        cols = np.empty((3, 3, c, n, h, w), dtype=DTYPE)
        src = xp.transpose(3, 0, 1, 2)
        for i in range(3):
            for j in range(3):
                cols[i, j] = src[:, :, i:i + h, j:j + w]
        return cols.reshape(9 * c, n * h * w).T
    cols = np.empty((n, h, w, 3, 3, c), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _shift_sum(y: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Sum of the 9 shifted (kh, kw) blocks of ``y`` (n, h+2, w+2, 9*c)."""
    y = y.reshape(y.shape[0], h + 2, w + 2, 3, 3, c)
    out = y[:, 0:h, 0:w, 0, 0, :].copy()
    for i in range(3):
        for j in range(3):
            if i or j:
                out += y[:, i:i + h, j:j + w, i, j, :]
    return out


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _check_conv(x: np.ndarray, kernels: np.ndarray) -> None:
    if kernels.ndim != 4 or kernels.shape[:2] != (3, 3):
        raise ShapeError(f"kernels must be 3x3xCinxCout, got {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise ShapeError(
            f"input has {x.shape[-1]} channels but kernels expect {kernels.shape[2]}")


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero 'same' padding."""
    xb, single = _batched(np.asarray(x, dtype=DTYPE))
    _check_conv(xb, kernels)
    if bias.shape != (kernels.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[3]} filters")
    n, h, w, c = xb.shape
    cout = kernels.shape[3]
    out = np.empty((n, h, w, cout), dtype=DTYPE)
    if c <= cout:
        kmat = kernels.reshape(9 * c, cout)
        xp = _pad1(xb)
        for a, b in _chunks(n, h * w * 9 * c):
            out[a:b] = (_im2col(xp[a:b], h, w) @ kmat).reshape(b - a, h, w, cout)
    else:
        # project first, then shift-and-add the 9 kernel taps
        kcat = kernels.transpose(2, 0, 1, 3).reshape(c, 9 * cout)
        for a, b in _chunks(n, (h + 2) * (w + 2) * 9 * cout):
            y = _pad1(xb[a:b]) @ kcat
            out[a:b] = _shift_sum(y, h, w, cout)
    out += bias
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias.

    ``grad_input`` is None when ``need_input_grad`` is False.
    """
    xb, single = _batched(np.asarray(x, dtype=DTYPE))
    gb, _ = _batched(np.asarray(grad_out, dtype=DTYPE))
    _check_conv(xb, kernels)
    n, h, w, c = xb.shape
    cout = kernels.shape[3]
    if gb.shape != (n, h, w, cout):
        raise ShapeError(f"upstream gradient {gb.shape} != forward output {(n, h, w, cout)}")
    gx = np.empty_like(xb) if need_input_grad else None
    if cout <= c:
        # expand the (no wider) upstream gradient instead of the input
        kflip = kernels[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, c)
        acc = np.zeros((c, 9 * cout), dtype=DTYPE)
        for a, b in _chunks(n, h * w * 9 * cout):
            colsg = _im2col(_pad1(gb[a:b]), h, w)
            acc += xb[a:b].reshape(-1, c).T @ colsg
            if need_input_grad:
                gx[a:b] = (colsg @ kflip).reshape(b - a, h, w, c)
        gk = acc.reshape(c, 3, 3, cout)[:, ::-1, ::-1, :].transpose(1, 2, 0, 3)
    else:
        kmat = kernels.reshape(9 * c, cout)
        xp = _pad1(xb)
        acc = np.zeros((9 * c, cout), dtype=DTYPE)
        for a, b in _chunks(n, h * w * 9 * c):
            g2 = gb[a:b].reshape(-1, cout)
            acc += _im2col(xp[a:b], h, w).T @ g2
            if need_input_grad:
                dcols = (g2 @ kmat.T).reshape(b - a, h, w, 3, 3, c)
                gxp = np.zeros((b - a, h + 2, w + 2, c), dtype=DTYPE)
                for i in range(3):
                    for j in range(3):
                        gxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
                gx[a:b] = gxp[:, 1:-1, 1:-1, :]
        gk = acc.reshape(kernels.shape)
    gbias = gb.sum(axis=(0, 1, 2))
    if need_input_grad and single:
        gx = gx[0]
    return gx, np.ascontiguousarray(gk), gbias


def maxpool2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling at stride 2.

    Returns the pooled tensor and, per output entry, the winning position
    inside its window (0..3, row-major; ties go to the first).
    """
    xb, single = _batched(np.asarray(x, dtype=DTYPE))
    h, w = xb.shape[1:3]
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
    q0, q1 = xb[:, 0::2, 0::2], xb[:, 0::2, 1::2]
    q2, q3 = xb[:, 1::2, 0::2], xb[:, 1::2, 1::2]
    # strict comparisons keep the earlier position on ties
    top_right = q1 > q0
    bottom_right = q3 > q2
    top = np.where(top_right, q1, q0)
    bottom = np.where(bottom_right, q3, q2)
    use_bottom = bottom > top
    out = np.where(use_bottom, bottom, top)
    idx = np.where(use_bottom, 2 + bottom_right, top_right).astype(np.uint8)
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    gb, single = _batched(np.asarray(grad_out, dtype=DTYPE))
    ib = argmax[None] if single else argmax
    n, h2, w2, c = gb.shape
    gx = np.empty((n, 2 * h2, 2 * w2, c), dtype=DTYPE)
    for k, (r, s) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        gx[:, r::2, s::2] = np.where(ib == k, gb, 0.0)
    return gx[0] if single else gx


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    xb, single = _batched(np.asarray(x, dtype=DTYPE))
    n, h, w, c = xb.shape
    out = np.broadcast_to(xb[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)
    return out[0] if single else out


def upsample_nearest_backward(grad_out: np.ndarray) -> np.ndarray:
    gb, single = _batched(np.asarray(grad_out, dtype=DTYPE))
    n, h, w, c = gb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upsample gradient needs even spatial dims, got {h}x{w}")
    gx = gb[:, 0::2, 0::2] + gb[:, 0::2, 1::2]
    gx += gb[:, 1::2, 0::2]
    gx += gb[:, 1::2, 1::2]
    return gx[0] if single else gx


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map over the last axis: ``x @ weights + bias``."""
    x = np.asarray(x, dtype=DTYPE)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} disagree")
    return x @ weights + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    x = np.asarray(x, dtype=DTYPE)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, weights.shape[1])
    return grad_out @ weights.T, x2.T @ g2, g2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient given the sigmoid *output*."""
    return grad_out * out * (1.0 - out)


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient given the softmax *output* (last axis)."""
    return out * (grad_out - (grad_out * out).sum(axis=-1, keepdims=True))


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=DTYPE), np.zeros_like(param, dtype=DTYPE), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_param, new_state)``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam: param {param.shape}, grad {grad.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("adam: non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


@dataclass
class Params:
    """Named parameter tensors with one Adam state each."""
    tensors: dict[str, np.ndarray]
    adam: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.tensors.items():
            self.adam.setdefault(name, AdamState.zeros_like(p))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.tensors if k.startswith(prefix)]

    def apply(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            self.tensors[name], self.adam[name] = adam_step(
                self.tensors[name], g, self.adam[name], lr)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in [-b, b], b = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 4:
        fan_in = shape[0] * shape[1] * shape[2]
        fan_out = shape[0] * shape[1] * shape[3]
    else:
        fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
