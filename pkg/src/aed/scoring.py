"""Object scores to frame scores: map assembly, 3D mean filter, temporal smoothing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from aed.clf import ClfParams, classifier_input, clf_forward
from aed.cae import FrozenCae


_BATCH = 32


@dataclass(frozen=True)
class FilterConfig:
    kernel: tuple[int, int, int] = (5, 9, 9)   # (frames, rows, cols)
    sigma: float = 5.0
    radius: int = 20


@dataclass
class AnomalyVolume:
    maps: np.ndarray           # (T, H, W)
    frame_scores: np.ndarray   # (T,)
    detections: list = field(default_factory=list)   # (frame, box, score)


def score_object(normality) -> float:
    """Anomaly score: one minus the mean of the per-stream normality scores."""
    y = np.asarray(normality, dtype=np.float64)
    if y.shape != (3,) or np.any(y < 0) or np.any(y > 1):
        raise ValueError(f"expected three normality scores in [0, 1], got {normality}")
    return 1.0 - float(y.mean())


def assemble_map(frame_size: tuple[int, int], detections) -> np.ndarray:
    """Per-pixel max over the scores of the boxes covering it."""
    h, w = frame_size
    out = np.zeros((h, w))
    for (x1, y1, x2, y2), score in detections:
        if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
            raise ValueError(f"box {(x1, y1, x2, y2)} outside a {h}x{w} frame")
        region = out[y1:y2, x1:x2]
        np.maximum(region, score, out=region)
    return out


def mean_filter_3d(volume: np.ndarray, kernel: tuple[int, int, int]) -> np.ndarray:
    """Box mean over a (t, h, w) neighbourhood with replicated borders."""
    if any(k <= 0 or k % 2 == 0 for k in kernel):
        raise ValueError(f"kernel sides must be odd and positive, got {kernel}")
    return ndimage.uniform_filter(np.asarray(volume, dtype=np.float64), size=kernel, mode="nearest")


def frame_level_scores(maps: np.ndarray) -> np.ndarray:
    maps = np.asarray(maps, dtype=np.float64)
    return maps.reshape(maps.shape[0], -1).max(axis=1)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(series, sigma: float, radius: int) -> np.ndarray:
    """Truncated, renormalised Gaussian smoothing with replicated ends."""
    k = gaussian_kernel(sigma, radius)
    s = np.asarray(series, dtype=np.float64)
    padded = np.pad(s, radius, mode="edge")
    return np.convolve(padded, k, mode="valid")


def infer_episode(caes: dict[str, FrozenCae], clfs: dict[str, ClfParams],
                  samples_by_frame: dict[int, list], frame_size: tuple[int, int],
                  length: int, filters: FilterConfig = FilterConfig()) -> AnomalyVolume:
    """Score every detection, then build maps and smoothed frame scores.

    ``samples_by_frame`` maps a frame index to its ObjectSample list.
    """
    streams = ("appearance", "motion-backward", "motion-forward")
    flat = []
    for t in sorted(samples_by_frame):
        if not 0 <= t < length:
            raise ValueError(f"frame index {t} outside an episode of {length} frames")
        flat.extend(samples_by_frame[t])
    detections = []
    if flat:
        inputs = {
            "appearance": np.stack([s.appearance for s in flat])[..., None],
            "motion-backward": np.stack([s.flow_backward for s in flat]),
            "motion-forward": np.stack([s.flow_forward for s in flat]),
        }
        normal = np.empty((len(flat), 3))
        for j, stream in enumerate(streams):
            cp = clfs[stream]
            for a in range(0, len(flat), _BATCH):
                x = inputs[stream][a:a + _BATCH]
                latent, recon = caes[stream].reconstruct(x)
                probs = clf_forward(cp, classifier_input(x, recon, cp.diff_mode), latent)
                normal[a:a + _BATCH, j] = probs[:, 1]
        for s, y in zip(flat, normal):
            detections.append((s.frame, tuple(s.box), score_object(np.clip(y, 0.0, 1.0))))
    maps = np.zeros((length,) + tuple(frame_size))
    for t in range(length):
        maps[t] = assemble_map(frame_size, [(b, sc) for f, b, sc in detections if f == t])
    filtered = mean_filter_3d(maps, filters.kernel)
    scores = gaussian_smooth(frame_level_scores(filtered), filters.sigma, filters.radius)
    return AnomalyVolume(filtered, scores, detections)
