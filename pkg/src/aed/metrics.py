"""Frame-level AUC (micro/macro) and the region/track-based detection criteria."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from aed.scene import TRACKS_HEADER


class UndefinedMetricError(ValueError):
    """The metric has no value for the given input (e.g. a single class)."""


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrackRow:
    frame: int
    track_id: int
    box: tuple[int, int, int, int]
    video: int = 0


@dataclass(frozen=True)
class RegionRow:
    frame: int
    box: tuple[int, int, int, int]
    score: float
    video: int = 0


def iou(a, b) -> float:
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"box {tuple(box)} has zero area")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


# --- frame-level AUC ----------------------------------------------------------

def _auc_exact(scores, labels, name: str = "input") -> float:
    """Trapezoidal ROC area; tied scores form a single step.

    The area is accumulated as an integer numerator over 2*P*N so the result is
    the correctly rounded value of the exact rational.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError(f"{name}: {len(s)} scores but {len(y)} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError(f"{name}: labels must be 0 or 1")
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(f"AUC undefined for {name}: needs both normal and abnormal frames")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    bounds = np.flatnonzero(np.diff(s)) + 1
    num, tp = 0, 0
    for block in np.split(y, bounds):
        p = int(block.sum())
        n = len(block) - p
        num += n * (2 * tp + p)
        tp += p
    return num / (2 * pos * neg)


def frame_auc(videos: Sequence[tuple[Sequence[float], Sequence[int]]], mode: str = "micro") -> float:
    """``videos`` is a list of (frame scores, frame labels) pairs."""
    if mode == "micro":
        scores = np.concatenate([np.asarray(s, dtype=np.float64) for s, _ in videos])
        labels = np.concatenate([np.asarray(l) for _, l in videos])
        return _auc_exact(scores, labels, "the concatenated videos")
    if mode == "macro":
        aucs = [_auc_exact(s, l, f"video {i}") for i, (s, l) in enumerate(videos)]
        return float(sum(aucs) / len(aucs))
    raise ValueError(f"mode must be micro or macro, got {mode!r}")


def roc_points(scores, labels) -> list[tuple[float, float]]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pos, neg = int(y.sum()), int(len(y) - y.sum())
    pts = [(0.0, 0.0)]
    tp = fp = 0
    for t in np.unique(s)[::-1]:
        sel = s == t
        tp += int(y[sel].sum())
        fp += int((1 - y[sel]).sum())
        pts.append((fp / max(neg, 1), tp / max(pos, 1)))
    return pts


# --- RBDC / TBDC --------------------------------------------------------------

def _area(points: list[tuple[float, float]], max_fppf: float = 1.0) -> float:
    """Trapezoid area of rate over FPPF in [0, max_fppf], normalised by max_fppf.

    The curve starts at (0, 0); past its last point the rate is held constant.
    """
    area = 0.0
    (x0, y0) = points[0]
    for x1, y1 in points[1:]:
        if x1 > max_fppf:
            y_cut = y0 + (y1 - y0) * (max_fppf - x0) / (x1 - x0)
            area += 0.5 * (y0 + y_cut) * (max_fppf - x0)
            return area / max_fppf
        area += 0.5 * (y0 + y1) * (x1 - x0)
        x0, y0 = x1, y1
    area += y0 * (max_fppf - x0)
    return area / max_fppf


def detection_curves(truth: Sequence[TrackRow], preds: Sequence[RegionRow], beta: float,
                     num_frames: int, alpha: float = 0.1):
    """Operating points (fppf, region rate, track rate) for every distinct score
    threshold, highest first, preceded by the empty-detection point."""
    if not truth:
        raise UndefinedMetricError("RBDC/TBDC undefined without ground-truth regions")
    if not 0 < beta <= 1 or not 0 < alpha <= 1:
        raise ValueError(f"alpha and beta must lie in (0, 1], got {alpha}, {beta}")
    if num_frames < 1:
        raise ValueError("num_frames must be positive")
    gt_by_frame = defaultdict(list)
    for i, g in enumerate(truth):
        gt_by_frame[(g.video, g.frame)].append((i, g.box))
    track_of = [(g.video, g.track_id) for g in truth]
    track_size = defaultdict(int)
    for key in track_of:
        track_size[key] += 1

    # candidate pairs per frame, computed once
    pairs_by_frame = defaultdict(list)
    for pi, p in enumerate(preds):
        for gi, gb in gt_by_frame.get((p.video, p.frame), []):
            v = iou(p.box, gb)
            if v >= beta:
                pairs_by_frame[(p.video, p.frame)].append((-v, pi, gi))
    for key in pairs_by_frame:
        pairs_by_frame[key].sort()

    scores = np.array([p.score for p in preds], dtype=np.float64)
    points = [(0.0, 0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        active = scores >= thr
        matched_g, n_matched_p = set(), 0
        for pairs in pairs_by_frame.values():
            used_p, used_g = set(), set()
            for _, pi, gi in pairs:
                if active[pi] and pi not in used_p and gi not in used_g:
                    used_p.add(pi)
                    used_g.add(gi)
            matched_g |= used_g
            n_matched_p += len(used_p)
        fp = int(active.sum()) - n_matched_p
        hits = defaultdict(int)
        for gi in matched_g:
            hits[track_of[gi]] += 1
        detected = sum(1 for key, n in track_size.items() if hits[key] / n >= alpha)
        points.append((fp / num_frames, len(matched_g) / len(truth), detected / len(track_size)))
    return points


def rbdc(truth, preds, beta: float = 0.1, num_frames: int = 1) -> float:
    pts = detection_curves(truth, preds, beta, num_frames)
    return _area([(x, r) for x, r, _ in pts])


def tbdc(truth, preds, alpha: float = 0.1, beta: float = 0.1, num_frames: int = 1) -> float:
    pts = detection_curves(truth, preds, beta, num_frames, alpha)
    return _area([(x, t) for x, _, t in pts])


# --- files --------------------------------------------------------------------

OBJECT_PRED_HEADER = ["frame_idx", "x1", "y1", "x2", "y2", "score"]
FRAME_PRED_HEADER = ["frame_idx", "score"]


def _read(path, header: list[str]) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise FormatError(f"{path}: expected header {','.join(header)}, got {got}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def load_tracks(path, video: int = 0) -> list[TrackRow]:
    rows = []
    for lineno, r in _read(path, TRACKS_HEADER):
        try:
            f, tid, x1, y1, x2, y2 = (int(v) for v in r)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed row {r}") from exc
        rows.append(TrackRow(f, tid, (x1, y1, x2, y2), video))
    return rows


def load_predictions(path, video: int = 0) -> list[RegionRow]:
    rows = []
    for lineno, r in _read(path, OBJECT_PRED_HEADER):
        try:
            f, x1, y1, x2, y2 = (int(v) for v in r[:5])
            score = float(r[5])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed row {r}") from exc
        if not np.isfinite(score):
            raise FormatError(f"{path}:{lineno}: non-finite score")
        rows.append(RegionRow(f, (x1, y1, x2, y2), score, video))
    return rows


def load_frame_scores(path) -> np.ndarray:
    pairs = []
    for lineno, r in _read(path, FRAME_PRED_HEADER):
        try:
            pairs.append((int(r[0]), float(r[1])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed row {r}") from exc
    out = np.zeros(len(pairs))
    for i, (f, s) in enumerate(pairs):
        if f != i:
            raise FormatError(f"{path}: frame indices must run 0..{len(pairs) - 1}")
        out[i] = s
    return out


def _write(path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(p)


def write_tracks(rows: Sequence[TrackRow], path) -> None:
    _write(path, TRACKS_HEADER, [(r.frame, r.track_id, *r.box) for r in rows])


def write_predictions(rows: Sequence[RegionRow], path) -> None:
    _write(path, OBJECT_PRED_HEADER, [(r.frame, *r.box, repr(float(r.score))) for r in rows])


def write_frame_scores(scores, path) -> None:
    _write(path, FRAME_PRED_HEADER, [(i, repr(float(s))) for i, s in enumerate(scores)])


def frame_labels(truth: Sequence[TrackRow], num_frames: int) -> np.ndarray:
    labels = np.zeros(num_frames, dtype=int)
    for r in truth:
        labels[r.frame] = 1
    return labels
