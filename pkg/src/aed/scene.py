"""Synthetic scenes standing in for the detector, segmenter and optical-flow nets.

Objects are flat-shaded shapes moving with integer velocities and reflecting
off the frame borders, so boxes, masks and flow are known exactly.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CROP = 64
NORMAL_SHAPES = ("disc", "square")
SHAPES = ("disc", "square", "triangle", "cross", "ring")
TEXTURES = ("checkerboard", "value-noise", "stripes", "blobs")


@dataclass(frozen=True)
class ObjectKind:
    shape: str
    size_range: tuple[int, int] = (14, 22)
    speed_range: tuple[float, float] = (1.0, 2.9)
    intensity_range: tuple[float, float] = (0.55, 0.95)


@dataclass(frozen=True)
class AnomalyKind:
    shape: str
    size: int = 18
    speed_multiplier: int = 1


@dataclass(frozen=True)
class SceneConfig:
    height: int = 96
    width: int = 128
    length: int = 60
    num_objects: int = 3
    normal_kinds: tuple[ObjectKind, ...] = (ObjectKind("disc"), ObjectKind("square"))
    anomaly_kinds: tuple[AnomalyKind, ...] = (AnomalyKind("triangle", 18, 1), AnomalyKind("disc", 18, 4))
    anomaly_span: tuple[int, int] = (15, 25)
    background: float = 0.25
    background_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        biggest = max([k.size_range[1] for k in self.normal_kinds] +
                      [a.size for a in self.anomaly_kinds])
        if biggest >= min(self.height, self.width):
            raise ValueError(f"object size {biggest} does not fit a {self.height}x{self.width} frame")
        for k in self.normal_kinds:
            if k.speed_range[0] <= 0 or k.speed_range[1] < k.speed_range[0]:
                raise ValueError(f"speed range of {k.shape} must be positive, got {k.speed_range}")
            if k.shape not in SHAPES:
                raise ValueError(f"unknown shape {k.shape!r}")
        for a in self.anomaly_kinds:
            if a.shape not in SHAPES or a.speed_multiplier < 1:
                raise ValueError(f"bad anomaly kind {a}")


@dataclass(frozen=True)
class PseudoAbnormalConfig:
    pool_size: int = 2000
    textures: tuple[str, ...] = TEXTURES
    flow_strides: tuple[int, ...] = (3, 4, 5, 6)


@dataclass(frozen=True)
class ObjectTruth:
    """One object in one frame. Boxes are half-open pixel rectangles."""
    frame: int
    track_id: int
    shape: str
    box: tuple[int, int, int, int]
    velocity: tuple[int, int]        # displacement to the next frame
    back_velocity: tuple[int, int]   # displacement to the previous frame
    intensity: float
    is_anomaly: bool

    @property
    def mask(self) -> np.ndarray:
        x1, y1, x2, y2 = self.box
        return shape_mask(self.shape, y2 - y1, x2 - x1)


@dataclass
class ObjectSample:
    appearance: np.ndarray      # (64, 64) in [0, 1]
    flow_backward: np.ndarray   # (64, 64, 2): orientation, magnitude
    flow_forward: np.ndarray
    mask: np.ndarray            # (64, 64) in {0, 1}
    frame: int
    box: tuple[int, int, int, int]
    label: str = "normal"
    track_id: int = -1


@dataclass
class Episode:
    frames: np.ndarray                       # (T, H, W) uint8
    truth: list[list[ObjectTruth]] = field(default_factory=list)

    @property
    def images(self) -> np.ndarray:
        return self.frames.astype(np.float64) / 255.0


def shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if shape == "square":
        m = np.ones((h, w), dtype=bool)
    elif shape == "disc":
        m = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    elif shape == "ring":
        r = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2
        m = (r <= 1.0) & (r >= 0.3)
    elif shape == "triangle":
        half = (yy + 1) / h * (w / 2.0)
        m = np.abs(xx - cx) <= half
    elif shape == "cross":
        m = (np.abs(yy - cy) <= h / 6.0) | (np.abs(xx - cx) <= w / 6.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.float64)


def _integer_velocity(rng: np.random.Generator, lo: float, hi: float) -> tuple[int, int]:
    r = int(np.ceil(hi))
    while True:
        dx, dy = (int(v) for v in rng.integers(-r, r + 1, size=2))
        if lo <= np.hypot(dx, dy) <= hi:
            return dx, dy


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.random((cfg.height // 16 + 2, cfg.width // 16 + 2))
    field_ = _bilinear(coarse, cfg.height, cfg.width)
    return cfg.background + cfg.background_noise * (2.0 * field_ - 1.0)


def _trajectory(rng, size, start_t, stop_t, velocity, cfg: SceneConfig):
    """Positions and per-frame displacements with border reflection."""
    x = int(rng.integers(0, cfg.width - size + 1))
    y = int(rng.integers(0, cfg.height - size + 1))
    dx, dy = velocity
    out = []
    for _ in range(start_t, stop_t):
        if not 0 <= x + dx <= cfg.width - size:
            dx = -dx
        if not 0 <= y + dy <= cfg.height - size:
            dy = -dy
        out.append((x, y, dx, dy))
        x, y = x + dx, y + dy
    return out


def generate_episode(cfg: SceneConfig, anomalous: bool, seed: int | None = None) -> Episode:
    """Render one episode. With ``anomalous`` set, each anomaly kind is injected
    once over a contiguous frame interval."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    bg = _background(cfg, rng)
    tracks = []  # (track_id, shape, size, intensity, is_anomaly, start, rows)
    for tid in range(cfg.num_objects):
        kind = cfg.normal_kinds[int(rng.integers(len(cfg.normal_kinds)))]
        size = int(rng.integers(kind.size_range[0], kind.size_range[1] + 1))
        inten = float(rng.uniform(*kind.intensity_range))
        vel = _integer_velocity(rng, *kind.speed_range)
        tracks.append((tid, kind.shape, size, inten, False, 0,
                       _trajectory(rng, size, 0, cfg.length, vel, cfg)))
    if anomalous:
        base = cfg.normal_kinds[0]
        for j, ak in enumerate(cfg.anomaly_kinds):
            span = int(rng.integers(cfg.anomaly_span[0], cfg.anomaly_span[1] + 1))
            span = min(span, cfg.length)
            start = int(rng.integers(0, cfg.length - span + 1))
            inten = float(rng.uniform(*base.intensity_range))
            vx, vy = _integer_velocity(rng, *base.speed_range)
            vel = (vx * ak.speed_multiplier, vy * ak.speed_multiplier)
            tracks.append((cfg.num_objects + j, ak.shape, ak.size, inten, True, start,
                           _trajectory(rng, ak.size, start, start + span, vel, cfg)))

    truth: list[list[ObjectTruth]] = [[] for _ in range(cfg.length)]
    canvas = np.repeat(bg[None], cfg.length, axis=0)
    for tid, shp, size, inten, is_anom, start, rows in tracks:
        mask = shape_mask(shp, size, size)
        for i, (x, y, dx, dy) in enumerate(rows):
            t = start + i
            pdx, pdy = rows[i - 1][2:] if i > 0 else (dx, dy)
            region = canvas[t, y:y + size, x:x + size]
            region[mask > 0] = inten
            truth[t].append(ObjectTruth(t, tid, shp, (x, y, x + size, y + size),
                                        (dx, dy), (-pdx, -pdy), inten, is_anom))
    frames = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    return Episode(frames, truth)


def render_object(obj: ObjectTruth, height: int, width: int) -> np.ndarray:
    """The object alone on an empty canvas (mask times intensity)."""
    out = np.zeros((height, width))
    x1, y1, x2, y2 = obj.box
    out[y1:y2, x1:x2] = obj.mask * obj.intensity
    return out


# --- flow ---------------------------------------------------------------------

def flow_field(mask: np.ndarray, displacement: tuple[float, float]) -> np.ndarray:
    """Two-channel flow (orientation, magnitude) constant inside ``mask``."""
    dx, dy = displacement
    out = np.zeros(mask.shape + (2,))
    out[..., 0] = mask * np.arctan2(dy, dx)
    out[..., 1] = mask * np.hypot(dx, dy)
    return out


def _tracks(truth: list[list[ObjectTruth]]) -> dict[int, list[ObjectTruth]]:
    by_id: dict[int, list[ObjectTruth]] = {}
    for rows in truth:
        for obj in rows:
            by_id.setdefault(obj.track_id, []).append(obj)
    return by_id


def strided_displacement(track: list[ObjectTruth], i: int, k: int, direction: str):
    """Displacement over ``k`` frames from row ``i`` of a track; lookups past the
    track ends reuse the end velocity."""
    n = len(track)
    if direction == "forward":
        vs = [track[min(i + j, n - 1)].velocity for j in range(k)]
    elif direction == "backward":
        vs = [track[max(i - j, 0)].back_velocity for j in range(k)]
    else:
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    return sum(v[0] for v in vs), sum(v[1] for v in vs)


def compute_flow(truth: list[list[ObjectTruth]], frame_index: int,
                 direction: str = "forward", k: int = 1) -> list[np.ndarray]:
    """Per-object 64x64x2 flow crops for one frame, in truth order."""
    if k <= 0:
        raise ValueError(f"flow stride must be positive, got {k}")
    frame_index = min(max(frame_index, 0), len(truth) - 1)
    tracks = _tracks(truth)
    out = []
    for obj in truth[frame_index]:
        track = tracks[obj.track_id]
        i = next(j for j, o in enumerate(track) if o.frame == obj.frame)
        disp = strided_displacement(track, i, k, direction)
        out.append(flow_field(resize_nearest(obj.mask, CROP, CROP), disp))
    return out


# --- crops --------------------------------------------------------------------

def resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize; values are copied, never interpolated."""
    rows = (np.arange(h) * img.shape[0]) // h
    cols = (np.arange(w) * img.shape[1]) // w
    return img[rows[:, None], cols[None, :]]


def _valid(box, height, width) -> bool:
    x1, y1, x2, y2 = box
    return 0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height


def extract_samples(frames: np.ndarray, truth: list[list[ObjectTruth]],
                    label: str = "normal") -> list[ObjectSample]:
    """Crop every truth object; degenerate boxes are skipped with a warning."""
    imgs = frames.astype(np.float64) / 255.0 if frames.dtype == np.uint8 else frames
    height, width = imgs.shape[1:]
    tracks = _tracks(truth)
    samples, skipped = [], 0
    for rows in truth:
        for obj in rows:
            if not _valid(obj.box, height, width):
                skipped += 1
                continue
            x1, y1, x2, y2 = obj.box
            track = tracks[obj.track_id]
            i = next(j for j, o in enumerate(track) if o.frame == obj.frame)
            mask = resize_nearest(obj.mask, CROP, CROP)
            samples.append(ObjectSample(
                appearance=resize_nearest(imgs[obj.frame, y1:y2, x1:x2], CROP, CROP),
                flow_backward=flow_field(mask, strided_displacement(track, i, 1, "backward")),
                flow_forward=flow_field(mask, strided_displacement(track, i, 1, "forward")),
                mask=mask, frame=obj.frame, box=obj.box, label=label, track_id=obj.track_id))
    if skipped:
        log.warning("skipped %d degenerate boxes", skipped)
    return samples


# --- pseudo-abnormal pools ----------------------------------------------------

def _bilinear(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    gy = np.linspace(0, coarse.shape[0] - 1, h)
    gx = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.minimum(gy.astype(int), coarse.shape[0] - 2)
    x0 = np.minimum(gx.astype(int), coarse.shape[1] - 2)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    c00 = coarse[y0[:, None], x0[None, :]]
    c01 = coarse[y0[:, None], x0[None, :] + 1]
    c10 = coarse[y0[:, None] + 1, x0[None, :]]
    c11 = coarse[y0[:, None] + 1, x0[None, :] + 1]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def _texture(kind: str, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:CROP, 0:CROP].astype(np.float64)
    lo, hi = np.sort(rng.uniform(0.0, 1.0, size=2))
    if hi - lo < 0.3:
        lo, hi = max(0.0, lo - 0.15), min(1.0, hi + 0.15)
    if kind == "checkerboard":
        period = int(rng.integers(3, 12))
        ang = rng.uniform(0, np.pi)
        u = xx * np.cos(ang) + yy * np.sin(ang)
        v = -xx * np.sin(ang) + yy * np.cos(ang)
        t = ((np.floor(u / period) + np.floor(v / period)) % 2)
    elif kind == "value-noise":
        cells = int(rng.integers(4, 16))
        t = _bilinear(rng.random((cells + 1, cells + 1)), CROP, CROP)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    elif kind == "stripes":
        freq = rng.uniform(0.15, 0.9)
        ang = rng.uniform(0, np.pi)
        t = 0.5 + 0.5 * np.sin(freq * (xx * np.cos(ang) + yy * np.sin(ang)) + rng.uniform(0, 2 * np.pi))
    elif kind == "blobs":
        t = np.zeros((CROP, CROP))
        for _ in range(int(rng.integers(4, 12))):
            cy, cx = rng.uniform(0, CROP, size=2)
            s = rng.uniform(3, 10)
            t += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    return lo + (hi - lo) * t


def make_pseudo_abnormal_appearance(cfg: PseudoAbnormalConfig, n: int, seed: int) -> list[np.ndarray]:
    """Procedural textures; none of them is a flat-shaded object render."""
    if n > cfg.pool_size:
        raise ValueError(f"requested {n} images from a pool of {cfg.pool_size}")
    rng = np.random.default_rng(seed)
    return [np.clip(_texture(cfg.textures[int(rng.integers(len(cfg.textures)))], rng), 0.0, 1.0)
            for _ in range(n)]


def make_pseudo_abnormal_flow(truth: list[list[ObjectTruth]], k: int,
                              direction: str = "forward") -> list[np.ndarray]:
    """Flow of every truth object measured over ``k`` frames instead of one."""
    if k <= 0:
        raise ValueError(f"flow stride must be positive, got {k}")
    out = []
    for t in range(len(truth)):
        out.extend(compute_flow(truth, t, direction, k))
    return out


# --- files --------------------------------------------------------------------

TRACKS_HEADER = ["frame_idx", "track_id", "x1", "y1", "x2", "y2"]
OBJECTS_HEADER = ["frame_idx", "track_id", "shape", "x1", "y1", "x2", "y2",
                  "dx", "dy", "bdx", "bdy", "intensity", "is_anomaly"]


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_annotations(truth: list[list[ObjectTruth]], path) -> None:
    """Tracks CSV with one row per anomalous ground-truth region."""
    rows = [(o.frame, o.track_id, *o.box) for frame in truth for o in frame if o.is_anomaly]
    _atomic_write_text(Path(path), _csv_text(TRACKS_HEADER, rows))


def write_objects(truth: list[list[ObjectTruth]], path) -> None:
    """Every truth object, enough to re-derive masks and flow."""
    rows = [(o.frame, o.track_id, o.shape, *o.box, *o.velocity, *o.back_velocity,
             repr(o.intensity), int(o.is_anomaly)) for frame in truth for o in frame]
    _atomic_write_text(Path(path), _csv_text(OBJECTS_HEADER, rows))


def load_objects(path, length: int) -> list[list[ObjectTruth]]:
    truth: list[list[ObjectTruth]] = [[] for _ in range(length)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != OBJECTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                t, tid = int(row[0]), int(row[1])
                x1, y1, x2, y2, dx, dy, bdx, bdy = (int(v) for v in row[3:11])
                obj = ObjectTruth(t, tid, row[2], (x1, y1, x2, y2), (dx, dy), (bdx, bdy),
                                  float(row[11]), bool(int(row[12])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row}") from exc
            truth[t].append(obj)
    return truth


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    data = b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()
    Path(path).write_bytes(data)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w).copy()


def save_episode(ep: Episode, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(ep.frames):
        write_pgm(d / f"frame_{t:06d}.pgm", frame)
    write_annotations(ep.truth, d / "tracks.csv")
    write_objects(ep.truth, d / "objects.csv")


def load_episode(directory) -> Episode:
    d = Path(directory)
    paths = sorted(d.glob("frame_*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no frames in {d}")
    frames = np.stack([read_pgm(p) for p in paths])
    return Episode(frames, load_objects(d / "objects.csv", len(paths)))
