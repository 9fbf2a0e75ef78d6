"""Data generation, two-phase training, inference, evaluation and the lambda sweep.

Directory layout produced by :func:`generate_data`::

    data/train/ep_000/   frame_%06d.pgm, tracks.csv, objects.csv
    data/test/ep_000/
    data/pseudo/appearance.npy   uint8 textures
    data/pseudo/flow_index.csv   episode,frame_idx,track_id,stride
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from aed import config as C
from aed import metrics as M
from aed.cae import STREAMS, CaeParams, FrozenCae, cae_train_step, init_cae, strip_for_inference
from aed.checkpoint import config_hash, load_checkpoint, save_checkpoint
from aed.clf import ClfParams, classifier_input, clf_train_step, init_clf
from aed.config import RunConfig
from aed.scene import (CROP, Episode, ObjectSample, _atomic_write_text, compute_flow,
                       extract_samples, generate_episode, load_episode,
                       make_pseudo_abnormal_appearance, save_episode)
from aed.scoring import infer_episode

log = logging.getLogger(__name__)

FLOW_INDEX_HEADER = ["episode", "frame_idx", "track_id", "stride"]
LOG_HEADER = ["phase", "stream", "epoch", "name", "value"]
SWEEP_HEADER = ["lambda", "label", "micro_auc", "macro_auc", "rbdc", "tbdc"]


class DataError(ValueError):
    pass


class TrainingError(FloatingPointError):
    pass


def derive_seed(seed: int, *tags) -> int:
    """Independent 32-bit seed for a named sub-task."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        words.append(zlib.crc32(t.encode()) if isinstance(t, str) else int(t) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("AED_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    items = list(items)
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _episode_dirs(root: Path, split: str) -> list[Path]:
    dirs = sorted((root / split).glob("ep_*"))
    if not dirs:
        raise DataError(f"no {split} episodes under {root / split}")
    return dirs


# --- gen-data -----------------------------------------------------------------

def generate_data(cfg: RunConfig, out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, n, anomalous in (("train", cfg.train_episodes, False),
                                    ("test", cfg.test_episodes, True)):
            for i in range(n):
                ep = generate_episode(cfg.scene, anomalous, derive_seed(cfg.seed, split, i))
                save_episode(ep, out / split / f"ep_{i:03d}")
        pseudo = out / "pseudo"
        pseudo.mkdir(exist_ok=True)
        imgs = make_pseudo_abnormal_appearance(cfg.pseudo, cfg.pseudo.pool_size,
                                               derive_seed(cfg.seed, "pseudo-appearance"))
        arr = np.round(np.asarray(imgs).reshape(-1, CROP, CROP) * 255).astype(np.uint8)
        tmp = pseudo / "appearance.npy.tmp"
        with open(tmp, "wb") as fh:
            np.save(fh, arr)
        os.replace(tmp, pseudo / "appearance.npy")
        _write_flow_index(cfg, out)
        _atomic_write_text(out / "config.txt", C.to_text(cfg))
    except OSError as exc:
        raise OSError(f"cannot write data under {out}: {exc}") from exc
    return out


def _write_flow_index(cfg: RunConfig, out: Path) -> None:
    rows = []
    for e, d in enumerate(sorted((out / "train").glob("ep_*"))):
        ep = load_episode(d)
        for frame in ep.truth:
            for obj in frame:
                rows.append((e, obj.frame, obj.track_id))
    rng = np.random.default_rng(derive_seed(cfg.seed, "pseudo-flow"))
    n = cfg.pseudo.pool_size
    picks = rng.integers(len(rows), size=n) if rows and n else np.zeros(0, dtype=int)
    strides = rng.choice(np.asarray(cfg.pseudo.flow_strides), size=len(picks))
    lines = [",".join(FLOW_INDEX_HEADER)]
    lines += [f"{rows[i][0]},{rows[i][1]},{rows[i][2]},{k}" for i, k in zip(picks, strides)]
    _atomic_write_text(out / "pseudo" / "flow_index.csv", "\n".join(lines) + "\n")


# --- training data ------------------------------------------------------------

def _load_split(data: Path, split: str) -> list[Episode]:
    try:
        return [load_episode(d) for d in _episode_dirs(data, split)]
    except (OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"cannot load {split} episodes from {data}: {exc}") from exc


def stream_inputs(samples: list[ObjectSample]) -> dict[str, np.ndarray]:
    if not samples:
        return {s: np.zeros((0, CROP, CROP, 1 if s == "appearance" else 2)) for s in STREAMS}
    return {
        "appearance": np.stack([s.appearance for s in samples])[..., None],
        "motion-backward": np.stack([s.flow_backward for s in samples]),
        "motion-forward": np.stack([s.flow_forward for s in samples]),
    }


def training_set(cfg: RunConfig, data) -> tuple[dict[str, np.ndarray], np.ndarray, dict[str, np.ndarray]]:
    """(normal inputs per stream, segmentation masks, pseudo-abnormal pools per stream)."""
    data = Path(data)
    episodes = _load_split(data, "train")
    samples = [s for ep in episodes for s in extract_samples(ep.frames, ep.truth)]
    if not samples:
        raise DataError(f"no objects in the training episodes under {data}")
    if cfg.max_train_samples and len(samples) > cfg.max_train_samples:
        rng = np.random.default_rng(derive_seed(cfg.seed, "subsample"))
        keep = np.sort(rng.choice(len(samples), cfg.max_train_samples, replace=False))
        samples = [samples[i] for i in keep]
    normal = stream_inputs(samples)
    masks = np.stack([s.mask for s in samples]).astype(np.float64)[..., None]

    try:
        app = np.load(data / "pseudo" / "appearance.npy")
        with open(data / "pseudo" / "flow_index.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != FLOW_INDEX_HEADER:
                raise DataError(f"{data / 'pseudo' / 'flow_index.csv'}: bad header")
            index = [tuple(int(v) for v in row) for row in reader]
    except (OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"cannot load the pseudo-abnormal pools under {data}: {exc}") from exc
    if len(app) == 0 or not index:
        raise DataError("pseudo-abnormal pools are empty")
    pools = {"appearance": app.astype(np.float64)[..., None] / 255.0}
    for stream in STREAMS[1:]:
        direction = stream.split("-")[1]
        flows = []
        for e, t, tid, k in index:
            if not (0 <= e < len(episodes) and 0 <= t < len(episodes[e].truth)):
                raise DataError(f"flow index row {(e, t, tid, k)} points outside the training set")
            ids = [o.track_id for o in episodes[e].truth[t]]
            if tid not in ids:
                raise DataError(f"flow index row {(e, t, tid, k)}: no such object")
            flows.append(compute_flow(episodes[e].truth, t, direction, k)[ids.index(tid)])
        pools[stream] = np.stack(flows)
    return normal, masks, pools


# --- training -----------------------------------------------------------------

class TrainLog:
    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, phase: str, stream: str, epoch: int, name: str, value: float) -> None:
        self.rows.append((phase, stream, epoch, name, value))

    def text(self) -> str:
        lines = [",".join(LOG_HEADER)]
        lines += [f"{p},{s},{e},{n},{v!r}" for p, s, e, n, v in self.rows]
        return "\n".join(lines) + "\n"


def train_cae(cfg: RunConfig, stream: str, normal: np.ndarray, pool: np.ndarray,
              masks: np.ndarray | None, log_: TrainLog | None = None) -> CaeParams:
    """Phase 1 for one stream: each step pairs a shuffled normal batch with a
    pseudo-abnormal batch drawn independently from the pool."""
    hyper = cfg.cae
    cp = init_cae(stream, derive_seed(cfg.seed, "cae-init", stream))
    rng = np.random.default_rng(derive_seed(cfg.seed, "cae-batches", stream))
    bs = hyper.batch_size
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(normal))
        totals: dict[str, float] = {}
        steps = 0
        for a in range(0, len(order), bs):
            idx = order[a:a + bs]
            pidx = rng.integers(len(pool), size=bs)
            seg = masks[idx] if stream == "appearance" else None
            try:
                _, losses = cae_train_step(cp, normal[idx], pool[pidx], hyper, seg)
            except FloatingPointError as exc:
                raise TrainingError(f"phase 1, stream {stream}, epoch {epoch}: {exc}") from exc
            for k, v in losses.items():
                totals[k] = totals.get(k, 0.0) + v
            steps += 1
        if log_ is not None:
            for k, v in totals.items():
                log_.add("cae", stream, epoch, k, v / steps)
        log.info("cae %s epoch %d %s", stream, epoch, {k: v / steps for k, v in totals.items()})
    return cp


def _frozen_features(frozen: FrozenCae, x: np.ndarray, mode: str, batch: int = 64):
    diffs, latents = [], []
    for a in range(0, len(x), batch):
        latent, recon = frozen.reconstruct(x[a:a + batch])
        diffs.append(classifier_input(x[a:a + batch], recon, mode))
        latents.append(latent)
    return np.concatenate(diffs), np.concatenate(latents)


def train_classifier(cfg: RunConfig, stream: str, frozen: FrozenCae, normal: np.ndarray,
                     pool: np.ndarray, log_: TrainLog | None = None) -> ClfParams:
    """Phase 2 for one stream: balanced batches, normal labelled 1."""
    hyper = cfg.clf
    cp = init_clf(stream, derive_seed(cfg.seed, "clf-init", stream), cfg.diff_mode)
    rng = np.random.default_rng(derive_seed(cfg.seed, "clf-batches", stream))
    dn, ln = _frozen_features(frozen, normal, cfg.diff_mode)
    dp, lp = _frozen_features(frozen, pool, cfg.diff_mode)
    half = max(1, hyper.batch_size // 2)
    y = np.concatenate([np.ones(half), np.zeros(half)])
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(normal))
        total, steps = 0.0, 0
        for a in range(0, len(order), half):
            idx = order[a:a + half]
            pidx = rng.integers(len(pool), size=len(idx))
            diff = np.concatenate([dn[idx], dp[pidx]])
            lat = np.concatenate([ln[idx], lp[pidx]])
            yy = np.concatenate([y[:len(idx)], y[half:half + len(idx)]])
            try:
                _, loss = clf_train_step(cp, diff, lat, yy, hyper)
            except FloatingPointError as exc:
                raise TrainingError(f"phase 2, stream {stream}, epoch {epoch}: {exc}") from exc
            if log_ is not None and epoch == 1 and steps == 0:
                log_.add("clf", stream, 0, "first_batch_loss", loss)
            total += loss
            steps += 1
        if log_ is not None:
            log_.add("clf", stream, epoch, "loss", total / steps)
        log.info("clf %s epoch %d loss %.6f", stream, epoch, total / steps)
    return cp


def train(cfg: RunConfig, data, out) -> dict[str, Path]:
    """Both phases for all three streams; writes six checkpoints, the log and the config."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    normal, masks, pools = training_set(cfg, data)
    chash = config_hash(C.to_text(cfg))
    logs = {s: TrainLog() for s in STREAMS}

    def phase1(stream):
        return train_cae(cfg, stream, normal[stream], pools[stream],
                         masks if stream == "appearance" else None, logs[stream])

    caes = dict(zip(STREAMS, _map(phase1, STREAMS)))
    frozen = {s: strip_for_inference(caes[s]) for s in STREAMS}

    def phase2(stream):
        return train_classifier(cfg, stream, frozen[stream], normal[stream], pools[stream], logs[stream])

    clfs = dict(zip(STREAMS, _map(phase2, STREAMS)))
    paths = {}
    for s in STREAMS:
        paths[f"cae_{s}"] = out / f"cae_{s}.ckpt"
        paths[f"clf_{s}"] = out / f"clf_{s}.ckpt"
        save_checkpoint(caes[s], paths[f"cae_{s}"], chash)
        save_checkpoint(clfs[s], paths[f"clf_{s}"], chash)
    merged = TrainLog()
    merged.rows.append(("setup", "all", 0, "normal_samples", float(len(masks))))
    merged.rows.append(("setup", "all", 0, "pseudo_pairing_independent", 1.0))
    for s in STREAMS:
        merged.rows += [r for r in logs[s].rows if r[0] == "cae"]
    for s in STREAMS:
        merged.rows += [r for r in logs[s].rows if r[0] == "clf"]
    _atomic_write_text(out / "train_log.csv", merged.text())
    _atomic_write_text(out / "config.txt", C.to_text(cfg))
    return paths


# --- inference ----------------------------------------------------------------

def load_models(cfg: RunConfig, ckpt) -> tuple[dict[str, FrozenCae], dict[str, ClfParams]]:
    ckpt = Path(ckpt)
    chash = config_hash(C.to_text(cfg))
    caes, clfs = {}, {}
    for s in STREAMS:
        cae = load_checkpoint(ckpt / f"cae_{s}.ckpt", stream=s, kind="cae", chash=chash)
        caes[s] = strip_for_inference(cae) if isinstance(cae, CaeParams) else cae
        clfs[s] = load_checkpoint(ckpt / f"clf_{s}.ckpt", stream=s, kind="clf", chash=chash)
    return caes, clfs


def infer_dir(cfg: RunConfig, caes, clfs, episode_dir, out_dir) -> None:
    ep = _load_split_one(episode_dir)
    samples = extract_samples(ep.frames, ep.truth)
    by_frame: dict[int, list] = {}
    for s in samples:
        by_frame.setdefault(s.frame, []).append(s)
    length, h, w = ep.frames.shape
    vol = infer_episode(caes, clfs, by_frame, (h, w), length, cfg.filters)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    M.write_predictions([M.RegionRow(f, b, sc) for f, b, sc in vol.detections],
                        out_dir / "pred_objects.csv")
    M.write_frame_scores(vol.frame_scores, out_dir / "pred_frames.csv")


def _load_split_one(d) -> Episode:
    try:
        return load_episode(d)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load episode {d}: {exc}") from exc


def infer(cfg: RunConfig, ckpt, data, out) -> list[Path]:
    """Predictions for every test episode, one sub-directory each."""
    caes, clfs = load_models(cfg, ckpt)
    dirs = _episode_dirs(Path(data), "test")
    outs = [Path(out) / d.name for d in dirs]
    _map(lambda pair: infer_dir(cfg, caes, clfs, *pair), list(zip(dirs, outs)))
    return outs


# --- evaluation ---------------------------------------------------------------

def evaluate(cfg: RunConfig, data, preds, curves_dir=None) -> dict:
    """Micro/macro frame AUC, RBDC and TBDC over all test episodes."""
    truth, regions, videos = [], [], []
    total_frames = 0
    for v, d in enumerate(_episode_dirs(Path(data), "test")):
        n = len(list(d.glob("frame_*.pgm")))
        p = Path(preds) / d.name
        try:
            t = M.load_tracks(d / "tracks.csv", v)
            scores = M.load_frame_scores(p / "pred_frames.csv")
            regions += M.load_predictions(p / "pred_objects.csv", v)
        except OSError as exc:
            raise DataError(f"cannot read truth or predictions for {d.name}: {exc}") from exc
        if len(scores) != n:
            raise DataError(f"{p / 'pred_frames.csv'}: {len(scores)} scores for {n} frames")
        truth += t
        videos.append((scores, M.frame_labels(t, n)))
        total_frames += n
    results = {
        "micro_auc": M.frame_auc(videos, "micro"),
        "macro_auc": M.frame_auc(videos, "macro"),
        "rbdc": M.rbdc(truth, regions, cfg.beta, total_frames),
        "tbdc": M.tbdc(truth, regions, cfg.alpha, cfg.beta, total_frames),
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "filter_config": dataclasses.asdict(cfg.filters),
        "seed": cfg.seed,
        "config": C.to_text(cfg).splitlines(),
    }
    if curves_dir is not None:
        _write_curves(videos, truth, regions, cfg, total_frames, Path(curves_dir))
    return results


def _write_curves(videos, truth, regions, cfg, total_frames, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    scores = np.concatenate([s for s, _ in videos])
    labels = np.concatenate([l for _, l in videos])
    roc = M.roc_points(scores, labels)
    _atomic_write_text(out / "roc.csv", "fpr,tpr\n" + "".join(f"{a!r},{b!r}\n" for a, b in roc))
    pts = M.detection_curves(truth, regions, cfg.beta, total_frames, cfg.alpha)
    _atomic_write_text(out / "rbdc.csv", "fppf,rate\n" + "".join(f"{x!r},{r!r}\n" for x, r, _ in pts))
    _atomic_write_text(out / "tbdc.csv", "fppf,rate\n" + "".join(f"{x!r},{t!r}\n" for x, _, t in pts))


def results_text(results: dict) -> str:
    return json.dumps(results, indent=2, sort_keys=True) + "\n"


def run_all(cfg: RunConfig, data, work) -> dict:
    """train -> infer -> eval on already generated data; writes results.json."""
    work = Path(work)
    train(cfg, data, work / "ckpt")
    infer(cfg, work / "ckpt", data, work / "pred")
    results = evaluate(cfg, data, work / "pred")
    _atomic_write_text(work / "results.json", results_text(results))
    return results


# --- lambda sweep -------------------------------------------------------------

def lambda_label(lam: float) -> str:
    if lam == 0.0:
        return "no-adversarial"
    if lam == 1.0:
        return "boundary-unstable"
    return "adversarial"


def with_lambda(cfg: RunConfig, lam: float) -> RunConfig:
    if not 0.0 <= lam <= 1.0:
        raise C.ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        log.warning("lambda = 1.0 is outside the stable range; kept only as the sweep boundary")
    hyper = dataclasses.replace(cfg.cae, lam=lam, allow_unit_lambda=lam == 1.0)
    return dataclasses.replace(cfg, cae=hyper)


def sweep_lambda(cfg: RunConfig, data, out, values) -> list[dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [with_lambda(cfg, float(v)) for v in values]
    rows = []
    for lam_cfg in runs:
        lam = lam_cfg.cae.lam
        res = run_all(lam_cfg, data, out / f"lambda_{lam!r}")
        rows.append({"lambda": lam, "label": lambda_label(lam),
                     **{k: res[k] for k in ("micro_auc", "macro_auc", "rbdc", "tbdc")}})
    lines = [",".join(SWEEP_HEADER)]
    lines += [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in SWEEP_HEADER)
              for r in rows]
    _atomic_write_text(out / "sweep.csv", "\n".join(lines) + "\n")
    return rows
