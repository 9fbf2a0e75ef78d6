"""Run configuration: a flat ``key = value`` text format with ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from aed.cae import TrainHyper
from aed.clf import ClfHyper
from aed.scene import AnomalyKind, ObjectKind, PseudoAbnormalConfig, SceneConfig
from aed.scoring import FilterConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    pseudo: PseudoAbnormalConfig = field(default_factory=PseudoAbnormalConfig)
    cae: TrainHyper = field(default_factory=TrainHyper)
    clf: ClfHyper = field(default_factory=ClfHyper)
    filters: FilterConfig = field(default_factory=FilterConfig)
    alpha: float = 0.1
    beta: float = 0.1
    seed: int = 0
    train_episodes: int = 6
    test_episodes: int = 10
    # cap on normal training samples per stream (0 keeps all)
    max_train_samples: int = 0
    diff_mode: str = "absolute"


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _kinds_to_text(kinds) -> str:
    return ",".join(f"{k.shape}:{k.size}:{k.speed_multiplier}" for k in kinds)


def _kinds_from_text(s: str) -> tuple[AnomalyKind, ...]:
    out = []
    for item in s.split(","):
        if not item.strip():
            continue
        shape, size, mult = item.strip().split(":")
        out.append(AnomalyKind(shape, int(size), int(mult)))
    return tuple(out)


def _flatten(cfg: RunConfig) -> dict[str, str]:
    sc = cfg.scene
    nk = sc.normal_kinds[0]
    return {
        "seed": _fmt(cfg.seed),
        "scene.height": _fmt(sc.height),
        "scene.width": _fmt(sc.width),
        "scene.length": _fmt(sc.length),
        "scene.num_objects": _fmt(sc.num_objects),
        "scene.normal_shapes": ",".join(k.shape for k in sc.normal_kinds),
        "scene.size_range": _fmt(nk.size_range),
        "scene.speed_range": _fmt(nk.speed_range),
        "scene.intensity_range": _fmt(nk.intensity_range),
        "scene.anomaly_kinds": _kinds_to_text(sc.anomaly_kinds),
        "scene.anomaly_span": _fmt(sc.anomaly_span),
        "scene.background": _fmt(sc.background),
        "scene.background_noise": _fmt(sc.background_noise),
        "data.train_episodes": _fmt(cfg.train_episodes),
        "data.test_episodes": _fmt(cfg.test_episodes),
        "data.max_train_samples": _fmt(cfg.max_train_samples),
        "pseudo.pool_size": _fmt(cfg.pseudo.pool_size),
        "pseudo.textures": ",".join(cfg.pseudo.textures),
        "pseudo.flow_strides": _fmt(cfg.pseudo.flow_strides),
        "cae.lr": _fmt(cfg.cae.lr),
        "cae.lambda": _fmt(cfg.cae.lam),
        "cae.epochs": _fmt(cfg.cae.epochs),
        "cae.batch_size": _fmt(cfg.cae.batch_size),
        "cae.loss": cfg.cae.loss_kind,
        "clf.lr": _fmt(cfg.clf.lr),
        "clf.epochs": _fmt(cfg.clf.epochs),
        "clf.batch_size": _fmt(cfg.clf.batch_size),
        "clf.diff_mode": cfg.diff_mode,
        "filter.kernel": _fmt(cfg.filters.kernel),
        "filter.sigma": _fmt(cfg.filters.sigma),
        "filter.radius": _fmt(cfg.filters.radius),
        "metric.alpha": _fmt(cfg.alpha),
        "metric.beta": _fmt(cfg.beta),
    }


KEYS = tuple(_flatten(RunConfig()))


def _build(flat: dict[str, str]) -> RunConfig:
    g = flat.__getitem__
    shapes = tuple(s.strip() for s in g("scene.normal_shapes").split(",") if s.strip())
    size_r, speed_r, inten_r = _ints(g("scene.size_range")), _floats(g("scene.speed_range")), \
        _floats(g("scene.intensity_range"))
    kinds = tuple(ObjectKind(s, size_r, speed_r, inten_r) for s in shapes)
    scene = SceneConfig(
        height=int(g("scene.height")), width=int(g("scene.width")), length=int(g("scene.length")),
        num_objects=int(g("scene.num_objects")), normal_kinds=kinds,
        anomaly_kinds=_kinds_from_text(g("scene.anomaly_kinds")),
        anomaly_span=_ints(g("scene.anomaly_span")),
        background=float(g("scene.background")), background_noise=float(g("scene.background_noise")),
        seed=int(g("seed")))
    scene.validate()
    pseudo = PseudoAbnormalConfig(int(g("pseudo.pool_size")),
                                  tuple(s.strip() for s in g("pseudo.textures").split(",")),
                                  _ints(g("pseudo.flow_strides")))
    cae = TrainHyper(float(g("cae.lr")), float(g("cae.lambda")), int(g("cae.epochs")),
                     int(g("cae.batch_size")), g("cae.loss"))
    clf = ClfHyper(float(g("clf.lr")), int(g("clf.epochs")), int(g("clf.batch_size")))
    kernel = _ints(g("filter.kernel"))
    if len(kernel) != 3:
        raise ConfigError("filter.kernel needs three sides (frames, rows, cols)")
    filters = FilterConfig(kernel, float(g("filter.sigma")), int(g("filter.radius")))
    diff_mode = g("clf.diff_mode")
    if diff_mode not in ("absolute", "signed"):
        raise ConfigError(f"clf.diff_mode must be absolute or signed, got {diff_mode!r}")
    return RunConfig(scene, pseudo, cae, clf, filters, float(g("metric.alpha")),
                     float(g("metric.beta")), int(g("seed")), int(g("data.train_episodes")),
                     int(g("data.test_episodes")), int(g("data.max_train_samples")), diff_mode)


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in _flatten(cfg).items())


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    flat = _flatten(base or RunConfig())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in flat:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        flat[key] = value
    try:
        return _build(flat)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def override(cfg: RunConfig, **pairs: str) -> RunConfig:
    """Apply flat ``key=value`` overrides, e.g. ``override(cfg, **{"cae.lambda": "0"})``."""
    return parse_text("".join(f"{k} = {v}\n" for k, v in pairs.items()), cfg)


def load(path) -> RunConfig:
    try:
        return parse_text(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
