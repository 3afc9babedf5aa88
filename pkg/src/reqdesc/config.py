"""Flat ``key = value`` configuration files.

Every tunable lives on one line. Unknown keys are rejected so that typos
fail loudly. ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .datagen import HarrisParams, HomographyRanges, JitterConfig, PairConfig
from .eqnn import BackboneConfig
from .errors import ConfigError
from .losses import LossConfig
from .matcheval import EvalConfig, RansacConfig, ScalePyramidConfig
from .orientation import CandidateConfig
from .trainer import TrainConfig


@dataclass
class Settings:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    candidates: CandidateConfig = field(default_factory=CandidateConfig)
    pyramid: ScalePyramidConfig = field(default_factory=ScalePyramidConfig)
    use_pyramid: bool = False
    bench_size: int = 96
    check_size: int = 64
    check_inputs: int = 10
    grad_size: int = 16
    grad_keypoints: int = 4
    grad_coords: int = 6
    grad_tol: float = 1e-3
    equivariance_tol: float = 1e-4


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _join(v) -> str:
    return ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return _join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (path from Settings, parser)
KEYS: dict[str, tuple[str, object]] = {
    # backbone
    "group_order": ("train.backbone.group_order", int),
    "widths": ("train.backbone.widths", _ints),
    "strides": ("train.backbone.strides", _ints),
    "kernel_size": ("train.backbone.kernel_size", int),
    "pyramid_layers": ("train.backbone.pyramid_layers", _ints),
    "init_seed": ("train.backbone.init_seed", int),
    # losses
    "tau": ("train.loss.tau", float),
    "alpha": ("train.loss.alpha", float),
    "inclusive_denominator": ("train.loss.inclusive_denominator", _bool),
    # optimisation
    "batch_size": ("train.batch_size", int),
    "lr": ("train.lr", float),
    "weight_decay": ("train.weight_decay", float),
    "epochs": ("train.epochs", int),
    "iters_per_epoch": ("train.iters_per_epoch", int),
    "beta1": ("train.beta1", float),
    "beta2": ("train.beta2", float),
    "adam_eps": ("train.adam_eps", float),
    "seed": ("train.seed", int),
    # pair synthesis
    "crop_size": ("train.pair.crop_size", int),
    "num_keypoints": ("train.pair.num_keypoints", int),
    "jitter_source": ("train.pair.jitter_source", _bool),
    "rotation_min": ("train.pair.homography.rotation[0]", float),
    "rotation_max": ("train.pair.homography.rotation[1]", float),
    "scale_min": ("train.pair.homography.scale[0]", float),
    "scale_max": ("train.pair.homography.scale[1]", float),
    "translation": ("train.pair.homography.translation", float),
    "perspective": ("train.pair.homography.perspective", float),
    "brightness": ("train.pair.jitter.brightness", float),
    "contrast": ("train.pair.jitter.contrast", float),
    "noise": ("train.pair.jitter.noise", float),
    "blur": ("train.pair.jitter.blur", float),
    "harris_sigma": ("train.pair.harris.harris_sigma", float),
    "harris_k": ("train.pair.harris.harris_k", float),
    "nms_radius": ("train.pair.harris.nms_radius", int),
    "border_margin": ("train.pair.harris.border_margin", int),
    # inference and evaluation
    "candidate_ratio": ("candidates.candidate_ratio", float),
    "candidate_kmax": ("candidates.candidate_kmax", int),
    "use_pyramid": ("use_pyramid", _bool),
    "pyramid_factor": ("pyramid.factor", float),
    "pyramid_max": ("pyramid.max_side", int),
    "pyramid_min": ("pyramid.min_side", int),
    "eval_keypoints": ("eval.num_keypoints", int),
    "thresholds": ("eval.thresholds", _floats),
    "hest_eps": ("eval.hest_eps", float),
    "ransac_iters": ("eval.ransac.iterations", int),
    "ransac_threshold": ("eval.ransac.inlier_threshold", float),
    "ransac_seed": ("eval.ransac.seed", int),
    "bench_size": ("bench_size", int),
    # self-checks
    "check_size": ("check_size", int),
    "check_inputs": ("check_inputs", int),
    "equivariance_tol": ("equivariance_tol", float),
    "grad_size": ("grad_size", int),
    "grad_keypoints": ("grad_keypoints", int),
    "grad_coords": ("grad_coords", int),
    "grad_tol": ("grad_tol", float),
}


def _resolve(root, path: str):
    """Return (owner, attribute, tuple index or None) for a dotted path."""
    parts = path.split(".")
    obj = root
    for p in parts[:-1]:
        obj = getattr(obj, p)
    last = parts[-1]
    if last.endswith("]"):
        name, idx = last[:-1].split("[")
        return obj, name, int(idx)
    return obj, last, None


def get_value(settings: Settings, key: str):
    obj, name, idx = _resolve(settings, KEYS[key][0])
    v = getattr(obj, name)
    return v[idx] if idx is not None else v


def set_value(settings: Settings, key: str, raw: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    path, parse = KEYS[key]
    try:
        value = parse(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    obj, name, idx = _resolve(settings, path)
    if idx is not None:
        cur = list(getattr(obj, name))
        cur[idx] = value
        value = tuple(cur)
    setattr(obj, name, value)


def _revalidate(s: Settings) -> None:
    t = s.train
    try:
        t.backbone = BackboneConfig(**vars(t.backbone))
        t.loss = LossConfig(**vars(t.loss))
        t.pair = PairConfig(crop_size=t.pair.crop_size, num_keypoints=t.pair.num_keypoints,
                            jitter_source=t.pair.jitter_source,
                            homography=HomographyRanges(**vars(t.pair.homography)),
                            jitter=JitterConfig(**vars(t.pair.jitter)),
                            harris=HarrisParams(**vars(t.pair.harris)))
        s.train = TrainConfig(**{k: getattr(t, k) for k in vars(t)})
        s.candidates = CandidateConfig(**vars(s.candidates))
        s.pyramid = ScalePyramidConfig(**vars(s.pyramid))
        s.eval.ransac = RansacConfig(**vars(s.eval.ransac))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if any(v < 0 for v in t.pair.jitter.__dict__.values()):
        raise ConfigError("jitter magnitudes must be >= 0")
    if any(x <= 0 for x in s.eval.thresholds):
        raise ConfigError("thresholds must be positive")
    s.eval.harris = t.pair.harris
    s.eval.candidates = s.candidates
    s.eval.pyramid = s.pyramid if s.use_pyramid else None


def parse_config(text: str, base: Settings | None = None) -> Settings:
    s = base or Settings()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (x.strip() for x in line.split("=", 1))
        set_value(s, key, raw)
    _revalidate(s)
    return s


def load_config(path) -> Settings:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text())


def dump_config(s: Settings) -> str:
    return "".join(f"{k} = {_show(get_value(s, k))}\n" for k in KEYS)


def default_settings() -> Settings:
    s = Settings()
    _revalidate(s)
    return s
