"""Experiment configuration: ``key=value`` lines with dotted sections.

    model.image_size=28
    meta.algorithms=FOMAML,ANIL
    widen.z=45,35,20,10
    seeds=7,8,9

Blank lines and ``#`` comments are ignored.  Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .autodiff import ConfigurationError
from .data import BlurConfig, SynthGlyphConfig
from .meta import ALGORITHMS, InnerConfig, MetaConfig
from .nn import ModelConfig
from .widening import MAX_ACU, PRESETS, WidenPlan


class ConfigError(ConfigurationError):
    pass


@dataclass
class EpisodeConfig:
    k_shot: int = 1
    train_queries: int = 2
    eval_queries: int = 5


@dataclass
class EvalConfig:
    n_task_batches: int = 100
    inner_steps: int = 10
    alpha: float = 0.4
    scope: str = "head_only"
    per_group_lr: dict[str, float] | None = None
    workers: int = 1

    def inner(self, scope: str | None = None) -> InnerConfig:
        return InnerConfig(self.inner_steps, self.alpha, scope or self.scope, self.per_group_lr)


@dataclass
class DataConfig:
    source: str = "synthetic"
    root: str | None = None
    channels: int = 1
    rotate: bool = False
    n_train_classes: int = 240
    split_seed: int = 0
    invert: str = "auto"
    synth: SynthGlyphConfig = field(default_factory=SynthGlyphConfig)


@dataclass
class WidenSettings:
    z: tuple[int, ...] = PRESETS["mac_opt_omniglot_text"]
    acu_init: str = "standard_normal"
    train_hidden_zero_blocks: bool = False
    deep: bool = False


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    algorithms: tuple[str, ...] = ("FOMAML", "ANIL")
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    widen: WidenSettings = field(default_factory=WidenSettings)
    blur: BlurConfig = field(default_factory=BlurConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: tuple[int, ...] = (7,)
    output_dir: str = "runs/default"
    log_every: int = 100

    def plan(self, seed: int, n_modules: int | None = None) -> WidenPlan:
        z = tuple(self.widen.z)
        n = n_modules or self.model.n_modules
        return WidenPlan(z + (0,) * (n - len(z)), seed)


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _bool(v: str) -> bool:
    lv = v.strip().lower()
    if lv in ("1", "true", "yes", "on"):
        return True
    if lv in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _plan(v: str) -> tuple[int, ...]:
    return PRESETS[v] if v in PRESETS else _ints(v)


# key -> (section path, attribute, converter)
_KEYS = {
    **{f"model.{f.name}": ("model", f.name, str if f.name == "depth_variant" else int) for f in fields(ModelConfig)},
    "meta.iterations": ("meta", "iterations", int),
    "meta.meta_batch": ("meta", "meta_batch", int),
    "meta.eta": ("meta", "eta", float),
    "meta.outer_loss_reduction": ("meta", "outer_loss_reduction", str),
    "meta.inner_steps": ("meta.inner", "steps", int),
    "meta.inner_alpha": ("meta.inner", "alpha", float),
    "meta.algorithms": ("", "algorithms", lambda v: tuple(x.strip() for x in v.split(",") if x.strip())),
    "meta.log_every": ("", "log_every", int),
    "episode.k_shot": ("episode", "k_shot", int),
    "episode.train_queries": ("episode", "train_queries", int),
    "episode.eval_queries": ("episode", "eval_queries", int),
    "eval.n_task_batches": ("eval", "n_task_batches", int),
    "eval.inner_steps": ("eval", "inner_steps", int),
    "eval.alpha": ("eval", "alpha", float),
    "eval.scope": ("eval", "scope", str),
    "eval.lr.body": ("eval.per_group_lr", "body", float),
    "eval.lr.head": ("eval.per_group_lr", "head", float),
    "eval.workers": ("eval", "workers", int),
    "widen.z": ("widen", "z", _plan),
    "widen.acu_init": ("widen", "acu_init", str),
    "widen.train_hidden_zero_blocks": ("widen", "train_hidden_zero_blocks", _bool),
    "widen.deep": ("widen", "deep", _bool),
    "blur.kernel_choices": ("blur", "kernel_choices", _ints),
    "blur.sigma_range": ("blur", "sigma_range", _floats),
    "blur.apply": ("blur", "apply", str),
    "blur.draw": ("blur", "blur_draw", str),
    "blur.target": ("blur", "blur_target", str),
    "data.source": ("data", "source", str),
    "data.root": ("data", "root", str),
    "data.channels": ("data", "channels", int),
    "data.rotate": ("data", "rotate", _bool),
    "data.n_train_classes": ("data", "n_train_classes", int),
    "data.split_seed": ("data", "split_seed", int),
    "data.invert": ("data", "invert", str),
    **{f"data.synth.{f.name}": ("data.synth", f.name, float if f.name in ("jitter_std", "stroke_width") else int)
       for f in fields(SynthGlyphConfig)},
    "seeds": ("", "seeds", _ints),
    "output_dir": ("", "output_dir", str),
}


def parse_lines(text: str) -> dict[str, str]:
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        kv[key.strip()] = val.strip()
    return kv


def from_dict(kv: dict[str, str]) -> ExperimentConfig:
    unknown = sorted(set(kv) - set(_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    sections: dict[str, dict] = {}
    for key, raw in kv.items():
        path, attr, conv = _KEYS[key]
        try:
            sections.setdefault(path, {})[attr] = conv(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{key}={raw!r}: {exc}") from None
    try:
        inner = InnerConfig(**{"steps": 3, "alpha": 0.4, **sections.get("meta.inner", {})})
        meta = MetaConfig(**{**sections.get("meta", {}), "inner": inner})
        lr = sections.get("eval.per_group_lr")
        ev = EvalConfig(**{**sections.get("eval", {}), "per_group_lr": lr})
        ev.inner()  # validates scope
        data = DataConfig(**{**sections.get("data", {}),
                             "synth": SynthGlyphConfig(**sections.get("data.synth", {}))})
        top = sections.get("", {})
        cfg = ExperimentConfig(
            model=ModelConfig(**sections.get("model", {})).validate(),
            meta=meta,
            episode=EpisodeConfig(**sections.get("episode", {})),
            eval=ev,
            widen=WidenSettings(**sections.get("widen", {})),
            blur=BlurConfig(**sections.get("blur", {})),
            data=data,
            **top,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    bad = [a for a in cfg.algorithms if a not in ALGORITHMS]
    if bad:
        raise ConfigError(f"unknown algorithms {bad}; expected a subset of {ALGORITHMS}")
    if len(cfg.widen.z) != 4:
        raise ConfigError(f"widen.z needs one entry per standard conv module (4), got {list(cfg.widen.z)}")
    if any(z > MAX_ACU or z < 0 for z in cfg.widen.z):
        raise ConfigError(f"widen.z entries must lie in [0, {MAX_ACU}]: {list(cfg.widen.z)}")
    if cfg.data.source not in ("synthetic", "omniglot_tree", "image_tree"):
        raise ConfigError(f"data.source must be synthetic, omniglot_tree or image_tree, got {cfg.data.source!r}")
    if cfg.data.source == "synthetic" and cfg.data.synth.image_size != cfg.model.image_size:
        raise ConfigError("data.synth.image_size must equal model.image_size")
    if cfg.data.channels != cfg.model.in_channels:
        raise ConfigError("data.channels must equal model.in_channels")
    if cfg.eval.n_task_batches < 1:
        raise ConfigError("eval.n_task_batches must be >= 1")
    if cfg.episode.k_shot < 1 or cfg.episode.train_queries < 1 or cfg.episode.eval_queries < 1:
        raise ConfigError("episode sizes must be >= 1")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    return from_dict(parse_lines(p.read_text(encoding="utf-8")))


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical key=value text (round-trips through :func:`from_dict`)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return str(v)

    lines = []
    for key, (path, attr, _) in _KEYS.items():
        obj = cfg
        for part in filter(None, path.split(".")):
            obj = getattr(obj, part) if not isinstance(obj, dict) else obj.get(part)
        if obj is None:
            continue
        val = obj.get(attr) if isinstance(obj, dict) else getattr(obj, attr)
        if val is None:
            continue
        lines.append(f"{key}={fmt(val)}")
    return "\n".join(lines) + "\n"
