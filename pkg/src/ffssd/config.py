"""Run configuration files.

A small INI dialect: ``[section]`` headers, ``key = value`` lines and ``#``
comments. Values are converted according to the type of the field's default
value; tuples are comma separated and nested tuples use ``;`` between rows::

    [model]
    prior_scales = 0.1, 0.3, 0.55
    aspect_ratios = 1.0, 2.0, 0.5; 1.0, 2.0, 0.5, 3.0, 0.3333333333333333

Unknown sections or keys are errors that name the line.
"""
import dataclasses
import re
from dataclasses import dataclass, field

from .fusion import FusionConfig
from .model import ModelConfig
from .synth import SceneSpec, atomic_write_text
from .train import TrainConfig


@dataclass
class EvalConfig:
    score_threshold: float = 0.01
    nms_threshold: float = 0.45
    top_k: int = 200
    iou_threshold: float = 0.5
    batch_size: int = 16


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SceneSpec = field(default_factory=SceneSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def fusion(self):
        return self.model.fusion


SECTIONS = ("model", "fusion", "train", "data", "eval")
_INT = re.compile(r"[+-]?\d+")


class ConfigError(ValueError):
    pass


def _section_defaults(name):
    return {"model": ModelConfig, "fusion": FusionConfig, "train": TrainConfig,
            "data": SceneSpec, "eval": EvalConfig}[name]()


def _fields(obj):
    return [f.name for f in dataclasses.fields(obj) if not (isinstance(obj, ModelConfig) and f.name == "fusion")]


def _leaf(text, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        if not _INT.fullmatch(text):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_value(text, default):
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            # element types follow the first default row, e.g. (int, float) milestones
            proto = default[0]
            return tuple(tuple(_leaf(v, proto[min(i, len(proto) - 1)]) for i, v in enumerate(row.split(",")))
                         for row in text.split(";"))
        proto = default[0] if default else ""
        if not text.strip():
            return ()
        return tuple(_leaf(v, proto) for v in text.split(","))
    return _leaf(text, default)


def render_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(render_value(row) for row in value)
        return ", ".join(render_value(v) for v in value)
    return str(value)


def _target(cfg, section):
    return cfg.model.fusion if section == "fusion" else getattr(cfg, section)


def render(cfg):
    lines = []
    for section in SECTIONS:
        obj = _target(cfg, section)
        lines.append(f"[{section}]")
        for name in _fields(obj):
            lines.append(f"{name} = {render_value(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)


def parse(text, source="<config>"):
    values = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1].strip() not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section {line}")
            section = line[1:-1].strip()
            continue
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any section")
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: [{section}] expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        defaults = _section_defaults(section)
        if key not in _fields(defaults):
            raise ConfigError(f"{source}:{lineno}: [{section}] unknown key {key!r}")
        try:
            values[section][key] = parse_value(value, getattr(defaults, key))
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: [{section}] {key}: {e}") from None
    try:
        fusion = FusionConfig(**values["fusion"])
        return RunConfig(model=ModelConfig(fusion=fusion, **values["model"]),
                         train=TrainConfig(**values["train"]),
                         data=SceneSpec(**values["data"]),
                         eval=EvalConfig(**values["eval"]))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: invalid configuration: {e}") from None


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse(f.read(), str(path))


def save_config(path, cfg):
    atomic_write_text(path, render(cfg))
