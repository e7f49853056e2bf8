"""Experiment config files.

Grammar, one setting per line::

    # comment
    section.key = value

Sections are ``vit``, ``train``, ``loss``, ``aug`` and ``phantom``; keys are the
fields of the matching config dataclass (``loss.lambda`` is accepted for
``loss.lam``).  Values: integers, floats (``inf`` allowed), booleans
(``true``/``false``), ``none``, bare strings, and comma-separated lists for
tuple fields such as ``vit.decoder_channels = 256,128,64,32,16``.
"""
import math
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .imgproc import AugmentConfig
from .phantom import PhantomConfig
from .train import LossConfig, TrainConfig
from .vit import ViTConfig

ALIASES = {"loss.lambda": "loss.lam"}


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}" if line is not None else f"{path}"
        elif line is not None:
            where = f"line {line}"
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(f"{where}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass
class Experiment:
    vit: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def sections(self):
        return {"vit": self.vit, "train": self.train, "loss": self.loss,
                "aug": self.aug, "phantom": self.phantom}

    def validate(self):
        self.vit.validate()
        self.train.validate()
        self.loss.validate()
        self.aug.validate()
        self.phantom.validate()
        return self


def _coerce(raw, default):
    text = raw.strip()
    low = text.lower()
    if low in ("none", "null"):
        return None
    if isinstance(default, bool):
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return math.inf if low in ("inf", "+inf") else float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        proto = default[0] if default else 0.0
        return tuple(_coerce(t, proto) for t in items)
    return text


def _field_default(cfg, name):
    value = getattr(cfg, name)
    if value is None:
        hints = typing.get_type_hints(type(cfg))
        hint = hints.get(name)
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if args and args[0] is float:
            return 0.0
        if args and args[0] is str:
            return ""
    return value


def set_value(experiment, key, raw, line=None, path=None):
    key = ALIASES.get(key, key)
    section, _, name = key.partition(".")
    sections = experiment.sections()
    if section not in sections or not name:
        raise ConfigError("unknown config key", key=key, line=line, path=path)
    cfg = sections[section]
    if name not in {f.name for f in fields(cfg)}:
        raise ConfigError("unknown config key", key=key, line=line, path=path)
    try:
        value = _coerce(raw, _field_default(cfg, name))
    except ValueError as exc:
        raise ConfigError(str(exc), key=key, line=line, path=path) from None
    setattr(cfg, name, value)


def parse(text, experiment=None, path=None):
    experiment = experiment or Experiment()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("expected 'key = value'", line=lineno, path=path)
        key, _, value = stripped.partition("=")
        set_value(experiment, key.strip(), value, line=lineno, path=path)
    return experiment


def load(path, experiment=None):
    path = Path(path)
    return parse(path.read_text(), experiment, path=path)


def dump(experiment):
    """Serialize every field; ``parse(dump(e))`` reproduces ``e``."""
    lines = []
    for section, cfg in experiment.sections().items():
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            key = "loss.lambda" if (section, f.name) == ("loss", "lam") else f"{section}.{f.name}"
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            elif isinstance(value, tuple):
                text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def from_meta(meta):
    """Rebuild an Experiment from checkpoint header strings (``section.key`` entries)."""
    exp = Experiment()
    for key, value in meta.items():
        if key.split(".", 1)[0] in exp.sections():
            set_value(exp, key, value)
    return exp
