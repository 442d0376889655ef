"""Flat ``key = value`` configuration files.

Keys are the field names of SynthConfig, TrainConfig and ExplainConfig
(shared names such as ``seed`` set every section that has them), plus
``encoder.layers`` and ``encoder.feature_channels`` for the network shape.
Values are parsed to the type of the field's default; tuples take
comma-separated entries, ``encoder.layers`` takes ``k,s,p,c`` groups
separated by ``;``.
"""

from __future__ import annotations

from dataclasses import fields, replace

from .encoder import ConvSpec, EncoderConfig
from .saliency import ExplainConfig
from .synthdata import SynthConfig
from .training import TrainConfig

SECTIONS = {"synth": SynthConfig, "train": TrainConfig, "explain": ExplainConfig}
ENCODER_KEYS = ("encoder.layers", "encoder.feature_channels")


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.key = key


def _defaults(cls):
    return {f.name: getattr(cls(), f.name) for f in fields(cls)}


def known_keys():
    keys = set(ENCODER_KEYS)
    for cls in SECTIONS.values():
        keys.update(f.name for f in fields(cls))
    return keys


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_like(default, text):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if default and all(isinstance(v, int) for v in default):
            return tuple(int(s) for s in items)
        return tuple(float(s) for s in items)
    return text


def _parse_layers(text):
    out = []
    for group in text.split(";"):
        if group.strip():
            vals = [int(v) for v in group.split(",")]
            if len(vals) != 4:
                raise ValueError(f"layer {group.strip()!r} needs kernel,stride,padding,channels")
            out.append(ConvSpec(*vals))
    if not out:
        raise ValueError("no layers given")
    return tuple(out)


def parse_text(text):
    """Raw key -> typed value mapping; unknown keys and bad values raise ConfigError."""
    keys = known_keys()
    defaults = {}
    for cls in SECTIONS.values():
        defaults.update(_defaults(cls))
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"unknown config key {key!r}", key=key, line=lineno)
        try:
            if key == "encoder.layers":
                out[key] = _parse_layers(value)
            elif key == "encoder.feature_channels":
                out[key] = int(value)
            elif key == "sizes":
                out[key] = tuple(int(v) for v in value.split(",") if v.strip())
            else:
                out[key] = _parse_like(defaults[key], value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key=key, line=lineno) from None
    return out


def load(path):
    if path is None:
        return {}
    with open(path) as fh:
        return parse_text(fh.read())


def section(values, name, seed=None):
    """Build the named config dataclass from parsed values (``seed`` overrides)."""
    cls = SECTIONS[name]
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in values.items() if k in names}
    if seed is not None and "seed" in names:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from None


def encoder_config(values, image_shape):
    """EncoderConfig for images of ``image_shape`` (H, W, C); the feature grid follows the layers."""
    base = EncoderConfig()
    layers = values.get("encoder.layers", base.layers)
    h, w = image_shape[0], image_shape[1]
    for spec in layers:
        h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
    try:
        return replace(base, height=image_shape[0], width=image_shape[1], channels=image_shape[2],
                       layers=layers, feature_height=h, feature_width=w,
                       feature_channels=values.get("encoder.feature_channels", base.feature_channels))
    except ValueError as exc:
        raise ConfigError(f"invalid encoder settings: {exc}") from None
