"""Small convolutional encoder followed by a two-layer 1x1 shaping block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, conv2d, relu


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    padding: int
    out_channels: int


def _default_layers():
    return (
        ConvSpec(3, 2, 1, 16),
        ConvSpec(3, 2, 1, 32),
        ConvSpec(3, 2, 1, 64),
        ConvSpec(2, 1, 0, 64),  # 8x8 -> 7x7
    )


@dataclass(frozen=True)
class EncoderConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    layers: tuple = field(default_factory=_default_layers)
    feature_height: int = 7
    feature_width: int = 7
    feature_channels: int = 128

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            spec if isinstance(spec, ConvSpec) else ConvSpec(*spec) for spec in self.layers))
        if self.feature_channels <= 0:
            raise ValueError("feature_channels must be positive")
        h, w = self.height, self.width
        for spec in self.layers:
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"stride plan collapses the input to {h}x{w}")
        if (h, w) != (self.feature_height, self.feature_width):
            raise ValueError(
                f"stride plan maps {self.height}x{self.width} to {h}x{w}, "
                f"expected {self.feature_height}x{self.feature_width}")

    @property
    def image_shape(self):
        return (self.height, self.width, self.channels)

    @property
    def feature_shape(self):
        return (self.feature_height, self.feature_width, self.feature_channels)

    @property
    def num_regions(self):
        return self.feature_height * self.feature_width

    def to_dict(self):
        return {
            "height": self.height, "width": self.width, "channels": self.channels,
            "layers": [[s.kernel, s.stride, s.padding, s.out_channels] for s in self.layers],
            "feature_height": self.feature_height, "feature_width": self.feature_width,
            "feature_channels": self.feature_channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = tuple(ConvSpec(*spec) for spec in d["layers"])
        return cls(**d)


def param_names(config):
    names = []
    for i in range(len(config.layers)):
        names += [f"conv{i}.w", f"conv{i}.b"]
    names += ["shape0.w", "shape0.b", "shape1.w", "shape1.b"]
    return names


def init_params(config, seed):
    """Kaiming-normal kernels (std sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    cin = config.channels
    shapes = [(s.kernel, s.kernel, s.out_channels) for s in config.layers]
    shapes += [(1, 1, config.feature_channels), (1, 1, config.feature_channels)]
    prefixes = [f"conv{i}" for i in range(len(config.layers))] + ["shape0", "shape1"]
    for prefix, (kh, kw, cout) in zip(prefixes, shapes):
        fan_in = kh * kw * cin
        params[f"{prefix}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kh, kw, cin, cout))
        params[f"{prefix}.b"] = np.zeros(cout)
        cin = cout
    return params


def encode(image, params, config):
    """Feature maps F(x) of shape (N, H1, W1, C1); a single HxWxC image gets N=1.

    ``params`` values may be arrays or Tensors; pass Tensors with
    ``requires_grad`` to differentiate with respect to them.
    """
    x = as_tensor(image)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.shape[1:] != config.image_shape:
        raise ShapeError("encode", f"image shape {x.shape[1:]} != configured {config.image_shape}")
    p = {k: as_tensor(v) for k, v in params.items()}
    for i, spec in enumerate(config.layers):
        x = relu(conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], spec.stride, spec.padding))
    x = relu(conv2d(x, p["shape0.w"], p["shape0.b"]))
    x = relu(conv2d(x, p["shape1.w"], p["shape1.b"]))
    return x


def as_trainable(params):
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}
