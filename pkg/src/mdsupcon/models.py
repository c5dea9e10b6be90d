"""Encoder, projection head and linear classifier over named parameter arrays.

The encoder is a desk-scale convolutional stand-in for a ResNet: four
3x3 conv stages, stride-2 downsampling at the start of stages 2-4, ReLU,
then global average pooling. ``arch="deep"`` adds a second stride-1 conv
with a residual connection to every stage. There is no batch norm.

Parameters live in a flat ``name -> ndarray`` dict. Names are prefixed by
their group (``encoder.``, ``head.``, ``classifier.``) and freezing is per
group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ndtensor as nd
from .errors import ShapeError, ValidationError
from .ndtensor import Tensor

GROUPS = ("encoder", "head", "classifier")
TOTAL_STRIDE = 8


@dataclass(frozen=True)
class EncoderConfig:
    """``widths`` are the channels of stages 1-3; stage 4 emits ``feature_dim``."""

    arch: str = "small"
    widths: tuple = (16, 32, 64)
    feature_dim: int = 128
    head_dim: int = 128
    in_channels: int = 3
    image_size: int = 32

    def __post_init__(self):
        if self.arch not in ("small", "deep"):
            raise ValidationError(f"unknown arch {self.arch!r}")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValidationError("widths must list three positive stage widths")
        if self.feature_dim < 8:
            raise ValidationError("feature_dim must be >= 8")
        if self.head_dim < 1:
            raise ValidationError("head_dim must be positive")
        if self.image_size % TOTAL_STRIDE or self.image_size < 2 * TOTAL_STRIDE:
            # stage 4 sees image_size / 4 pixels and conv2d needs at least 3
            raise ValidationError(f"image size must be a multiple of {TOTAL_STRIDE} and >= {2 * TOTAL_STRIDE}")

    @property
    def stage_channels(self) -> tuple:
        return (*self.widths, self.feature_dim)


@dataclass
class ModelBundle:
    config: EncoderConfig
    params: dict
    frozen: set = field(default_factory=set)
    metadata: dict = field(default_factory=dict)

    def group_params(self, group: str) -> dict:
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] == group}

    def has_group(self, group: str) -> bool:
        return any(k.startswith(group + ".") for k in self.params)

    def n_params(self, group: str | None = None) -> int:
        items = self.params.items() if group is None else self.group_params(group).items()
        return int(sum(v.size for _, v in items))

    def freeze(self, *groups: str) -> None:
        for g in groups:
            if g not in GROUPS:
                raise ValidationError(f"unknown parameter group {g!r}")
        self.frozen.update(groups)

    def unfreeze(self, *groups: str) -> None:
        self.frozen.difference_update(groups)

    def is_frozen(self, name: str) -> bool:
        return name.split(".", 1)[0] in self.frozen

    def drop_group(self, group: str) -> None:
        for k in list(self.group_params(group)):
            del self.params[k]

    def as_tensors(self) -> dict:
        """Wrap parameters for one forward/backward pass; frozen ones get no gradient."""
        return {k: Tensor(v, requires_grad=not self.is_frozen(k)) for k, v in self.params.items()}

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            set(self.frozen),
            dict(self.metadata),
        )


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _encoder_shapes(cfg: EncoderConfig) -> list:
    shapes = []
    c_in = cfg.in_channels
    for i, c_out in enumerate(cfg.stage_channels, start=1):
        shapes.append((f"encoder.conv{i}", (c_out, c_in, 3, 3)))
        if cfg.arch == "deep":
            shapes.append((f"encoder.conv{i}r", (c_out, c_out, 3, 3)))
        c_in = c_out
    return shapes


def init_params(
    cfg: EncoderConfig,
    seed: int,
    n_classes: int | None = None,
    with_head: bool = True,
    dtype=np.float32,
) -> ModelBundle:
    """Kaiming-normal weights (std sqrt(2/fan_in)), zero biases, all drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _encoder_shapes(cfg):
        params[name + ".w"] = _kaiming(rng, shape, shape[1] * 9, dtype)
        params[name + ".b"] = np.zeros(shape[0], dtype=dtype)
    if with_head:
        d = cfg.feature_dim
        params["head.fc1.w"] = _kaiming(rng, (d, d), d, dtype)
        params["head.fc1.b"] = np.zeros(d, dtype=dtype)
        params["head.fc2.w"] = _kaiming(rng, (d, cfg.head_dim), d, dtype)
        params["head.fc2.b"] = np.zeros(cfg.head_dim, dtype=dtype)
    if n_classes is not None:
        params.update(_classifier_params(cfg, n_classes, rng, dtype))
    return ModelBundle(cfg, params)


def _classifier_params(cfg: EncoderConfig, n_classes: int, rng, dtype) -> dict:
    if n_classes < 2:
        raise ValidationError("a classifier needs at least two classes")
    d = cfg.feature_dim
    return {
        "classifier.w": _kaiming(rng, (d, n_classes), d, dtype),
        "classifier.b": np.zeros(n_classes, dtype=dtype),
    }


def attach_classifier(bundle: ModelBundle, n_classes: int, seed: int) -> ModelBundle:
    """Linear-evaluation model: encoder copied and frozen, head dropped, fresh classifier."""
    out = bundle.copy()
    out.drop_group("head")
    out.drop_group("classifier")
    dtype = next(iter(out.params.values())).dtype
    out.params.update(_classifier_params(out.config, n_classes, np.random.default_rng(seed), dtype))
    out.frozen = {"encoder"}
    return out


def _t(params: Mapping, name: str) -> Tensor:
    return nd.as_tensor(params[name])


def encoder_forward(cfg: EncoderConfig, params: Mapping, images) -> Tensor:
    x = nd.as_tensor(images)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"encoder expects (B, {', '.join(map(str, expected))}) input, got {x.shape}")
    if x.data.size and (x.data.min() < 0 or x.data.max() > 1):
        raise ValidationError("encoder input pixels must lie in [0, 1]")
    for i in range(1, 5):
        stride = 1 if i == 1 else 2
        x = nd.relu(nd.conv2d(x, _t(params, f"encoder.conv{i}.w"), _t(params, f"encoder.conv{i}.b"), stride))
        if cfg.arch == "deep":
            r = nd.conv2d(x, _t(params, f"encoder.conv{i}r.w"), _t(params, f"encoder.conv{i}r.b"), 1)
            x = nd.relu(nd.add(r, x))
    return nd.global_avg_pool(x)


def projection_forward(params: Mapping, features) -> Tensor:
    h = nd.relu(nd.dense(nd.as_tensor(features), _t(params, "head.fc1.w"), _t(params, "head.fc1.b")))
    z = nd.dense(h, _t(params, "head.fc2.w"), _t(params, "head.fc2.b"))
    return nd.l2_normalize(z)


def classifier_forward(params: Mapping, features) -> Tensor:
    return nd.dense(nd.as_tensor(features), _t(params, "classifier.w"), _t(params, "classifier.b"))
