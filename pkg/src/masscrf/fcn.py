"""Position-prior fully convolutional unary networks and unary fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import BadParam, LengthMismatch, ShapeMismatch
from .tensor import Tensor

SIZE = 40
PROB_FLOOR = 1e-12
PRIOR_SMOOTHING = 1e-6


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kh: int
    kw: int


@dataclass(frozen=True)
class FcnConfig:
    """Three conv layers (two pooled) followed by a 40x40 transposed conv to 2 channels."""

    name: str
    layers: tuple
    final_kernel: int = SIZE
    out_channels: int = 2

    def __post_init__(self):
        if len(self.layers) != 3:
            raise BadParam(f"{self.name}: expected 3 conv layers, got {len(self.layers)}")
        side = SIZE // 4
        k3 = self.layers[2]
        if k3.kh > side or k3.kw > side:
            raise BadParam(f"{self.name}: layer-3 kernel {k3.kh}x{k3.kw} exceeds the {side}x{side} pooled map")

    @property
    def pre_crop(self) -> tuple:
        k3 = self.layers[2]
        side = SIZE // 4
        return (side - k3.kh + self.final_kernel, side - k3.kw + self.final_kernel)


TABLE1 = {
    "fcn1": FcnConfig("fcn1", (ConvSpec(6, 5, 5), ConvSpec(12, 5, 5), ConvSpec(588, 7, 7))),
    "fcn2": FcnConfig("fcn2", (ConvSpec(9, 4, 4), ConvSpec(12, 4, 4), ConvSpec(588, 7, 7))),
    "fcn3": FcnConfig("fcn3", (ConvSpec(16, 3, 3), ConvSpec(13, 3, 3), ConvSpec(415, 8, 8))),
    "fcn4": FcnConfig("fcn4", (ConvSpec(37, 2, 2), ConvSpec(12, 2, 2), ConvSpec(355, 9, 9))),
}


def get_config(name) -> FcnConfig:
    if isinstance(name, FcnConfig):
        return name
    try:
        return TABLE1[name]
    except KeyError:
        raise BadParam(f"unknown FCN config {name!r}; choose from {sorted(TABLE1)}") from None


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def prior_bias(prior: np.ndarray) -> np.ndarray:
    """Log-prior final-layer bias, channel 0 background, channel 1 foreground."""
    prior = np.asarray(prior, dtype=np.float64)
    return np.stack([np.log(1.0 - prior + PRIOR_SMOOTHING), np.log(prior + PRIOR_SMOOTHING)])


class FcnModel:
    def __init__(self, config, prior: Optional[np.ndarray] = None, seed: int = 0, train_prior: bool = True):
        self.config = get_config(config)
        if prior is None:
            prior = np.full((SIZE, SIZE), 0.5)
        if np.shape(prior) != (SIZE, SIZE):
            raise ShapeMismatch(f"prior must be {SIZE}x{SIZE}, got {np.shape(prior)}")
        idx = sorted(TABLE1).index(self.config.name) if self.config.name in TABLE1 else 99
        rng = np.random.default_rng([seed, idx])
        self.params: dict = {}
        cin = 1
        for n, spec in enumerate(self.config.layers, start=1):
            shape = (spec.filters, cin, spec.kh, spec.kw)
            fan_in, fan_out = cin * spec.kh * spec.kw, spec.filters * spec.kh * spec.kw
            self.params[f"conv{n}.w"] = Tensor(_glorot(rng, shape, fan_in, fan_out), requires_grad=True)
            self.params[f"conv{n}.b"] = Tensor(np.zeros(spec.filters), requires_grad=True)
            cin = spec.filters
        k, c = self.config.final_kernel, self.config.out_channels
        self.params["deconv.w"] = Tensor(_glorot(rng, (cin, c, k, k), cin * k * k, c * k * k), requires_grad=True)
        self.params["prior_bias"] = Tensor(prior_bias(prior), requires_grad=train_prior)

    def parameters(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def logits(self, images) -> Tensor:
        p = self.params
        x = T.as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != (1, SIZE, SIZE):
            raise ShapeMismatch(f"expected images of shape [B,1,{SIZE},{SIZE}], got {x.shape}")
        x = T.maxpool2x2(T.tanh(T.conv2d(x, p["conv1.w"], p["conv1.b"], padding="same")))
        x = T.maxpool2x2(T.tanh(T.conv2d(x, p["conv2.w"], p["conv2.b"], padding="same")))
        x = T.tanh(T.conv2d(x, p["conv3.w"], p["conv3.b"], padding="valid"))
        x = T.transposed_conv2d(x, p["deconv.w"], stride=1)
        top = (x.shape[2] - SIZE) // 2
        left = (x.shape[3] - SIZE) // 2
        x = x[:, :, top : top + SIZE, left : left + SIZE]
        return x + p["prior_bias"]

    def __call__(self, images) -> Tensor:
        return fcn_forward(self, images)


def fcn_forward(model: FcnModel, image) -> Tensor:
    """Per-pixel class probabilities [B,2,40,40] for preprocessed images [B,1,40,40]."""
    return T.softmax_channels(model.logits(image))


def unary_from_fcn(probabilities) -> Tensor:
    """Unary potentials ``-log p`` with ``p`` floored at 1e-12."""
    return -T.log(probabilities, floor=PROB_FLOOR)


def probabilities_from_unary(unary, axis: int = 1) -> Tensor:
    return T.softmax(-T.as_tensor(unary), axis=axis)


def fuse_unaries(fields: Sequence, weights) -> Tensor:
    """Pointwise weighted sum of unary fields; ``weights`` may be a 1-d Tensor."""
    if len(fields) == 0:
        raise LengthMismatch("need at least one unary field")
    n_weights = weights.shape[0] if isinstance(weights, Tensor) else len(weights)
    if n_weights != len(fields):
        raise LengthMismatch(f"{len(fields)} fields but {n_weights} weights")
    total = None
    for k, f in enumerate(fields):
        term = weights[k] * f
        total = term if total is None else total + term
    return total


def one_hot(mask) -> np.ndarray:
    """[..., H, W] binary mask to [..., 2, H, W] indicator with the label axis before H."""
    mask = np.asarray(mask)
    return np.stack([1.0 - mask, mask.astype(np.float64)], axis=-3)


def fcn_nll_loss(probabilities, mask) -> Tensor:
    """Mean over pixels (and images) of ``-log p(true label)``, ``p`` floored at 1e-12."""
    probabilities = T.as_tensor(probabilities)
    target = one_hot(mask)
    if target.shape != probabilities.shape:
        raise ShapeMismatch(f"probabilities {probabilities.shape} vs mask {np.shape(mask)}")
    picked = (T.log(probabilities, floor=PROB_FLOOR) * target).sum(axis=-3)
    return -picked.mean()


def layer_param_counts(config) -> list:
    """Weights + biases of each of the three Table-1 conv layers."""
    config = get_config(config)
    counts, cin = [], 1
    for spec in config.layers:
        counts.append(spec.filters * cin * spec.kh * spec.kw + spec.filters)
        cin = spec.filters
    return counts


def param_count(model: FcnModel) -> int:
    return int(sum(t.size for t in model.params.values()))
