"""The three networks: feature extractor f_theta, classifier heads g_phi and
the feature critic h_omega (set-embedding and flattened-covariance variants).

Networks are stateless; their parameters live in ParamSets and are passed in
as Nodes (differentiable) or arrays (treated as constants).
"""

import logging
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .autodiff import (
    Node,
    ParamSet,
    add,
    constant,
    flatten,
    gram,
    lift,
    matmul,
    mean_rows,
    relu,
    reshape,
    scale,
    softplus,
    take,
    tanh,
)
from .config import ModelConfig
from .errors import ShapeMismatch, VariantMismatch

logger = logging.getLogger(__name__)

Params = Mapping[str, Union[Node, np.ndarray]]

ACTIVATIONS = {"relu": relu, "tanh": tanh}
COV_MAX_FEATURE_DIM = 128


def _init_dense(
    rng: np.random.Generator, params: ParamSet, prefix: str, fan_in: int, fan_out: int
) -> None:
    std = np.sqrt(2.0 / fan_in)
    params[f"{prefix}.weight"] = rng.normal(0.0, std, (fan_in, fan_out))
    params[f"{prefix}.bias"] = np.zeros((1, fan_out))


def dense(params: Params, prefix: str, x: Node) -> Node:
    weight = params[f"{prefix}.weight"]
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(
            f"{prefix}: input width {x.shape[1]} but weight {weight.shape}"
        )
    return add(matmul(x, lift(weight)), lift(params[f"{prefix}.bias"]))


class FeatureExtractor:
    """f_theta: image batch (M, h, w) -> feature matrix (M, H).

    ``conv``: valid convolutions (im2col as a gathered matmul) with the hidden
    activation, then one fully connected layer to H. ``mlp``: flattened
    pixels through ``mlp_hidden`` dense layers, then to H.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.kind = config.extractor
        self.image_shape = tuple(config.image_shape)
        self.feature_dim = config.feature_dim
        self.activation = ACTIVATIONS[config.activation]
        self._index_cache: Dict[Tuple[int, int], np.ndarray] = {}
        self.conv_geometry = self._conv_geometry() if self.kind == "conv" else []

    def _conv_geometry(self):
        height, width = self.image_shape
        channels = 1
        k, s = self.config.kernel_size, self.config.stride
        geometry = []
        for out_channels in self.config.conv_channels:
            out_h, out_w = (height - k) // s + 1, (width - k) // s + 1
            if out_h < 1 or out_w < 1:
                raise ShapeMismatch(
                    f"image {self.image_shape} too small for "
                    f"{len(self.config.conv_channels)} conv layers "
                    f"of kernel {k}, stride {s}"
                )
            geometry.append((height, width, channels, out_h, out_w, out_channels))
            height, width, channels = out_h, out_w, out_channels
        return geometry

    @property
    def flat_width(self) -> int:
        if self.kind == "conv":
            _, _, _, out_h, out_w, out_c = self.conv_geometry[-1]
            return out_h * out_w * out_c
        if self.config.mlp_hidden:
            return self.config.mlp_hidden[-1]
        return int(np.prod(self.image_shape))

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        params = ParamSet()
        if self.kind == "conv":
            k = self.config.kernel_size
            for i, (_, _, in_c, _, _, out_c) in enumerate(self.conv_geometry, start=1):
                _init_dense(rng, params, f"conv{i}", k * k * in_c, out_c)
        else:
            width = int(np.prod(self.image_shape))
            for i, hidden in enumerate(self.config.mlp_hidden, start=1):
                _init_dense(rng, params, f"hidden{i}", width, hidden)
                width = hidden
        _init_dense(rng, params, "fc", self.flat_width, self.feature_dim)
        return params

    def _patch_index(self, batch: int, layer: int) -> np.ndarray:
        key = (batch, layer)
        if key not in self._index_cache:
            height, width, channels, out_h, out_w, _ = self.conv_geometry[layer]
            k, s = self.config.kernel_size, self.config.stride
            b = np.arange(batch).reshape(-1, 1, 1, 1, 1, 1)
            oi = np.arange(out_h).reshape(1, -1, 1, 1, 1, 1)
            oj = np.arange(out_w).reshape(1, 1, -1, 1, 1, 1)
            ki = np.arange(k).reshape(1, 1, 1, -1, 1, 1)
            kj = np.arange(k).reshape(1, 1, 1, 1, -1, 1)
            c = np.arange(channels).reshape(1, 1, 1, 1, 1, -1)
            index = ((b * height + oi * s + ki) * width + oj * s + kj) * channels + c
            self._index_cache[key] = index.reshape(
                batch * out_h * out_w, k * k * channels
            )
        return self._index_cache[key]

    def extract(self, theta: Params, x: np.ndarray) -> Node:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeMismatch(
                f"expected images of shape (M, {self.image_shape[0]}, "
                f"{self.image_shape[1]}), got {x.shape}"
            )
        batch = x.shape[0]
        if self.kind == "conv":
            h = constant(x.reshape(-1, 1))
            for layer in range(len(self.conv_geometry)):
                patches = take(h, self._patch_index(batch, layer))
                h = self.activation(dense(theta, f"conv{layer + 1}", patches))
            h = reshape(h, (batch, self.flat_width))
        else:
            h = constant(x.reshape(batch, -1))
            for i in range(1, len(self.config.mlp_hidden) + 1):
                h = self.activation(dense(theta, f"hidden{i}", h))
        return self.activation(dense(theta, "fc", h))

    __call__ = extract


def init_head(rng: np.random.Generator, feature_dim: int, n_classes: int) -> ParamSet:
    return ParamSet(
        weight=rng.normal(0.0, np.sqrt(1.0 / feature_dim), (feature_dim, n_classes)),
        bias=np.zeros((1, n_classes)),
    )


def classify(head: Params, features: Node) -> Node:
    """g_phi: affine map from features (M, H) to logits (M, C)."""
    weight = head["weight"]
    if features.shape[1] != weight.shape[0]:
        raise ShapeMismatch(
            f"classifier expects {weight.shape[0]} features, got {features.shape[1]}"
        )
    return add(matmul(features, lift(weight)), lift(head["bias"]))


def _hidden_layers(omega: Params) -> int:
    return sum(
        1 for name in omega if name.startswith("layer") and name.endswith(".weight")
    )


def _critic_mlp(omega: Params, x: Node, activation: str) -> Node:
    act = ACTIVATIONS[activation]
    h = x
    for i in range(1, _hidden_layers(omega) + 1):
        h = act(dense(omega, f"layer{i}", h))
    return dense(omega, "out", h)


def _input_width(omega: Params) -> int:
    first = "layer1.weight" if "layer1.weight" in omega else "out.weight"
    return omega[first].shape[0]


def critic_set(omega: Params, features: Node, activation: str = "relu") -> Node:
    """h(F) = softplus(mean_i MLP(F_i)): per-row MLP, averaged over the batch."""
    if _input_width(omega) != features.shape[1]:
        raise VariantMismatch(
            f"set critic expects input width {features.shape[1]}, "
            f"parameters have {_input_width(omega)}"
        )
    return softplus(mean_rows(_critic_mlp(omega, features, activation)))


def critic_cov(
    omega: Params, features: Node, activation: str = "relu", normalise: bool = False
) -> Node:
    """h(F) = softplus(MLP(flatten(F^T F))); optional division of F^T F by M."""
    width = features.shape[1]
    if _input_width(omega) != width * width:
        raise VariantMismatch(
            f"covariance critic expects input width {width * width}, "
            f"parameters have {_input_width(omega)}"
        )
    covariance = gram(features)
    if normalise:
        covariance = scale(covariance, 1.0 / features.shape[0])
    return softplus(_critic_mlp(omega, flatten(covariance), activation))


class FeatureCritic:
    """h_omega in one of two variants: ``set`` (input H) or ``cov`` (input H*H)."""

    def __init__(
        self,
        variant: str,
        feature_dim: int,
        hidden: Tuple[int, ...] = (64, 32),
        activation: str = "relu",
        normalise_gram: bool = False,
    ):
        if variant not in ("set", "cov"):
            raise VariantMismatch(f"unknown critic variant {variant!r}")
        if variant == "cov" and feature_dim > COV_MAX_FEATURE_DIM:
            raise VariantMismatch(
                f"covariance critic supports H <= {COV_MAX_FEATURE_DIM}, "
                f"got {feature_dim}"
            )
        self.variant = variant
        self.feature_dim = feature_dim
        self.hidden = tuple(hidden)
        self.activation = activation
        self.normalise_gram = normalise_gram

    @classmethod
    def from_config(cls, variant: str, config: ModelConfig) -> "FeatureCritic":
        return cls(
            variant,
            config.feature_dim,
            config.critic_hidden,
            config.critic_activation,
            config.normalise_gram,
        )

    @property
    def input_width(self) -> int:
        return self.feature_dim if self.variant == "set" else self.feature_dim**2

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        params = ParamSet()
        width = self.input_width
        for i, hidden in enumerate(self.hidden, start=1):
            _init_dense(rng, params, f"layer{i}", width, hidden)
            width = hidden
        _init_dense(rng, params, "out", width, 1)
        return params

    def __call__(self, omega: Params, features: Node) -> Node:
        if self.variant == "set":
            return critic_set(omega, features, self.activation)
        return critic_cov(omega, features, self.activation, self.normalise_gram)
