"""Network assembly from an ordered layer spec list, with shape inference.

Interp-conv layers are fixed to 3x3 kernels with zero padding so their output
grid matches the input grid; the reference architecture used throughout the
experiments is built by ``reference_network_config``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from ..interp import InterpConv2D
from .layers import Conv2D, Flatten, Layer, Linear, MaxPool2D, ReLU


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # conv | relu | maxpool | fc | interp_conv
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    size: int = 2                  # maxpool window
    out_features: int = 0
    tau: float | None = None
    beta: float = 4.0
    alpha: float | None = None


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(size: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", size=size)


def fc(out_features: int) -> LayerSpec:
    return LayerSpec("fc", out_features=out_features)


def interp_conv(
    out_channels: int,
    tau: float | None = None,
    beta: float = 4.0,
    alpha: float | None = None,
) -> LayerSpec:
    return LayerSpec("interp_conv", out_channels=out_channels, tau=tau, beta=beta, alpha=alpha)


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple[int, int, int]          # (C, H, W)
    layers: tuple[LayerSpec, ...]
    loss: str = "softmax"                      # softmax | logistic
    num_classes: int = 2


def reference_network_config(
    image_size: int,
    num_classes: int,
    interpretable: bool = True,
    loss: str = "softmax",
    conv1_channels: int = 16,
    conv2_channels: int = 32,
    interp_filters: int = 32,
    tau: float | None = None,
    beta: float = 4.0,
    alpha: float | None = None,
) -> NetworkConfig:
    """Two plain conv blocks, then the top conv layer plus one inserted layer.

    With ``interpretable`` both top layers are interp-conv units; otherwise
    they are ordinary conv+relu pairs of identical shapes, so the two variants
    draw identical init samples.
    """
    def top(channels: int) -> list[LayerSpec]:
        if interpretable:
            return [interp_conv(channels, tau=tau, beta=beta, alpha=alpha)]
        return [conv(channels, 3, 1, 1), relu()]

    layers: list[LayerSpec] = [
        conv(conv1_channels, 5, 1, 2), relu(), maxpool(2),
        conv(conv2_channels, 3, 1, 1), relu(), maxpool(2),
        *top(interp_filters), maxpool(2),
        *top(interp_filters),
        fc(num_classes if loss == "softmax" or num_classes > 2 else 1),
    ]
    return NetworkConfig(
        input_shape=(1, image_size, image_size),
        layers=tuple(layers),
        loss=loss,
        num_classes=num_classes,
    )


class Network:
    def __init__(self, layers: list[Layer | InterpConv2D], config: NetworkConfig):
        self.layers = layers
        self.config = config
        self.loss_kind = config.loss
        self.num_classes = config.num_classes
        idx = [i for i, l in enumerate(layers) if isinstance(l, (Conv2D, InterpConv2D))]
        self.top_conv_index = idx[-1] if idx else -1

    @property
    def interp_layers(self) -> list[InterpConv2D]:
        return [l for l in self.layers if isinstance(l, InterpConv2D)]

    def begin_batch(self, labels: np.ndarray | None) -> None:
        for l in self.interp_layers:
            l.batch_labels = labels

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """x is channels-last: (B, H, W, C)."""
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def gradients(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend(layer.gradients())
        return out

    def top_feature_maps(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Post-ReLU/mask maps of the top conv layer as (N, M, n, n), dataset order."""
        if self.top_conv_index < 0:
            raise ShapeError("network has no conv layer")
        chunks = []
        for lo in range(0, images.shape[0], batch_size):
            x = images[lo : lo + batch_size]
            for i, layer in enumerate(self.layers[: self.top_conv_index + 1]):
                x = layer.forward(x, False)
            top = self.layers[self.top_conv_index]
            maps = top.eval_maps if isinstance(top, InterpConv2D) else np.maximum(x, 0.0)
            chunks.append(np.ascontiguousarray(maps.transpose(0, 3, 1, 2)))
        return np.concatenate(chunks, axis=0)

    def logits(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = [
            self.forward(images[lo : lo + batch_size], False)
            for lo in range(0, images.shape[0], batch_size)
        ]
        return np.concatenate(outs, axis=0)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        scores = self.logits(images, batch_size)
        if scores.shape[1] == 1:
            return (scores[:, 0] > 0).astype(np.int64)
        return np.argmax(scores, axis=1)


def build_network(config: NetworkConfig, rng: np.random.Generator) -> Network:
    c, h, w = config.input_shape
    layers: list[Layer | InterpConv2D] = []
    flat: int | None = None
    for spec in config.layers:
        if spec.kind == "conv":
            layers.append(Conv2D(c, spec.out_channels, spec.kernel, spec.stride, spec.padding, rng=rng))
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            c = spec.out_channels
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "maxpool":
            layers.append(MaxPool2D(spec.size))
            if h % spec.size or w % spec.size:
                raise ConfigError(f"pool {spec.size} cannot divide {(h, w)}")
            h //= spec.size
            w //= spec.size
        elif spec.kind == "interp_conv":
            if h != w:
                raise ConfigError(f"interp-conv needs a square grid, got {(h, w)}")
            layers.append(
                InterpConv2D(c, spec.out_channels, h, rng=rng,
                             tau=spec.tau, beta=spec.beta, alpha=spec.alpha)
            )
            c = spec.out_channels
        elif spec.kind == "fc":
            if flat is None:
                layers.append(Flatten())
                flat = c * h * w
            layers.append(Linear(flat, spec.out_features, rng=rng))
            flat = spec.out_features
        else:
            raise ConfigError(f"unknown layer kind {spec.kind!r}")
        if h < 1 or w < 1:
            raise ConfigError(f"layer {spec.kind} collapsed the grid to {(h, w)}")
    # nothing consumes the first layer's input gradient
    first = layers[0]
    if isinstance(first, Conv2D):
        first.needs_input_grad = False
    elif isinstance(first, InterpConv2D):
        first.conv.needs_input_grad = False
    return Network(layers, config)
