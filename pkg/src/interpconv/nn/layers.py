"""Dense float64 layers with explicit forward/backward passes.

Activations are channels-last (B, H, W, C) throughout: the im2col gather then
lands directly in GEMM layout and most reshapes stay views, which keeps both
passes BLAS- rather than copy-bound.  Kernels use the conventional
(out_channels, in_channels, k, k) shape.
"""

from __future__ import annotations

from functools import lru_cache as _cache

import numpy as np

from ..errors import ShapeError


def he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


@_cache
def _patch_indices(hp: int, wp: int, k: int, stride: int) -> np.ndarray:
    """Flat gather indices into an (hp, wp) plane: (ho*wo, k*k)."""
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    rows = (np.arange(ho) * stride)[:, None, None, None] + np.arange(k)[None, None, :, None]
    cols = (np.arange(wo) * stride)[None, :, None, None] + np.arange(k)[None, None, None, :]
    return (rows * wp + cols).reshape(ho * wo, k * k)


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """(B, Hp, Wp, C) padded input -> (B*Ho*Wo, k*k*C) patch matrix (one gather)."""
    b, hp, wp, c = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    flat = _patch_indices(hp, wp, k, stride)
    cols = np.ascontiguousarray(xp).reshape(b, hp * wp, c)[:, flat, :]  # (B, P, k*k, C)
    return cols.reshape(b * ho * wo, k * k * c), ho, wo


def _kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    """(O, C, k, k) kernels -> (O, k*k*C) matching the patch-matrix layout."""
    o = kernels.shape[0]
    return np.ascontiguousarray(kernels.transpose(0, 2, 3, 1)).reshape(o, -1)


def _col2im_add(
    dcols: np.ndarray,
    shape: tuple[int, int, int, int],
    k: int,
    stride: int,
    ho: int,
    wo: int,
) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the padded plane."""
    b, hp, wp, c = shape
    d = dcols.reshape(b, ho, wo, k, k, c)
    dxp = np.zeros(shape, dtype=dcols.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :] += d[
                :, :, :, di, dj, :
            ]
    return dxp


def conv2d_forward(
    input: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray | None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlation with zero padding; input (B,H,W,C), kernels (O,C,k,k)."""
    input = np.asarray(input, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if input.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"need 4-d input/kernels, got {input.shape}, {kernels.shape}")
    if input.shape[3] != kernels.shape[1]:
        raise ShapeError(f"channel mismatch: input {input.shape[3]}, kernels {kernels.shape[1]}")
    o, _, k, k2 = kernels.shape
    if k != k2:
        raise ShapeError(f"kernels must be square, got {kernels.shape}")
    cols, ho, wo = _im2col(_pad2d(input, padding), k, stride)
    out = cols @ _kernel_matrix(kernels).T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out.reshape(input.shape[0], ho, wo, o)


def conv2d_input_grad(
    grad_out: np.ndarray,
    input_shape: tuple[int, ...],
    kernels: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Adjoint of conv2d_forward w.r.t. its input: patch-gradient GEMM + scatter."""
    b, h, w, c = input_shape
    o, _, k, _ = kernels.shape
    go = np.asarray(grad_out, dtype=np.float64)
    ho, wo = go.shape[1], go.shape[2]
    g2 = go.reshape(-1, o)
    dcols = g2 @ _kernel_matrix(kernels)                 # (B*Ho*Wo, k*k*C)
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = _col2im_add(dcols, (b, hp, wp, c), k, stride, ho, wo)
    return dxp[:, padding : padding + h, padding : padding + w, :]


def conv2d_backward(
    grad_out: np.ndarray,
    input: np.ndarray,
    kernels: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(grad_input, grad_kernels, grad_bias) for conv2d_forward."""
    input = np.asarray(input, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    o, c, k, _ = kernels.shape
    cols, ho, wo = _im2col(_pad2d(input, padding), k, stride)
    if grad_out.shape != (input.shape[0], ho, wo, o):
        raise ShapeError(f"grad_out {grad_out.shape} vs expected {(input.shape[0], ho, wo, o)}")
    g2 = grad_out.reshape(-1, o)
    grad_kernels = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2).copy()
    grad_bias = g2.sum(axis=0)
    grad_input = conv2d_input_grad(grad_out, input.shape, kernels, stride, padding)
    return grad_input, grad_kernels, grad_bias


class Layer:
    """Base: stateless layers override forward/backward only."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[np.ndarray]:
        return []

    def gradients(self) -> list[np.ndarray]:
        return []


class Conv2D(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: np.random.Generator | None = None,
        weight_std: float | None = None,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        std = he_std(in_channels * kernel_size * kernel_size) if weight_std is None else weight_std
        if rng is None:
            rng = np.random.default_rng(0)
        self.kernels = rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = np.zeros(out_channels, dtype=np.float64)
        self.grad_kernels = np.zeros_like(self.kernels)
        self.grad_bias = np.zeros_like(self.bias)
        self.needs_input_grad = True   # the first layer of a network turns this off
        self._cols: np.ndarray | None = None
        self._wmat: np.ndarray | None = None
        self._input_shape: tuple[int, ...] | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[3] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {x.shape}")
        self._input_shape = x.shape
        cols, ho, wo = _im2col(_pad2d(x, self.padding), self.kernel_size, self.stride)
        self._cols = cols
        self._wmat = _kernel_matrix(self.kernels)
        out = cols @ self._wmat.T + self.bias
        return out.reshape(x.shape[0], ho, wo, self.out_channels)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        assert self._cols is not None and self._input_shape is not None
        b, h, w, c = self._input_shape
        o, k = self.out_channels, self.kernel_size
        ho, wo = grad_out.shape[1], grad_out.shape[2]
        g2 = np.ascontiguousarray(grad_out).reshape(-1, o)
        self.grad_kernels = (g2.T @ self._cols).reshape(o, k, k, c).transpose(0, 3, 1, 2).copy()
        self.grad_bias = g2.sum(axis=0)
        if not self.needs_input_grad:
            return np.zeros(self._input_shape)
        dcols = g2 @ self._wmat
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        dxp = _col2im_add(dcols, (b, hp, wp, c), k, self.stride, ho, wo)
        return dxp[:, self.padding : self.padding + h, self.padding : self.padding + w, :]

    def parameters(self) -> list[np.ndarray]:
        return [self.kernels, self.bias]

    def gradients(self) -> list[np.ndarray]:
        return [self.grad_kernels, self.grad_bias]


class ReLU(Layer):
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0.0
        return np.maximum(x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties resolved to the first (row-major) cell."""

    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        b, h, w, c = x.shape
        k = self.size
        if h % k or w % k:
            raise ShapeError(f"pool size {k} must divide spatial dims {(h, w)}")
        self._x = x
        out = x.reshape(b, h // k, k, w // k, k, c).max(axis=(2, 4))
        self._out = out
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        k = self.size
        dx = np.zeros_like(self._x)
        taken = np.zeros(self._out.shape, dtype=bool)
        for di in range(k):                 # row-major window order: first max wins
            for dj in range(k):
                cell = self._x[:, di::k, dj::k, :]
                hit = (cell == self._out) & ~taken
                taken |= hit
                dx[:, di::k, dj::k, :] = np.where(hit, grad_out, 0.0)
        return dx


class Flatten(Layer):
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._input_shape = x.shape
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._input_shape)


class Linear(Layer):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
        weight_std: float | None = None,
    ):
        std = he_std(in_features) if weight_std is None else weight_std
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = rng.normal(0.0, std, size=(in_features, out_features))
        self.bias = np.zeros(out_features, dtype=np.float64)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"expected {self.weight.shape[0]} features, got {x.shape}")
        self._input = x
        return x @ self.weight + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.grad_weight = self._input.T @ grad_out
        self.grad_bias = grad_out.sum(axis=0)
        return grad_out @ self.weight.T

    def parameters(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def gradients(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]
