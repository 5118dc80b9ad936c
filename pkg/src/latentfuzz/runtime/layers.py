"""Layer definitions with batched forward and backward passes.

All arithmetic runs in float64. Parameters are stored as float32 arrays so a
model written to disk and read back is bit-identical to the one in memory.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import ClassVar

import numpy as np


class ShapeError(ValueError):
    pass


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float32)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite parameter value")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    kind: ClassVar[str] = ""
    param_names: ClassVar[tuple[str, ...]] = ()
    trainable: ClassVar[tuple[str, ...]] = ()

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def hyper(self) -> dict:
        return {}

    def with_params(self, **arrays) -> "Layer":
        return replace(self, **{k: _frozen(v) for k, v in arrays.items()})

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, train: bool = False):
        """Return (output, cache)."""
        raise NotImplementedError

    def backward(self, grad: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    """Affine map ``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    weight: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = "Dense"
    param_names: ClassVar[tuple[str, ...]] = ("weight", "bias")
    trainable: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        w = _frozen(self.weight)
        if w.ndim != 2:
            raise ShapeError(f"Dense weight must be 2-d, got shape {w.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", _frozen(self.bias, (w.shape[1],)))

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def hyper(self):
        return {"in": self.in_features, "out": self.out_features}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"Dense expects input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, train=False):
        w = self.weight.astype(np.float64)
        return x @ w + self.bias.astype(np.float64), x

    def backward(self, grad, cache):
        x = cache
        w = self.weight.astype(np.float64)
        return grad @ w.T, {"weight": x.T @ grad, "bias": grad.sum(axis=0)}


@dataclass(frozen=True, eq=False)
class Conv2D(Layer):
    """Direct 2-d convolution over (C, H, W) inputs; weight is (out, in, kH, kW)."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    kind: ClassVar[str] = "Conv2D"
    param_names: ClassVar[tuple[str, ...]] = ("weight", "bias")
    trainable: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        w = _frozen(self.weight)
        if w.ndim != 4:
            raise ShapeError(f"Conv2D weight must be 4-d, got shape {w.shape}")
        if self.stride < 1 or self.pad < 0:
            raise ValueError("Conv2D needs stride >= 1 and pad >= 0")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", _frozen(self.bias, (w.shape[0],)))

    def hyper(self):
        out_ch, in_ch, kh, kw = self.weight.shape
        return {"in_ch": in_ch, "out_ch": out_ch, "kH": kh, "kW": kw,
                "stride": self.stride, "pad": self.pad}

    def out_shape(self, in_shape):
        out_ch, in_ch, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != in_ch:
            raise ShapeError(f"Conv2D expects ({in_ch}, H, W), got {tuple(in_shape)}")
        h = (in_shape[1] + 2 * self.pad - kh) // self.stride + 1
        w = (in_shape[2] + 2 * self.pad - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"Conv2D kernel larger than padded input {tuple(in_shape)}")
        return (out_ch, h, w)

    def _windows(self, xp, ho, wo):
        s = self.stride
        _, _, kh, kw = self.weight.shape
        for u in range(kh):
            for v in range(kw):
                yield u, v, xp[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s]

    def forward(self, x, train=False):
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        _, ho, wo = self.out_shape(x.shape[1:])
        w = self.weight.astype(np.float64)
        out = np.zeros((x.shape[0], w.shape[0], ho, wo))
        for u, v, patch in self._windows(xp, ho, wo):
            out += np.einsum("ncij,oc->noij", patch, w[:, :, u, v])
        out += self.bias.astype(np.float64)[None, :, None, None]
        return out, xp

    def backward(self, grad, cache):
        xp = cache
        p, s = self.pad, self.stride
        w = self.weight.astype(np.float64)
        ho, wo = grad.shape[2:]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for u, v, patch in self._windows(xp, ho, wo):
            dw[:, :, u, v] = np.einsum("noij,ncij->oc", grad, patch)
            dxp[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s] += np.einsum(
                "noij,oc->ncij", grad, w[:, :, u, v])
        dx = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p] if p else dxp
        return dx, {"weight": dw, "bias": grad.sum(axis=(0, 2, 3))}


@dataclass(frozen=True, eq=False)
class BatchNorm(Layer):
    """Per-channel normalization; channel axis is axis 1 of the batched input.

    Inference uses the running statistics. In training mode the batch
    statistics are used and the running statistics are left untouched here
    (the trainer folds them in afterwards).
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    kind: ClassVar[str] = "BatchNorm"
    param_names: ClassVar[tuple[str, ...]] = ("gamma", "beta", "running_mean", "running_var")
    trainable: ClassVar[tuple[str, ...]] = ("gamma", "beta")

    def __post_init__(self):
        g = _frozen(self.gamma)
        if g.ndim != 1:
            raise ShapeError("BatchNorm gamma must be 1-d")
        c = (g.shape[0],)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", _frozen(self.beta, c))
        object.__setattr__(self, "running_mean", _frozen(self.running_mean, c))
        rv = _frozen(self.running_var, c)
        if np.any(rv < 0):
            raise ValueError("BatchNorm running_var must be >= 0")
        if self.eps < 0 or (self.eps == 0 and np.any(rv == 0)):
            raise ValueError("BatchNorm eps must be > 0 (eps == 0 only with positive running_var)")
        object.__setattr__(self, "running_var", rv)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def hyper(self):
        return {"channels": self.channels, "eps": self.eps}

    def out_shape(self, in_shape):
        if len(in_shape) not in (1, 3) or in_shape[0] != self.channels:
            raise ShapeError(f"BatchNorm({self.channels}) got input {tuple(in_shape)}")
        return in_shape

    def _bcast(self, v, ndim):
        return v.astype(np.float64).reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, train=False):
        axes = (0,) + tuple(range(2, x.ndim))
        if train:
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
        else:
            mean = self._bcast(self.running_mean, x.ndim)
            var = self._bcast(self.running_var, x.ndim)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        out = xhat * self._bcast(self.gamma, x.ndim) + self._bcast(self.beta, x.ndim)
        return out, (xhat, inv_std, train, axes, mean, var)

    def backward(self, grad, cache):
        xhat, inv_std, train, axes = cache[:4]
        g = self._bcast(self.gamma, grad.ndim)
        grads = {"gamma": (grad * xhat).sum(axis=axes), "beta": grad.sum(axis=axes)}
        dxhat = grad * g
        if not train:
            return dxhat * inv_std, grads
        m = grad.size / grad.shape[1]
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, grads


@dataclass(frozen=True, eq=False)
class ReLU(Layer):
    kind: ClassVar[str] = "ReLU"

    def forward(self, x, train=False):
        return np.maximum(x, 0.0), x > 0

    def backward(self, grad, cache):
        return grad * cache, {}


@dataclass(frozen=True, eq=False)
class Softmax(Layer):
    kind: ClassVar[str] = "Softmax"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"Softmax expects a flat input, got {tuple(in_shape)}")
        return in_shape

    def forward(self, x, train=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, p

    def backward(self, grad, cache):
        p = cache
        return p * (grad - (grad * p).sum(axis=1, keepdims=True)), {}


@dataclass(frozen=True, eq=False)
class Flatten(Layer):
    kind: ClassVar[str] = "Flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), {}


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Dense, Conv2D, BatchNorm, ReLU, Softmax, Flatten)
}
TRACED_KINDS = ("Dense", "Conv2D")
