"""Mini-batch SGD trainer and finite-difference gradient checking."""

from __future__ import annotations

import copy
import logging

import numpy as np

from .layers import BatchNorm, Layer, Softmax
from .model import Model

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1


def _working_copy(layer: Layer) -> Layer:
    # Float64, writable parameters; skips the float32 freezing in __post_init__.
    work = copy.copy(layer)
    for name, arr in layer.params().items():
        object.__setattr__(work, name, np.array(arr, dtype=np.float64))
    return work


def _freeze(work: Layer) -> Layer:
    return work.with_params(**work.params())


def _onehot(labels, k) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _forward(layers, x, train):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x, train=train)
        caches.append(cache)
    return x, caches


def _loss_and_grad(layers, x, labels, loss: str, train: bool):
    """Mean loss over the batch and per-layer parameter gradients."""
    out, caches = _forward(layers, x, train)
    n = x.shape[0]
    target = _onehot(labels, out.shape[1])
    skip_softmax = False
    if loss == "cross_entropy":
        if not isinstance(layers[-1], Softmax):
            raise ValueError("cross-entropy needs a Softmax output layer")
        value = -np.mean(np.log(np.maximum(out[np.arange(n), labels], 1e-300)))
        grad = (out - target) / n
        skip_softmax = True
    elif loss == "squared_error":
        diff = out - target
        value = 0.5 * np.sum(diff ** 2) / n
        grad = diff / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    grads: list[dict[str, np.ndarray]] = [{} for _ in layers]
    for i in range(len(layers) - 1, -1, -1):
        if skip_softmax and i == len(layers) - 1:
            continue
        grad, grads[i] = layers[i].backward(grad, caches[i])
    return value, grads, caches


def loss_value(model: Model, x: np.ndarray, label: int, loss: str = "cross_entropy") -> float:
    layers = [_working_copy(l) for l in model.layers]
    value, _, _ = _loss_and_grad(layers, np.asarray(x, float)[None], np.array([label]), loss, False)
    return float(value)


def parameter_gradients(model: Model, x: np.ndarray, label: int,
                        loss: str = "cross_entropy") -> list[dict[str, np.ndarray]]:
    """Analytic gradients of the single-input loss (inference-mode BatchNorm)."""
    layers = [_working_copy(l) for l in model.layers]
    _, grads, _ = _loss_and_grad(layers, np.asarray(x, float)[None], np.array([label]), loss, False)
    return [{k: v for k, v in g.items() if k in layer.trainable} for g, layer in zip(grads, layers)]


def grad_check(model: Model, x: np.ndarray, label: int, eps: float = 1e-4,
               loss: str = "cross_entropy") -> float:
    """Max relative error between analytic and central-difference gradients.

    Every trainable parameter element is perturbed by ``eps``; the relative
    error per element is ``|ga - gfd| / max(1e-8, |ga| + |gfd|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x = np.asarray(x, dtype=np.float64)[None]
    y = np.array([label])
    layers = [_working_copy(l) for l in model.layers]
    _, grads, _ = _loss_and_grad(layers, x, y, loss, False)
    worst = 0.0
    for layer, g in zip(layers, grads):
        for name in layer.trainable:
            analytic = g[name]
            if not np.all(np.isfinite(analytic)):
                raise FloatingPointError(f"non-finite gradient in {layer.kind}.{name}")
            param = getattr(layer, name)
            flat = param.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up, _, _ = _loss_and_grad(layers, x, y, loss, False)
                flat[j] = orig - eps
                down, _, _ = _loss_and_grad(layers, x, y, loss, False)
                flat[j] = orig
                fd = (up - down) / (2 * eps)
                ga = analytic.reshape(-1)[j]
                worst = max(worst, abs(ga - fd) / max(1e-8, abs(ga) + abs(fd)))
    return worst


def train_sgd(model: Model, dataset, lr: float, epochs: int, batch: int,
              rng_seed: int) -> tuple[Model, list[float]]:
    """Plain SGD on softmax cross-entropy. Returns the trained copy and the
    full-dataset loss after each epoch."""
    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(inputs) == 0:
        raise ValueError("empty dataset")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    k = len(model.class_labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for a {k}-class model")
    rng = np.random.default_rng(rng_seed)
    layers = [_working_copy(l) for l in model.layers]
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(inputs))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            _, grads, caches = _loss_and_grad(layers, inputs[idx], labels[idx],
                                              "cross_entropy", len(idx) > 1)
            for layer, g, cache in zip(layers, grads, caches):
                for name in layer.trainable:
                    getattr(layer, name)[...] -= lr * g[name]
                if isinstance(layer, BatchNorm) and len(idx) > 1:
                    mean, var = cache[4].reshape(-1), cache[5].reshape(-1)
                    layer.running_mean[...] = (1 - BN_MOMENTUM) * layer.running_mean + BN_MOMENTUM * mean
                    layer.running_var[...] = (1 - BN_MOMENTUM) * layer.running_var + BN_MOMENTUM * var
        value = 0.0
        for start in range(0, len(inputs), 512):
            v, _, _ = _loss_and_grad(layers, inputs[start:start + 512], labels[start:start + 512],
                                     "cross_entropy", False)
            value += v * len(inputs[start:start + 512])
        curve.append(value / len(inputs))
        log.debug("epoch %d loss %.6f", epoch, curve[-1])
    trained = Model([_freeze(l) for l in layers], model.input_shape, model.class_labels)
    return trained, curve
