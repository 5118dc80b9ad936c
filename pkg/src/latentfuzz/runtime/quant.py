"""Simulated post-training int8 quantization (per-tensor, symmetric)."""

from __future__ import annotations

import numpy as np

from .model import Model

QMAX = 127


def quantize_tensor(w: np.ndarray) -> np.ndarray:
    """Round ``w`` onto the int8 grid ``q * scale`` with ``scale = max|w| / 127``.

    The returned array is float32 (dequantized); an all-zero tensor is returned
    unchanged.
    """
    w64 = np.asarray(w, dtype=np.float64)
    peak = float(np.max(np.abs(w64))) if w64.size else 0.0
    scale = peak / QMAX if peak > 0 else 1.0
    r = w64 / scale
    q = np.clip(np.sign(r) * np.floor(np.abs(r) + 0.5), -QMAX, QMAX)
    return (q * scale).astype(np.float32)


def quantize(model: Model, layer_kinds=("Dense", "Conv2D")) -> Model:
    """Quantize every parameter tensor of the selected layer kinds."""
    kinds = set(layer_kinds)
    bad = kinds - {"Dense", "Conv2D"}
    if bad:
        raise ValueError(f"cannot quantize layer kinds {sorted(bad)}")
    updates = {}
    for i, layer in enumerate(model.layers):
        if layer.kind in kinds:
            updates[i] = layer.with_params(**{k: quantize_tensor(v) for k, v in layer.params().items()})
    return model.replace_layers(updates)
