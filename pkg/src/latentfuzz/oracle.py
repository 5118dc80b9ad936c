"""Test oracles: label consistency, multi-model differential, float vs quantized."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .runtime import Model, forward

PROB_TOL = 1e-5


@dataclass(frozen=True)
class Verdict:
    is_fault: bool
    details: dict = field(default_factory=dict)
    fitness: float | None = None


@dataclass(frozen=True)
class LabelConsistency:
    """Fault when the prediction differs from the seed's label."""

    kind = "label"


@dataclass(frozen=True, eq=False)
class Differential:
    models: tuple[Model, ...]
    agreement: str = "label"  # or "numeric"
    tau: float = 0.0
    kind = "differential"

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if len(self.models) < 2:
            raise ValueError("differential testing needs at least two models")
        if len({m.input_shape for m in self.models}) != 1:
            raise ValueError("differential models must share an input shape")
        if self.agreement not in ("label", "numeric"):
            raise ValueError(f"unknown agreement mode {self.agreement!r}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")


@dataclass(frozen=True, eq=False)
class QuantDiff:
    original: Model
    quantized: Model
    kind = "quant"

    def __post_init__(self):
        if self.original.input_shape != self.quantized.input_shape:
            raise ValueError("original and quantized models must share an input shape")


def _check_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1) \
            or abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError("expected a probability vector")
    return p


def check_label_consistency(probs, expected: int) -> Verdict:
    p = _check_probs(probs)
    label = int(np.argmax(p))
    return Verdict(label != expected, {"predictions": [label], "probabilities": [p.tolist()],
                                       "expected": int(expected)})


def check_differential(outputs, agreement: str = "label", tau: float = 0.0) -> Verdict:
    """Exact-label mode faults on any label disagreement (scalar outputs are
    labels, vectors are reduced by argmax); numeric mode faults when the
    largest pairwise absolute difference exceeds ``tau``."""
    if len(outputs) < 2:
        raise ValueError("need at least two outputs")
    raw = [np.asarray(o, dtype=np.float64) for o in outputs]
    if len({a.shape for a in raw}) != 1:
        raise ValueError("mixed output kinds")
    arrays = [np.atleast_1d(a) for a in raw]
    if agreement == "label":
        labels = [int(a) if a.ndim == 0 else int(np.argmax(a)) for a in raw]
        return Verdict(len(set(labels)) > 1, {"predictions": labels,
                                              "probabilities": [a.tolist() for a in arrays]})
    if agreement == "numeric":
        spread = max(float(np.max(np.abs(a - b))) for a, b in combinations(arrays, 2))
        return Verdict(spread > tau, {"outputs": [a.tolist() for a in arrays], "spread": spread})
    raise ValueError(f"unknown agreement mode {agreement!r}")


def quant_fitness(p_orig, p_quant) -> tuple[float, Verdict]:
    """L1 distance between the probability vectors; fault when the argmax flips."""
    a, b = _check_probs(p_orig), _check_probs(p_quant)
    if a.shape != b.shape:
        raise ValueError("probability vectors differ in length")
    fitness = float(np.sum(np.abs(a - b)))
    la, lb = int(np.argmax(a)), int(np.argmax(b))
    return fitness, Verdict(la != lb, {"predictions": [la, lb],
                                       "probabilities": [a.tolist(), b.tolist()]}, fitness)


def validate_input(x, valid_range) -> bool:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = valid_range
    return bool(np.all(np.isfinite(x)) and np.all(x >= lo) and np.all(x <= hi))


def evaluate(spec, x: np.ndarray, primary_probs: np.ndarray, expected: int) -> Verdict:
    """Apply ``spec`` to a decoded input whose primary-model output is known."""
    if isinstance(spec, LabelConsistency):
        return check_label_consistency(primary_probs, expected)
    if isinstance(spec, Differential):
        outputs = [primary_probs] + [forward(m, x) for m in spec.models[1:]]
        return check_differential(outputs, spec.agreement, spec.tau)
    if isinstance(spec, QuantDiff):
        return quant_fitness(primary_probs, forward(spec.quantized, x))[1]
    raise TypeError(f"unknown oracle spec {spec!r}")


def primary_model(spec, default: Model | None = None) -> Model:
    if isinstance(spec, Differential):
        return spec.models[0]
    if isinstance(spec, QuantDiff):
        return spec.original
    if default is None:
        raise ValueError("label-consistency oracle needs a model")
    return default
