"""Neuron profiling and incremental NC / KMNC / NBC / SNAC / TKNC coverage.

Covered units are kept as boolean masks over the flattened traced neurons.
``brute_force_sets`` recomputes the same unit sets from a list of stored
traces with plain Python loops and is used to check the incremental path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .runtime import ActivationTrace, Model, forward_trace

CRITERIA = ("nc", "kmnc", "nbc", "snac", "tknc")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class CoverageConfig:
    nc_threshold: float = 0.75
    kmnc_sections: int = 1000
    tknc_k: int = 10

    def __post_init__(self):
        if not 0 < self.nc_threshold < 1:
            raise ValueError("nc_threshold must lie in (0, 1)")
        if self.kmnc_sections < 1 or self.tknc_k < 1:
            raise ValueError("kmnc_sections and tknc_k must be >= 1")


@dataclass(frozen=True, eq=False)
class NeuronProfile:
    """Per-neuron [low, high] output range over a profiling set."""

    layer_ids: tuple[int, ...]
    neuron_counts: tuple[int, ...]
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.shape != (sum(self.neuron_counts),) or high.shape != low.shape:
            raise ProfileError("profile arrays do not match the neuron counts")
        if np.any(low > high):
            raise ProfileError("profile has low > high")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    def neuron_ids(self) -> list[tuple[int, int]]:
        return [(layer, j) for layer, n in zip(self.layer_ids, self.neuron_counts) for j in range(n)]

    def to_json(self) -> list[dict]:
        return [{"layer": layer, "neuron": j, "low": float(lo), "high": float(hi)}
                for (layer, j), lo, hi in zip(self.neuron_ids(), self.low, self.high)]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "NeuronProfile":
        rows = json.loads(Path(path).read_text())
        layer_ids: list[int] = []
        counts: list[int] = []
        for row in rows:
            if not layer_ids or row["layer"] != layer_ids[-1]:
                if row["neuron"] != 0:
                    raise ProfileError(f"profile rows out of order at {row}")
                layer_ids.append(int(row["layer"]))
                counts.append(0)
            if row["neuron"] != counts[-1]:
                raise ProfileError(f"profile rows out of order at {row}")
            counts[-1] += 1
        return cls(tuple(layer_ids), tuple(counts),
                   np.array([r["low"] for r in rows]), np.array([r["high"] for r in rows]))

    def check_model(self, model: Model) -> None:
        ids = tuple(start for start, _ in model.trace_points)
        if ids != self.layer_ids or model.neuron_counts != self.neuron_counts:
            raise ProfileError("profile does not match the model's traced neurons")


def trace_all(model: Model, inputs) -> list[ActivationTrace]:
    return [forward_trace(model, x)[1] for x in inputs]


def profile(model: Model, data) -> NeuronProfile:
    """Exact elementwise min/max of traced activations over ``data``."""
    inputs = data.inputs if hasattr(data, "inputs") else data
    if len(inputs) == 0:
        raise ProfileError("cannot profile an empty dataset")
    low = high = None
    for trace in trace_all(model, inputs):
        flat = trace.flat
        low = flat.copy() if low is None else np.minimum(low, flat)
        high = flat.copy() if high is None else np.maximum(high, flat)
    ids = tuple(start for start, _ in model.trace_points)
    return NeuronProfile(ids, model.neuron_counts, low, high)


@dataclass(frozen=True)
class CoverageGain:
    gained: dict[str, int]
    objective_gained: bool


@dataclass(eq=False)
class CoverageState:
    neuron_counts: tuple[int, ...]
    config: CoverageConfig = field(default_factory=CoverageConfig)

    def __post_init__(self):
        self.neuron_counts = tuple(int(n) for n in self.neuron_counts)
        n = self.total_neurons
        bounds = np.cumsum((0,) + self.neuron_counts)
        self._slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        self.nc = np.zeros(n, dtype=bool)
        self.kmnc = np.zeros((n, self.config.kmnc_sections), dtype=bool)
        self.nbc = np.zeros((n, 2), dtype=bool)  # columns: lower, upper
        self.snac = np.zeros(n, dtype=bool)
        self.tknc = np.zeros(n, dtype=bool)

    @classmethod
    def for_model(cls, model: Model, config: CoverageConfig | None = None) -> "CoverageState":
        return cls(model.neuron_counts, config or CoverageConfig())

    @property
    def total_neurons(self) -> int:
        return sum(self.neuron_counts)

    def _flat(self, trace) -> np.ndarray:
        values = trace.values if isinstance(trace, ActivationTrace) else trace
        if tuple(len(v) for v in values) != self.neuron_counts:
            raise ValueError("trace dimensions do not match the coverage state")
        return np.concatenate([np.asarray(v, dtype=np.float64) for v in values])

    @staticmethod
    def _merge(mask: np.ndarray, hits: np.ndarray) -> int:
        new = hits & ~mask
        mask |= hits
        return int(new.sum())

    @staticmethod
    def _check_profile(profile, n):
        if profile is None:
            raise ProfileError("a neuron profile is required for this criterion")
        if profile.low.shape != (n,):
            raise ProfileError("profile does not match the coverage state")

    def nc_update(self, trace) -> int:
        x = self._flat(trace)
        hits = np.zeros_like(self.nc)
        for sl in self._slices:
            layer = x[sl]
            lo, hi = layer.min(), layer.max()
            if hi > lo:
                hits[sl] = (layer - lo) / (hi - lo) > self.config.nc_threshold
        return self._merge(self.nc, hits)

    def kmnc_update(self, trace, profile: NeuronProfile) -> int:
        x = self._flat(trace)
        self._check_profile(profile, len(x))
        k = self.config.kmnc_sections
        low, high = profile.low, profile.high
        width = high - low
        inside = (x >= low) & (x <= high)
        with np.errstate(divide="ignore", invalid="ignore"):
            section = np.floor((x - low) / width * k)
        section = np.where(width > 0, np.minimum(section, k - 1), 0)
        hits = np.zeros_like(self.kmnc)
        rows = np.flatnonzero(inside)
        hits[rows, section[rows].astype(np.int64)] = True
        return self._merge(self.kmnc, hits)

    def nbc_update(self, trace, profile: NeuronProfile) -> int:
        x = self._flat(trace)
        self._check_profile(profile, len(x))
        hits = np.stack([x < profile.low, x > profile.high], axis=1)
        return self._merge(self.nbc, hits)

    def snac_update(self, trace, profile: NeuronProfile) -> int:
        x = self._flat(trace)
        self._check_profile(profile, len(x))
        return self._merge(self.snac, x > profile.high)

    def tknc_update(self, trace) -> int:
        x = self._flat(trace)
        hits = np.zeros_like(self.tknc)
        for sl in self._slices:
            # stable sort on the negated outputs: ties go to the lower index
            top = np.argsort(-x[sl], kind="stable")[: self.config.tknc_k]
            hits[sl.start + top] = True
        return self._merge(self.tknc, hits)

    def update_all(self, trace, profile: NeuronProfile, objective: str = "nc") -> CoverageGain:
        if objective not in CRITERIA:
            raise ValueError(f"unknown criterion {objective!r}")
        gained = {
            "nc": self.nc_update(trace),
            "kmnc": self.kmnc_update(trace, profile),
            "nbc": self.nbc_update(trace, profile),
            "snac": self.snac_update(trace, profile),
            "tknc": self.tknc_update(trace),
        }
        return CoverageGain(gained, gained[objective] >= 1)

    def values(self) -> dict[str, float]:
        n = self.total_neurons
        return {
            "nc": self.nc.sum() / n,
            "kmnc": self.kmnc.sum() / (n * self.config.kmnc_sections),
            "nbc": self.nbc.sum() / (2 * n),
            "snac": self.snac.sum() / n,
            "tknc": self.tknc.sum() / n,
        }

    def value(self, criterion: str) -> float:
        return self.values()[criterion]

    def covered_sets(self) -> dict[str, set]:
        """Covered units as sets of flat-index tuples (same keys as brute_force_sets)."""
        return {
            "nc": {(int(i),) for i in np.flatnonzero(self.nc)},
            "kmnc": {(int(i), int(s)) for i, s in zip(*np.nonzero(self.kmnc))},
            "nbc": {(int(i), ("lower", "upper")[s]) for i, s in zip(*np.nonzero(self.nbc))},
            "snac": {(int(i),) for i in np.flatnonzero(self.snac)},
            "tknc": {(int(i),) for i in np.flatnonzero(self.tknc)},
        }


def brute_force_sets(traces, neuron_counts, profile: NeuronProfile,
                     config: CoverageConfig) -> dict[str, set]:
    """From-scratch covered-unit sets over stored traces, one neuron at a time."""
    sets = {c: set() for c in CRITERIA}
    k = config.kmnc_sections
    for trace in traces:
        values = trace.values if isinstance(trace, ActivationTrace) else trace
        flat_index = 0
        for layer in values:
            outs = [float(v) for v in layer]
            lo, hi = min(outs), max(outs)
            ranked = sorted(range(len(outs)), key=lambda j: (-outs[j], j))
            top = set(ranked[: config.tknc_k])
            for j, v in enumerate(outs):
                i = flat_index + j
                if hi > lo and (v - lo) / (hi - lo) > config.nc_threshold:
                    sets["nc"].add((i,))
                plo, phi = float(profile.low[i]), float(profile.high[i])
                if plo == phi:
                    if v == plo:
                        sets["kmnc"].add((i, 0))
                elif plo <= v <= phi:
                    sets["kmnc"].add((i, min(k - 1, math.floor((v - plo) / (phi - plo) * k))))
                if v < plo:
                    sets["nbc"].add((i, "lower"))
                if v > phi:
                    sets["nbc"].add((i, "upper"))
                    sets["snac"].add((i,))
                if j in top:
                    sets["tknc"].add((i,))
            flat_index += len(outs)
    return sets


def values_from_sets(sets: dict[str, set], total_neurons: int, config: CoverageConfig) -> dict[str, float]:
    n = total_neurons
    return {
        "nc": len(sets["nc"]) / n,
        "kmnc": len(sets["kmnc"]) / (n * config.kmnc_sections),
        "nbc": len(sets["nbc"]) / (2 * n),
        "snac": len(sets["snac"]) / n,
        "tknc": len(sets["tknc"]) / n,
    }
