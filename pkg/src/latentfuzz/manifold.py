"""Data manifolds: decoders from latent coordinates back to inputs, and encoders.

Two kinds are supported. ``PCAManifold`` keeps a per-class mean and an
orthonormal basis; ``DecoderManifold`` wraps a runtime ``Model`` whose
BatchNorm gain/bias are swapped per class.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .runtime import BatchNorm, Model, load_model, run, save_model
from .runtime.model import read_blob

log = logging.getLogger(__name__)

PCA_FORMAT = "latentfuzz-pca-manifold"
GOLDEN = (np.sqrt(5.0) - 1) / 2


@dataclass(frozen=True, eq=False)
class LatentPoint:
    coords: np.ndarray
    class_label: int

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValueError("latent coordinates must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "class_label", int(self.class_label))

    @property
    def dim(self) -> int:
        return len(self.coords)


class Manifold:
    """Shared surface of the manifold kinds."""

    latent_dim: int
    classes: tuple[int, ...]
    data_shape: tuple[int, ...]
    valid_range: tuple[float, float]

    def _check_point(self, z: LatentPoint) -> None:
        if z.class_label not in self.classes:
            raise KeyError(f"unknown class label {z.class_label}")
        if z.dim != self.latent_dim:
            raise ValueError(f"latent point has dim {z.dim}, manifold has {self.latent_dim}")

    def decode_raw(self, z: LatentPoint) -> np.ndarray:
        raise NotImplementedError

    def decode_pair(self, z: LatentPoint) -> tuple[np.ndarray, np.ndarray]:
        """(clipped, raw) decoded tensors."""
        raw = self.decode_raw(z)
        return np.clip(raw, *self.valid_range), raw

    def decode(self, z: LatentPoint) -> np.ndarray:
        return self.decode_pair(z)[0]

    def sample_prior(self, rng: np.random.Generator, class_label: int | None = None) -> LatentPoint:
        label = self.classes[0] if class_label is None else class_label
        return LatentPoint(rng.standard_normal(self.latent_dim), label)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.data_shape:
            raise ValueError(f"input shape {x.shape} != manifold data shape {self.data_shape}")
        return x


# -- PCA ----------------------------------------------------------------------

def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    # Rows; the first entry that is not numerically zero is made positive.
    out = vecs.copy()
    for row in out:
        big = np.flatnonzero(np.abs(row) > 1e-10 * np.abs(row).max())
        if big.size and row[big[0]] < 0:
            row *= -1
    return out


def pca_basis(samples: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Mean, top-``d`` orthonormal components (rows), eigenvalues, warnings.

    Uses the n x n Gram matrix when there are fewer samples than dimensions.
    Eigenvalues are those of the sample covariance (divisor n - 1).
    """
    samples = np.asarray(samples)
    # rank tolerance follows the precision the samples were stored in
    eps = np.finfo(samples.dtype).eps if np.issubdtype(samples.dtype, np.floating) else np.finfo(float).eps
    x = samples.astype(np.float64).reshape(len(samples), -1)
    n, dim = x.shape
    if d < 1:
        raise ValueError("latent dimension must be >= 1")
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} samples for d={d}, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    warnings = []
    if n < dim:
        w, u = np.linalg.eigh(xc @ xc.T / (n - 1))
        order = np.argsort(w, kind="stable")[::-1]
        w, u = w[order], u[:, order]
        vecs = (xc.T @ u).T
        norms = np.linalg.norm(vecs, axis=1)
    else:
        w, v = np.linalg.eigh(xc.T @ xc / (n - 1))
        order = np.argsort(w, kind="stable")[::-1]
        w, vecs = w[order], v[:, order].T
        norms = np.ones(len(w))
    tol = max(w[0], 0.0) * max(n, dim) * eps
    rank = int(np.sum(w > tol)) if w[0] > 0 else 0
    if rank == 0:
        raise ValueError("samples are all identical; no principal directions")
    if d > rank:
        warnings.append(f"latent dimension reduced from {d} to data rank {rank}")
        log.warning(warnings[-1])
        d = rank
    comps = vecs[:d] / norms[:d, None]
    if n < dim:
        # re-orthonormalise: the Gram route loses a little orthogonality
        q, r = np.linalg.qr(comps.T)
        comps = (q * np.sign(np.diag(r))).T
    return mean, _sign_fix(comps), np.maximum(w[:d], 0.0), warnings


@dataclass(eq=False)
class PCAManifold(Manifold):
    means: dict[int, np.ndarray]
    components: dict[int, np.ndarray]
    eigenvalues: dict[int, np.ndarray]
    data_shape: tuple[int, ...]
    valid_range: tuple[float, float] = (0.0, 1.0)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data_shape = tuple(int(s) for s in self.data_shape)
        self.valid_range = (float(self.valid_range[0]), float(self.valid_range[1]))
        dims = {c.shape[0] for c in self.components.values()}
        if len(dims) != 1:
            raise ValueError("all classes must share one latent dimension")
        self.latent_dim = dims.pop()
        self.classes = tuple(sorted(self.means))

    def encode(self, x, class_label: int) -> LatentPoint:
        x = self._check_input(x).reshape(-1)
        return LatentPoint(self.components[class_label] @ (x - self.means[class_label]), class_label)

    def decode_raw(self, z: LatentPoint) -> np.ndarray:
        self._check_point(z)
        flat = self.means[z.class_label] + z.coords @ self.components[z.class_label]
        return flat.reshape(self.data_shape)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blobs = {}
        for c in self.classes:
            entry = {}
            for name, arr in (("mean", self.means[c]), ("components", self.components[c])):
                blob = f"class{c:03d}_{name}.f32"
                data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                (path.parent / blob).write_bytes(data)
                entry[name] = {"blob": blob, "shape": list(arr.shape), "nbytes": len(data)}
            entry["eigenvalues"] = [float(v) for v in self.eigenvalues[c]]
            blobs[str(c)] = entry
        header = {"format": PCA_FORMAT, "latent_dim": self.latent_dim, "classes": list(self.classes),
                  "data_shape": list(self.data_shape), "valid_range": list(self.valid_range),
                  "warnings": self.warnings, "blobs": blobs}
        path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PCAManifold":
        path = Path(path)
        header = json.loads(path.read_text())
        if header.get("format") != PCA_FORMAT:
            raise ValueError(f"{path}: not a PCA manifold")
        means, comps, eig = {}, {}, {}
        for c in header["classes"]:
            entry = header["blobs"][str(c)]
            means[c] = read_blob(path.parent, entry["mean"]).astype(np.float64)
            comps[c] = read_blob(path.parent, entry["components"]).astype(np.float64)
            eig[c] = np.array(entry["eigenvalues"])
        return cls(means, comps, eig, header["data_shape"], tuple(header["valid_range"]),
                   list(header.get("warnings", [])))


def build_pca(data, class_label: int, d: int, valid_range=(0.0, 1.0)) -> PCAManifold:
    """Single-class PCA manifold from the samples of ``class_label``."""
    samples = data.of_class(class_label)
    mean, comps, eig, warnings = pca_basis(samples, d)
    return PCAManifold({class_label: mean}, {class_label: comps}, {class_label: eig},
                       data.shape, valid_range, warnings)


def build_class_pca(data, d: int, classes=None, valid_range=(0.0, 1.0)) -> PCAManifold:
    """One PCA basis per class, truncated to a common latent dimension."""
    classes = sorted(set(int(c) for c in data.labels)) if classes is None else list(classes)
    parts = [build_pca(data, c, d, valid_range) for c in classes]
    common = min(p.latent_dim for p in parts)
    warnings = [w for p in parts for w in p.warnings]
    if common < d:
        warnings.append(f"common latent dimension is {common}")
    return PCAManifold(
        {c: p.means[c] for c, p in zip(classes, parts)},
        {c: p.components[c][:common] for c, p in zip(classes, parts)},
        {c: p.eigenvalues[c][:common] for c, p in zip(classes, parts)},
        data.shape, valid_range, warnings)


# -- neural decoder -------------------------------------------------------------

@dataclass(eq=False)
class DecoderManifold(Manifold):
    """Neural decoder; ``bn_banks[class][layer_index] = (gamma, beta)``."""

    decoder: Model
    bn_banks: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]]
    data_shape: tuple[int, ...]
    valid_range: tuple[float, float] = (0.0, 1.0)
    encoder: Model | None = None
    search_samples: int = 256
    search_rounds: int = 100
    search_seed: int = 0

    def __post_init__(self):
        self.data_shape = tuple(int(s) for s in self.data_shape)
        self.valid_range = (float(self.valid_range[0]), float(self.valid_range[1]))
        if len(self.decoder.input_shape) != 1:
            raise ValueError("decoder input must be a flat latent vector")
        if int(np.prod(self.decoder.output_shape)) != int(np.prod(self.data_shape)):
            raise ValueError("decoder output does not match data_shape")
        self.latent_dim = self.decoder.input_shape[0]
        self.classes = tuple(sorted(self.bn_banks)) or (0,)
        self._per_class = {}
        for c in self.classes:
            updates = {}
            for i, (gamma, beta) in self.bn_banks.get(c, {}).items():
                layer = self.decoder.layers[i]
                if not isinstance(layer, BatchNorm):
                    raise ValueError(f"bank entry for layer {i} which is {layer.kind}")
                updates[i] = layer.with_params(gamma=gamma, beta=beta)
            self._per_class[c] = self.decoder.replace_layers(updates)

    def decode_raw(self, z: LatentPoint) -> np.ndarray:
        self._check_point(z)
        return run(self._per_class[z.class_label], z.coords[None])[0].reshape(self.data_shape)

    def _mse(self, coords, x, label) -> float:
        out = run(self._per_class[label], coords[None])[0].reshape(-1)
        return float(np.mean((np.clip(out, *self.valid_range) - x) ** 2))

    def encode(self, x, class_label: int, search: bool = True) -> LatentPoint:
        x = self._check_input(x)
        if self.encoder is not None:
            return LatentPoint(run(self.encoder, x[None])[0], class_label)
        if not search:
            raise ValueError("no encoder bundled and latent search disabled")
        return LatentPoint(self.latent_search(x.reshape(-1), class_label), class_label)

    def latent_search(self, x: np.ndarray, label: int) -> np.ndarray:
        """Best prior sample, then coordinate-wise golden-section descent on MSE."""
        rng = np.random.default_rng(self.search_seed)
        starts = rng.standard_normal((self.search_samples, self.latent_dim))
        outs = np.clip(run(self._per_class[label], starts), *self.valid_range).reshape(len(starts), -1)
        best = starts[int(np.argmin(np.mean((outs - x) ** 2, axis=1)))].copy()
        value = self._mse(best, x, label)
        radius = 2.0
        for _ in range(self.search_rounds):
            before = value
            for i in range(self.latent_dim):
                best[i], value = self._golden(best, i, best[i] - radius, best[i] + radius, x, label)
            if before - value <= 1e-15 * max(before, 1e-300):
                break
        return best

    def _golden(self, z, i, a, b, x, label, tol=1e-9):
        def f(t):
            trial = z.copy()
            trial[i] = t
            return self._mse(trial, x, label)

        c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
        fc, fd = f(c), f(d)
        while b - a > tol:
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - GOLDEN * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + GOLDEN * (b - a)
                fd = f(d)
        t = (a + b) / 2
        ft = f(t)
        current = f(z[i])
        return (t, ft) if ft <= current else (z[i], current)

    def save(self, path) -> Path:
        path = Path(path)
        banks = []
        for c in sorted(self.bn_banks):
            for i in sorted(self.bn_banks[c]):
                entry = {"class": c, "layer": i}
                for name, arr in zip(("gamma", "beta"), self.bn_banks[c][i]):
                    blob = f"bank_c{c:03d}_l{i:03d}_{name}.f32"
                    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                    path.parent.mkdir(parents=True, exist_ok=True)
                    (path.parent / blob).write_bytes(data)
                    entry[name] = {"blob": blob, "shape": [len(arr)], "nbytes": len(data)}
                banks.append(entry)
        extra = {"manifold": {"kind": "decoder", "data_shape": list(self.data_shape),
                              "valid_range": list(self.valid_range), "bn_banks": banks,
                              "encoder": None}}
        if self.encoder is not None:
            enc = path.with_name(path.stem + "_encoder.json")
            save_model(self.encoder, enc, prefix="encoder_")
            extra["manifold"]["encoder"] = enc.name
        return save_model(self.decoder, path, extra)

    @classmethod
    def load(cls, path) -> "DecoderManifold":
        path = Path(path)
        decoder = load_model(path)
        meta = json.loads(path.read_text()).get("manifold")
        if not meta or meta.get("kind") != "decoder":
            raise ValueError(f"{path}: model manifest has no decoder manifold table")
        banks: dict[int, dict[int, tuple]] = {}
        for entry in meta["bn_banks"]:
            banks.setdefault(int(entry["class"]), {})[int(entry["layer"])] = (
                read_blob(path.parent, entry["gamma"]), read_blob(path.parent, entry["beta"]))
        encoder = load_model(path.parent / meta["encoder"]) if meta.get("encoder") else None
        return cls(decoder, banks, meta["data_shape"], tuple(meta["valid_range"]), encoder)


def load_manifold(path) -> Manifold:
    header = json.loads(Path(path).read_text())
    if header.get("format") == PCA_FORMAT:
        return PCAManifold.load(path)
    return DecoderManifold.load(path)
