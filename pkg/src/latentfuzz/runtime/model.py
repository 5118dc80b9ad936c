"""Model container, forward pass with activation tracing, manifest I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import (LAYER_KINDS, TRACED_KINDS, BatchNorm, Conv2D, Dense, Flatten,
                     Layer, ReLU, ShapeError, Softmax)

MANIFEST_FORMAT = "latentfuzz-model"


class ManifestError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ActivationTrace:
    """Post-activation outputs of the traced (Dense/Conv2D) layers for one input."""

    layer_ids: tuple[int, ...]
    values: tuple[np.ndarray, ...]

    @property
    def neuron_counts(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.values)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)


@dataclass(frozen=True, eq=False)
class Model:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    class_labels: tuple[str, ...] = ()
    trace_points: tuple[tuple[int, int], ...] = field(init=False, repr=False)
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "class_labels", tuple(str(c) for c in self.class_labels))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.out_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        object.__setattr__(self, "shapes", tuple(shapes))
        if self.class_labels:
            if not self.layers or not isinstance(self.layers[-1], Softmax):
                raise ShapeError("classifier models must end with Softmax")
            if shapes[-1] != (len(self.class_labels),):
                raise ShapeError("output width does not match the number of class labels")
        object.__setattr__(self, "trace_points", _trace_points(self.layers))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def neuron_counts(self) -> tuple[int, ...]:
        return tuple(self.shapes[end + 1][0] for _, end in self.trace_points)

    def replace_layers(self, updates: dict[int, Layer]) -> "Model":
        layers = list(self.layers)
        for i, layer in updates.items():
            layers[i] = layer
        return Model(layers, self.input_shape, self.class_labels)


def _trace_points(layers) -> tuple[tuple[int, int], ...]:
    # A Dense/Conv2D output is captured after the BatchNorm/ReLU run that follows it.
    points = []
    for i, layer in enumerate(layers):
        if layer.kind not in TRACED_KINDS:
            continue
        end = i
        while end + 1 < len(layers) and layers[end + 1].kind in ("BatchNorm", "ReLU"):
            end += 1
        points.append((i, end))
    return tuple(points)


def _reduce_trace(a: np.ndarray) -> np.ndarray:
    # Conv feature maps count as one neuron per channel (spatial mean).
    return a.mean(axis=(2, 3)) if a.ndim == 4 else a


def run(model: Model, batch: np.ndarray, *, trace: bool = False, checked: bool = True):
    """Batched inference. Returns ``output`` or ``(output, traces)`` when tracing.

    ``traces`` is a list with one (N, neurons) array per traced layer.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    ends = {end: n for n, (_, end) in enumerate(model.trace_points)}
    traces = [None] * len(ends)
    for i, layer in enumerate(model.layers):
        with np.errstate(over="ignore", invalid="ignore"):  # reported below instead
            x, _ = layer.forward(x)
        if checked and not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite output at layer {i} ({layer.kind})")
        if trace and i in ends:
            traces[ends[i]] = _reduce_trace(x)
    return (x, traces) if trace else x


def forward(model: Model, x: np.ndarray, checked: bool = True) -> np.ndarray:
    """Single-input forward pass."""
    return run(model, np.asarray(x)[None], checked=checked)[0]


def forward_trace(model: Model, x: np.ndarray, checked: bool = True):
    """Single-input forward pass returning ``(probabilities, ActivationTrace)``."""
    out, traces = run(model, np.asarray(x)[None], trace=True, checked=checked)
    ids = tuple(start for start, _ in model.trace_points)
    return out[0], ActivationTrace(ids, tuple(t[0] for t in traces))


def predict(model: Model, inputs: np.ndarray, batch: int = 256) -> np.ndarray:
    labels = [run(model, inputs[i:i + batch]).argmax(axis=1) for i in range(0, len(inputs), batch)]
    return np.concatenate(labels) if labels else np.zeros(0, dtype=int)


def accuracy(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, inputs) == np.asarray(labels)))


def mlp(input_shape, hidden, classes: int, rng: np.random.Generator,
        batchnorm: bool = False) -> Model:
    """He-initialised MLP: Flatten, (Dense[, BatchNorm], ReLU)*, Dense, Softmax."""
    layers: list[Layer] = []
    width = int(np.prod(input_shape))
    if len(input_shape) != 1:
        layers.append(Flatten())
    for h in hidden:
        w = rng.standard_normal((width, h)) * np.sqrt(2.0 / width)
        layers.append(Dense(w, np.zeros(h)))
        if batchnorm:
            layers.append(BatchNorm(np.ones(h), np.zeros(h), np.zeros(h), np.ones(h)))
        layers.append(ReLU())
        width = h
    w = rng.standard_normal((width, classes)) * np.sqrt(1.0 / width)
    layers += [Dense(w, np.zeros(classes)), Softmax()]
    return Model(layers, input_shape, [str(c) for c in range(classes)])


# -- manifest I/O ---------------------------------------------------------------

def _blob_name(index: int, name: str) -> str:
    return f"layer{index:03d}_{name}.f32"


def layer_to_json(layer: Layer, index: int, blob_dir: Path, prefix: str = "") -> dict:
    entry = {"kind": layer.kind, **layer.hyper(), "params": {}}
    for name, arr in layer.params().items():
        blob = prefix + _blob_name(index, name)
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        (blob_dir / blob).write_bytes(data)
        entry["params"][name] = {"blob": blob, "shape": list(arr.shape), "nbytes": len(data)}
    return entry


def save_model(model: Model, manifest_path, extra: dict | None = None, prefix: str = "") -> Path:
    """Write the JSON manifest plus one little-endian f32 blob per tensor.

    ``prefix`` namespaces the blob files when two models share a directory.
    """
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "input_shape": list(model.input_shape),
        "class_labels": list(model.class_labels),
        "layers": [layer_to_json(layer, i, path.parent, prefix) for i, layer in enumerate(model.layers)],
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_blob(base: Path, spec: dict) -> np.ndarray:
    try:
        blob, shape, nbytes = spec["blob"], [int(d) for d in spec["shape"]], int(spec["nbytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed parameter entry {spec!r}") from exc
    file = base / blob
    if not file.is_file():
        raise ManifestError(f"missing blob {file}")
    data = file.read_bytes()
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(data) != nbytes or len(data) != expected:
        raise ManifestError(
            f"blob {blob}: declared shape {shape} needs {expected} bytes, "
            f"declared {nbytes}, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ManifestError(f"blob {blob} contains non-finite values")
    return arr


def layer_from_json(entry: dict, base: Path) -> Layer:
    kind = entry.get("kind")
    if kind not in LAYER_KINDS:
        raise ManifestError(f"unknown layer kind {kind!r}")
    params = {name: read_blob(base, spec) for name, spec in entry.get("params", {}).items()}
    try:
        if kind == "Dense":
            layer = Dense(params["weight"], params["bias"])
            if (layer.in_features, layer.out_features) != (entry["in"], entry["out"]):
                raise ManifestError("Dense hyperparameters disagree with weight shape")
        elif kind == "Conv2D":
            layer = Conv2D(params["weight"], params["bias"], int(entry["stride"]), int(entry["pad"]))
            h = layer.hyper()
            if any(h[k] != entry[k] for k in ("in_ch", "out_ch", "kH", "kW")):
                raise ManifestError("Conv2D hyperparameters disagree with weight shape")
        elif kind == "BatchNorm":
            layer = BatchNorm(params["gamma"], params["beta"], params["running_mean"],
                              params["running_var"], float(entry["eps"]))
        else:
            layer = LAYER_KINDS[kind]()
    except KeyError as exc:
        raise ManifestError(f"{kind} layer missing {exc}") from None
    except ShapeError as exc:
        raise ManifestError(str(exc)) from None
    return layer


def load_model(manifest_path) -> Model:
    path = Path(manifest_path)
    if not path.is_file():
        raise FileNotFoundError(f"model manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a model manifest")
    layers = [layer_from_json(e, path.parent) for e in manifest["layers"]]
    try:
        return Model(layers, manifest["input_shape"], manifest.get("class_labels", []))
    except ShapeError as exc:
        raise ManifestError(str(exc)) from None


def model_digest(manifest_path) -> str:
    """SHA-256 over the manifest and its blobs, in manifest order."""
    path = Path(manifest_path)
    h = hashlib.sha256(path.read_bytes())
    manifest = json.loads(path.read_text())
    for entry in manifest["layers"]:
        for spec in entry.get("params", {}).values():
            h.update((path.parent / spec["blob"]).read_bytes())
    return h.hexdigest()
