"""Fault records, campaign reports, diversity statistics, export and retraining."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coverage import CRITERIA
from .datasets import LabeledDataset
from .runtime import Model, accuracy, train_sgd


@dataclass(eq=False)
class FaultRecord:
    id: int
    step: int
    coords: np.ndarray
    input: np.ndarray  # clipped, what the model saw
    raw_input: np.ndarray  # decoder output before clipping
    class_label: int  # seed class; the correct label for retraining
    lineage: str
    oracle: str
    predictions: list[int]
    probabilities: list[list[float]]
    error_label: int | None
    fitness: float | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id, "step": self.step, "coords": [float(c) for c in self.coords],
            "class_label": self.class_label, "lineage": self.lineage, "oracle": self.oracle,
            "predictions": list(self.predictions),
            "probabilities": [[float(p) for p in row] for row in self.probabilities],
            "error_label": self.error_label, "fitness": self.fitness,
        }


@dataclass(frozen=True)
class DiversityStats:
    class_count: int
    scaled_entropy: float


def diversity(faults) -> DiversityStats:
    """Number of erroneous-prediction classes and their entropy normalised by ln|C|."""
    labels = [f.error_label if isinstance(f, FaultRecord) else int(f) for f in faults]
    labels = [l for l in labels if l is not None]
    if not labels:
        raise ValueError("diversity needs at least one classified fault")
    counts = Counter(labels)
    if len(counts) == 1:
        return DiversityStats(1, 0.0)
    n = len(labels)
    # sorted so the float sum does not depend on fault order
    ps = sorted(c / n for c in counts.values())
    entropy = -math.fsum(p * math.log(p) for p in ps)
    return DiversityStats(len(counts), min(1.0, entropy / math.log(len(counts))))


@dataclass(eq=False)
class CampaignReport:
    mode: str
    config: dict
    data_shape: tuple[int, ...]
    valid_range: tuple[float, float]
    init_coverage: dict[str, float]
    final_coverage: dict[str, float] = field(default_factory=dict)
    curve: list[tuple] = field(default_factory=list)  # (step, nc, kmnc, nbc, snac, tknc)
    lambda_history: list[tuple[int, float, int]] = field(default_factory=list)
    faults: list[FaultRecord] = field(default_factory=list)
    lineage_best: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    steps: int = 0
    accepted: int = 0
    explored: int = 0
    exploited: int = 0
    retired: int = 0
    diagnostics: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def diversity(self) -> DiversityStats | None:
        try:
            return diversity(self.faults)
        except ValueError:
            return None

    def to_json(self) -> dict:
        div = self.diversity
        return {
            "mode": self.mode,
            "config": self.config,
            "data_shape": list(self.data_shape),
            "valid_range": list(self.valid_range),
            "steps": self.steps,
            "accepted": self.accepted,
            "explored": self.explored,
            "exploited": self.exploited,
            "retired": self.retired,
            "init_coverage": {k: float(v) for k, v in self.init_coverage.items()},
            "final_coverage": {k: float(v) for k, v in self.final_coverage.items()},
            "lambda_final": self.lambda_history[-1][1] if self.lambda_history else 0.0,
            "fault_count": len(self.faults),
            "diversity": None if div is None else {"class_count": div.class_count,
                                                   "scaled_entropy": div.scaled_entropy},
            "curve": [dict(zip(("step",) + CRITERIA, (int(r[0]),) + tuple(float(v) for v in r[1:])))
                      for r in self.curve],
            "lineage_best": {k: [[int(s), float(b)] for s, b in v]
                             for k, v in sorted(self.lineage_best.items())},
            "faults": [f.to_json() for f in self.faults],
            "diagnostics": self.diagnostics,
            "warnings": self.warnings,
        }


# -- image export ---------------------------------------------------------------

def to_bytes(x: np.ndarray, valid_range) -> np.ndarray:
    """Map values in ``valid_range`` onto 0..255, rounding half up."""
    lo, hi = valid_range
    scaled = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def _image_layout(shape) -> tuple[str, int, int, int]:
    shape = tuple(shape)
    if len(shape) == 3 and shape[0] in (1, 3):
        return ("P5" if shape[0] == 1 else "P6"), shape[0], shape[1], shape[2]
    if len(shape) == 2:
        return "P5", 1, shape[0], shape[1]
    if len(shape) == 1:
        return "P5", 1, 1, shape[0]
    raise ValueError(f"no image layout for shape {shape}")


def encode_pnm(x: np.ndarray, valid_range) -> bytes:
    magic, channels, h, w = _image_layout(x.shape)
    pixels = to_bytes(x, valid_range).reshape(channels, h, w).transpose(1, 2, 0)
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by ``encode_pnm``; returns (C, H, W) uint8."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"unsupported image header {tokens}")
    channels = 1 if magic == "P5" else 3
    pixels = np.frombuffer(data[pos:], dtype=np.uint8)
    if pixels.size != channels * h * w:
        raise ValueError("truncated image payload")
    return pixels.reshape(h, w, channels).transpose(2, 0, 1)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v))


def export_report(report: CampaignReport, out_dir) -> list[Path]:
    """Write report.json, coverage.csv, faults.csv, lambda.csv, faults.npz and
    one PGM/PPM per fault input under ``faults/``."""
    out = Path(out_dir)
    img_dir = out / "faults"
    img_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text_or_bytes):
        path = out / name
        if isinstance(text_or_bytes, str):
            path.write_text(text_or_bytes)
        else:
            path.write_bytes(text_or_bytes)
        written.append(path)

    put("report.json", json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    put("coverage.csv", _csv_text(("step",) + CRITERIA,
                                  [(int(r[0]),) + tuple(_fmt(v) for v in r[1:]) for r in report.curve]))
    put("lambda.csv", _csv_text(("step", "lambda", "gain"),
                                [(s, _fmt(l), g) for s, l, g in report.lambda_history]))
    ext = ".ppm" if _image_layout(report.data_shape)[0] == "P6" else ".pgm"
    rows = []
    for f in report.faults:
        image = f"faults/fault_{f.id:06d}{ext}"
        put(image, encode_pnm(f.input, report.valid_range))
        rows.append((f.id, f.step, f.lineage, f.class_label, f.oracle,
                     "" if f.error_label is None else f.error_label,
                     " ".join(str(p) for p in f.predictions),
                     "" if f.fitness is None else _fmt(f.fitness), image))
    put("faults.csv", _csv_text(("id", "step", "lineage", "class_label", "oracle", "error_label",
                                 "predictions", "fitness", "image"), rows))
    buf = io.BytesIO()
    shape = (0,) + tuple(report.data_shape)
    np.savez(buf,
             inputs=np.array([f.input for f in report.faults]).reshape(-1, *report.data_shape)
             if report.faults else np.zeros(shape),
             raw_inputs=np.array([f.raw_input for f in report.faults]).reshape(-1, *report.data_shape)
             if report.faults else np.zeros(shape),
             coords=np.array([f.coords for f in report.faults]) if report.faults else np.zeros((0, 0)))
    put("faults.npz", buf.getvalue())
    return written


def load_faults(report_dir) -> list[FaultRecord]:
    """Rebuild fault records from an exported report.json and faults.npz."""
    report_dir = Path(report_dir)
    meta = json.loads((report_dir / "report.json").read_text())
    with np.load(report_dir / "faults.npz") as arrays:
        inputs, raw, coords = arrays["inputs"], arrays["raw_inputs"], arrays["coords"]
    rows = meta["faults"]
    if len(rows) != len(inputs):
        raise ValueError(f"{report_dir}: report lists {len(rows)} faults but faults.npz has {len(inputs)}")
    return [FaultRecord(r["id"], r["step"], coords[i], inputs[i], raw[i], r["class_label"], r["lineage"],
                        r["oracle"], r["predictions"], r["probabilities"], r["error_label"], r["fitness"])
            for i, r in enumerate(rows)]


# -- retraining -----------------------------------------------------------------

def retrain_eval(model: Model, train: LabeledDataset, test: LabeledDataset, faults, limit: int,
                 rng_seed: int, epochs: int = 5, lr: float = 0.05, batch: int = 32) -> dict:
    """Fine-tune a copy of ``model`` on ``train`` plus up to ``limit`` faults
    (labelled with their seed class); report test accuracy before and after."""
    if limit < 0:
        raise ValueError("limit must be >= 0")
    rng = np.random.default_rng(rng_seed)
    faults = list(faults)
    chosen = []
    if faults and limit:
        k = min(limit, len(faults))
        chosen = [faults[i] for i in np.sort(rng.choice(len(faults), size=k, replace=False))]
    inputs, labels = train.inputs, train.labels
    if chosen:
        extra = np.array([f.input for f in chosen], dtype=np.float32).reshape(-1, *train.shape)
        inputs = np.concatenate([inputs, extra])
        labels = np.concatenate([labels, [f.class_label for f in chosen]])
    combined = LabeledDataset(inputs, labels, train.class_count)
    before = accuracy(model, test.inputs, test.labels)
    tuned, curve = train_sgd(model, combined, lr, epochs, batch, int(rng.integers(2**31)))
    return {"acc_before": before, "acc_after": accuracy(tuned, test.inputs, test.labels),
            "faults_used": len(chosen), "loss_curve": curve, "model": tuned}
