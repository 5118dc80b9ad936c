"""Desk-scale blob benchmark: 3-class 16x16 images, MLP target, PCA manifold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coverage import NeuronProfile, profile
from .datasets import LabeledDataset, gen_blobs, split
from .manifold import LatentPoint, PCAManifold, build_class_pca
from .runtime import Model, accuracy, mlp, train_sgd


@dataclass
class BenchmarkSettings:
    classes: int = 3
    shape: tuple = (1, 16, 16)
    per_class: int = 200
    spread: float = 0.1
    jitter: float = 1.5  # pixels; gives each class a real manifold to traverse
    train_fraction: float = 0.8
    hidden: tuple = (128, 64)
    batchnorm: bool = False
    lr: float = 0.1
    epochs: int = 20
    batch: int = 32
    latent_dim: int = 8
    corpus_per_class: int = 5
    seed: int = 0


@dataclass
class Benchmark:
    settings: BenchmarkSettings
    train: LabeledDataset
    test: LabeledDataset
    model: Model
    loss_curve: list
    manifold: PCAManifold
    profile: NeuronProfile
    corpus: list[LatentPoint]
    corpus_inputs: np.ndarray

    @property
    def train_accuracy(self) -> float:
        return accuracy(self.model, self.train.inputs, self.train.labels)

    @property
    def test_accuracy(self) -> float:
        return accuracy(self.model, self.test.inputs, self.test.labels)


def make_dataset(s: BenchmarkSettings) -> tuple[LabeledDataset, LabeledDataset]:
    data = gen_blobs(s.classes, s.shape, s.per_class, s.spread, s.seed, s.jitter)
    return split(data, s.train_fraction, s.seed + 1)


def train_model(s: BenchmarkSettings, train: LabeledDataset):
    init = mlp(s.shape, s.hidden, s.classes, np.random.default_rng(s.seed + 2), s.batchnorm)
    return train_sgd(init, train, s.lr, s.epochs, s.batch, s.seed + 3)


def select_corpus(manifold, data: LabeledDataset, per_class: int):
    """First ``per_class`` samples of each class, encoded on their class manifold."""
    points, inputs = [], []
    for c in manifold.classes:
        for x in data.of_class(c)[:per_class]:
            points.append(manifold.encode(x, c))
            inputs.append(x)
    return points, np.array(inputs)


def blob_benchmark(settings: BenchmarkSettings | None = None) -> Benchmark:
    s = settings or BenchmarkSettings()
    train, test = make_dataset(s)
    model, curve = train_model(s, train)
    manifold = build_class_pca(train, s.latent_dim)
    prof = profile(model, train)
    corpus, inputs = select_corpus(manifold, test, s.corpus_per_class)
    return Benchmark(s, train, test, model, curve, manifold, prof, corpus, inputs)
