import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentfuzz.datasets import IdxFormatError, LabeledDataset, blob_template, gen_blobs, load_idx, split, write_idx


def test_blobs_deterministic_and_in_range():
    a = gen_blobs(3, (1, 8, 8), 10, 0.2, rng_seed=5)
    b = gen_blobs(3, (1, 8, 8), 10, 0.2, rng_seed=5)
    assert a.inputs.tobytes() == b.inputs.tobytes() and a.labels.tolist() == b.labels.tolist()
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1 and np.all(np.isfinite(a.inputs))
    assert Counter(a.labels.tolist()) == {0: 10, 1: 10, 2: 10}


def test_blobs_zero_spread_equals_template():
    data = gen_blobs(2, (1, 6, 6), 4, 0.0, rng_seed=0)
    for k in range(2):
        for x in data.of_class(k):
            np.testing.assert_array_equal(x, blob_template(k, 2, (1, 6, 6)))


def test_blob_jitter_moves_the_bump():
    still = gen_blobs(2, (1, 12, 12), 5, 0.0, rng_seed=0)
    moved = gen_blobs(2, (1, 12, 12), 5, 0.0, rng_seed=0, jitter=1.5)
    assert np.unique(moved.of_class(0).reshape(5, -1), axis=0).shape[0] == 5
    assert np.unique(still.of_class(0).reshape(5, -1), axis=0).shape[0] == 1


def test_blob_errors():
    with pytest.raises(ValueError):
        gen_blobs(1, (4,), 3, 0.1, 0)
    with pytest.raises(ValueError):
        gen_blobs(2, (4,), 0, 0.1, 0)
    with pytest.raises(ValueError):
        gen_blobs(2, (0, 4), 3, 0.1, 0)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2)), [0, 2], 2)


def write_raw(path, magic, dims, payload):
    path.write_bytes(struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload))


def test_idx_hand_decoding(tmp_path):
    write_raw(tmp_path / "img", 0x803, (1, 2, 2), [0, 255, 128, 64])
    write_raw(tmp_path / "lab", 0x801, (1,), [3])
    data = load_idx(tmp_path / "img", tmp_path / "lab")
    assert data.inputs.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(data.inputs.reshape(-1), np.float32([0, 1.0, 128 / 255, 64 / 255]))
    assert data.labels.tolist() == [3] and data.class_count == 4


def test_idx_errors(tmp_path):
    write_raw(tmp_path / "lab", 0x801, (2,), [0, 1])
    write_raw(tmp_path / "img", 0x803, (2, 2, 2), range(8))
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(tmp_path / "lab", tmp_path / "lab")
    write_raw(tmp_path / "short", 0x803, (2, 2, 2), range(7))
    with pytest.raises(IdxFormatError, match="payload"):
        load_idx(tmp_path / "short", tmp_path / "lab")
    write_raw(tmp_path / "lab3", 0x801, (3,), [0, 1, 1])
    with pytest.raises(IdxFormatError, match="labels"):
        load_idx(tmp_path / "img", tmp_path / "lab3")
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(tmp_path / "tiny", tmp_path / "lab")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 5), st.integers(1, 5))
def test_idx_round_trip(tmp_path_factory, seed, n, rows, cols):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    d = tmp_path_factory.mktemp("idx")
    write_idx(d / "i", d / "l", images, labels)
    data = load_idx(d / "i", d / "l", class_count=10)
    np.testing.assert_array_equal(np.round(data.inputs[:, 0] * 255).astype(np.uint8), images)
    assert data.labels.tolist() == labels.tolist()


def test_split_sizes_and_determinism():
    data = LabeledDataset(np.arange(10, dtype=float)[:, None], [0] * 5 + [1] * 5, 2)
    a, b = split(data, 0.5, 3)
    assert (len(a), len(b)) == (5, 5)
    a2, _ = split(data, 0.5, 3)
    assert a.inputs.tobytes() == a2.inputs.tobytes()
    with pytest.raises(ValueError):
        split(data, 1.0, 0)
    with pytest.raises(ValueError):
        split(data.subset([0]), 0.5, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=40), st.floats(0.1, 0.9), st.integers(0, 1000))
def test_split_is_a_stratified_partition(labels, fraction, seed):
    n = len(labels)
    data = LabeledDataset(np.arange(n, dtype=float)[:, None], labels, 4)
    n_first = int(np.floor(fraction * n + 0.5))
    if n_first in (0, n):
        with pytest.raises(ValueError):
            split(data, fraction, seed)
        return
    a, b = split(data, fraction, seed)
    ids = sorted(a.inputs[:, 0].tolist() + b.inputs[:, 0].tolist())
    assert ids == list(range(n))
    counts = Counter(labels)
    for c, k in counts.items():
        if k >= 2:
            assert c in a.labels and c in b.labels
