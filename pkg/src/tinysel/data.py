"""Dataset handling: CSV ingestion, synthetic waveform generation,
train/test splitting, strong-model feature extraction and subset assembly."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Model


@dataclass
class Dataset:
    """Uniformly shaped (n, channels, length) samples with class labels and,
    once split, a per-sample subset id in [0, m)."""

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    subset_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 3:
            raise ValueError(f"samples must be (n, channels, length), got "
                             f"{self.samples.shape}")
        if len(self.samples) != len(self.labels):
            raise ValueError("samples and labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.subset_ids is not None:
            self.subset_ids = np.asarray(self.subset_ids, dtype=np.int64)
            if len(self.subset_ids) != len(self.labels):
                raise ValueError("subset_ids length mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.samples.shape[1:]

    def take(self, indices) -> "Dataset":
        sub = None if self.subset_ids is None else self.subset_ids[indices]
        return Dataset(self.samples[indices], self.labels[indices],
                       self.num_classes, subset_ids=sub)


class CsvFormatError(ValueError):
    """Raised when a CSV row cannot be parsed; message names the line."""


def load_csv(path, channels: int, length: int,
             num_classes: Optional[int] = None) -> Dataset:
    """Each row: integer label followed by channels*length floats."""
    want = 1 + channels * length
    samples, labels = [], []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != want:
                raise CsvFormatError(
                    f"{path}: line {lineno}: expected {want} fields, "
                    f"got {len(row)}")
            try:
                labels.append(int(row[0]))
                samples.append(np.array(row[1:], dtype=np.float32))
            except ValueError as e:
                raise CsvFormatError(f"{path}: line {lineno}: {e}") from None
    if not samples:
        raise CsvFormatError(f"{path}: no data rows")
    arr = np.stack(samples).reshape(len(samples), channels, length)
    lab = np.array(labels)
    if num_classes is None:
        num_classes = int(lab.max()) + 1
    return Dataset(arr, lab, num_classes)


def save_csv(dataset: Dataset, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for x, y in zip(dataset.samples, dataset.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x.reshape(-1)])


def gen_synthetic(num_classes=8, clusters_per_class=3, channels=3, length=128,
                  n=4000, noise_sigma=0.5, seed=0, signature_amp=0.4) -> Dataset:
    """Synthetic multi-channel waveform classification benchmark.

    Each sample is a cluster-specific low-frequency carrier plus one of
    ``num_classes`` high-band signature banks, a random circular time shift,
    amplitude jitter and Gaussian noise. The signature banks are shared
    across clusters, but which bank encodes which class is permuted per
    cluster, so class identity is a (carrier, bank) conjunction: within one
    cluster the classes are separated by the banks alone, while globally
    the same bank means different classes in different clusters. Class and
    cluster assignment is round-robin, so class counts differ by at most
    one.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    # frequencies scale with length so short sequences stay below Nyquist
    fs = length / 128.0
    # cluster carriers: strong, class-independent, in separated low bands
    # and under cluster-specific envelopes, so the cluster is easy to read
    carriers = np.zeros((clusters_per_class, channels, length), dtype=np.float64)
    for j in range(clusters_per_class):
        env_center = rng.uniform(0.25, 0.75)
        env = 0.5 + np.exp(-((t - env_center) ** 2) / (2 * 0.18 ** 2))
        for ch in range(channels):
            f1 = fs * (4.0 + 6.0 * j + rng.uniform(0.0, 3.0))
            p1 = rng.uniform(0, 2 * np.pi)
            carriers[j, ch] = env * np.sin(2 * np.pi * f1 * t + p1)
    # shared signature banks in a common high band, one per class slot
    lo = fs * (4.0 + 6.0 * clusters_per_class + 4.0)
    width = (0.45 * length - lo) / num_classes
    if width <= 0:
        raise ValueError("signature band is empty for this many clusters")
    sigs = np.zeros((num_classes, channels, length), dtype=np.float64)
    for s in range(num_classes):
        for ch in range(channels):
            f1 = lo + width * (s + rng.uniform(0.0, 0.7))
            f2 = lo + width * (s + rng.uniform(0.0, 0.7))
            p1, p2 = rng.uniform(0, 2 * np.pi, 2)
            sigs[s, ch] = (np.sin(2 * np.pi * f1 * t + p1)
                           + np.sin(2 * np.pi * f2 * t + p2))
    # per-cluster permutation of bank -> class entangles the global task
    perms = np.stack([rng.permutation(num_classes)
                      for _ in range(clusters_per_class)])
    templates = (carriers[None, :] +
                 signature_amp * sigs[perms.T])  # (class, cluster, ch, len)
    labels = np.arange(n) % num_classes
    clusters = (np.arange(n) // num_classes) % clusters_per_class
    samples = templates[labels, clusters]
    if noise_sigma > 0:
        shifts = rng.integers(0, length, size=n)
        rows = np.arange(length)[None, :]
        idx = (rows + shifts[:, None]) % length
        samples = np.take_along_axis(samples, idx[:, None, :], axis=2)
        amp = rng.uniform(0.8, 1.2, size=(n, 1, 1))
        samples = amp * samples + rng.normal(0, noise_sigma,
                                             size=samples.shape)
    return Dataset(samples.astype(np.float32), labels, num_classes)


def split_train_test(dataset: Dataset, ratio=0.8, seed=0):
    """Stratified seeded shuffle-split into (train, test)."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        rng.shuffle(idx)
        cut = int(round(ratio * len(idx)))
        cut = min(max(cut, 1), len(idx) - 1)
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    rng.shuffle(train_idx)
    rng.shuffle(test_idx)
    return dataset.take(train_idx), dataset.take(test_idx)


def last_conv_pool_index(model: Model) -> int:
    """Index of the maxpool closing the final conv block."""
    pools = [i for i, s in enumerate(model.specs) if s.kind == "maxpool1d"]
    if not pools:
        raise ValueError("model has no maxpool layers")
    return pools[-1]


def extract_features(model: Model, dataset: Dataset, batch_size=256) -> np.ndarray:
    """Flattened post-pool activations of the model's last conv block,
    one row per sample."""
    tap = last_conv_pool_index(model)
    rows = []
    for start in range(0, len(dataset), batch_size):
        x = dataset.samples[start:start + batch_size]
        tape = model.forward(x, record=True)
        act = tape.outputs[tap]
        rows.append(act.reshape(len(x), -1))
    return np.concatenate(rows, axis=0)


def make_subsets(train: Dataset, assignments, num_subsets=None) -> Dataset:
    """Attaches cluster assignments as subset ids; returns a new Dataset."""
    assignments = np.asarray(assignments, dtype=np.int64)
    if len(assignments) != len(train):
        raise ValueError("assignments length mismatch")
    if num_subsets is None:
        num_subsets = int(assignments.max()) + 1 if len(assignments) else 0
    if len(assignments) and (assignments.min() < 0
                             or assignments.max() >= num_subsets):
        raise ValueError("subset id out of range")
    return Dataset(train.samples, train.labels, train.num_classes,
                   subset_ids=assignments)


def random_assignments(n: int, m: int, seed=0) -> np.ndarray:
    """Uniform random subset ids, the splitting ablation."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, m, size=n)


def subset_sizes(dataset: Dataset, m: int) -> list:
    if dataset.subset_ids is None:
        raise ValueError("dataset has no subset ids")
    return [int((dataset.subset_ids == i).sum()) for i in range(m)]
