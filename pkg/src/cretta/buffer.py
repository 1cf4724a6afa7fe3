"""Source replay buffer: class-balanced initialization, sequential reads
with wraparound, target/source pairing, and confidence-based filtering.

Buffer contents are frozen after construction; only the read cursor moves.
Labels are kept solely for balanced initialization and filtering and never
flow into any objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .seeding import rng_for


@dataclass
class AugmentationSpec:
    """Small random rotation of the leading 2-D feature plane plus additive
    Gaussian jitter, each applied per sample with the given probability and
    re-sampled on every read."""
    max_rotation_deg: float = 10.0
    jitter_sigma: float = 0.05
    probability: float = 1.0


@dataclass
class SourceBuffer:
    samples: np.ndarray
    labels: np.ndarray | None
    cursor: int = 0
    augmentation: AugmentationSpec | None = None
    origin: str = "source_train"
    seed: int = 0
    reads: int = field(default=0)

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])


@dataclass
class SourceBatch:
    """One sequential read: possibly augmented inputs plus the buffer row
    indices they came from (for cached-energy lookup)."""
    inputs: np.ndarray
    indices: np.ndarray
    augmented: bool


def init_buffer(dataset, fraction: float, balanced: bool = True, seed: int = 0,
                augmentation: AugmentationSpec | None = None,
                origin: str = "source_train") -> SourceBuffer:
    """Sample round(fraction * N) rows; balanced mode keeps per-class counts
    within one of each other.  Deterministic for a fixed seed."""
    n = dataset.inputs.shape[0]
    if n == 0:
        raise ValueError("cannot build a buffer from an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    size = int(round(fraction * n))
    if size < 1:
        raise ValueError("fraction selects no samples")

    rng = rng_for(seed, "buffer-init")
    if balanced:
        if dataset.labels is None:
            raise ValueError("balanced init needs labels")
        classes = np.arange(dataset.num_classes)
        base, extra = divmod(size, dataset.num_classes)
        quotas = np.full(dataset.num_classes, base, dtype=np.int64)
        quotas[rng.permutation(dataset.num_classes)[:extra]] += 1
        chosen = []
        for cls, quota in zip(classes, quotas):
            pool = np.nonzero(dataset.labels == cls)[0]
            if quota > pool.size:
                raise ValueError(f"class {cls} has only {pool.size} samples, "
                                 f"needs {quota}")
            chosen.append(rng.choice(pool, size=quota, replace=False))
        idx = np.concatenate(chosen)
        idx = idx[rng.permutation(idx.size)]
    else:
        idx = rng.choice(n, size=size, replace=False)

    labels = dataset.labels[idx].copy() if dataset.labels is not None else None
    return SourceBuffer(samples=dataset.inputs[idx].copy(), labels=labels,
                        cursor=0, augmentation=augmentation, origin=origin,
                        seed=seed)


def next_source_batch(buffer: SourceBuffer, batch_size: int) -> SourceBatch:
    """Next batch_size samples from the cursor, wrapping around; advances the
    cursor and applies the configured augmentation with fresh randomness."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    m = buffer.size
    indices = (buffer.cursor + np.arange(batch_size)) % m
    buffer.cursor = int((buffer.cursor + batch_size) % m)
    inputs = buffer.samples[indices]
    augmented = False
    if buffer.augmentation is not None:
        inputs = _augment(inputs, buffer.augmentation,
                          rng_for(buffer.seed, "buffer-augment", buffer.reads))
        augmented = True
    buffer.reads += 1
    return SourceBatch(inputs=inputs, indices=indices, augmented=augmented)


def _augment(inputs: np.ndarray, spec: AugmentationSpec,
             rng: np.random.Generator) -> np.ndarray:
    out = inputs.copy()
    n, d = out.shape
    apply = rng.random(n) < spec.probability
    if d >= 2 and spec.max_rotation_deg > 0:
        angles = np.deg2rad(rng.uniform(-spec.max_rotation_deg,
                                        spec.max_rotation_deg, size=n))
        cos, sin = np.cos(angles), np.sin(angles)
        x0, x1 = out[:, 0].copy(), out[:, 1].copy()
        rot0 = cos * x0 - sin * x1
        rot1 = sin * x0 + cos * x1
        out[:, 0] = np.where(apply, rot0, x0)
        out[:, 1] = np.where(apply, rot1, x1)
    if spec.jitter_sigma > 0:
        jitter = rng.normal(0.0, spec.jitter_sigma, size=out.shape)
        out += np.where(apply[:, None], jitter, 0.0)
    return out


def make_pairs(target_batch, source_batch, mode: str = "aligned"):
    """Pair index arrays (target_index, source_index).

    aligned: (i, i) for equally sized batches; cartesian: every combination.
    """
    n = np.shape(target_batch)[0]
    k = np.shape(source_batch)[0]
    if mode == "aligned":
        if n != k:
            raise ValueError(f"aligned pairing needs equal batch sizes, "
                             f"got {n} and {k}")
        idx = np.arange(n, dtype=np.int64)
        return idx, idx.copy()
    if mode == "cartesian":
        ti, si = np.meshgrid(np.arange(n, dtype=np.int64),
                             np.arange(k, dtype=np.int64), indexing="ij")
        return ti.ravel(), si.ravel()
    raise ValueError(f"unknown pairing mode {mode!r}")


def confidence_filter(dataset, source_model, keep: str = "top_fraction",
                      fraction: float = 0.1):
    """Subset of the dataset ranked by the frozen source model's max-softmax
    confidence (running-statistics forward); ties break by dataset index."""
    from .model import forward
    from .stream import Dataset

    if keep not in ("top_fraction", "bottom_fraction"):
        raise ValueError(f"unknown keep mode {keep!r}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = dataset.inputs.shape[0]
    count = int(round(fraction * n))
    if count < 1:
        raise ValueError("fraction selects no samples")

    logits = forward(source_model, dataset.inputs, bn_mode="running").data
    conf = np.max(kernels.softmax_rows(logits), axis=1)
    key = -conf if keep == "top_fraction" else conf
    order = np.argsort(key, kind="stable")
    idx = np.sort(order[:count])
    return Dataset(inputs=dataset.inputs[idx].copy(),
                   labels=dataset.labels[idx].copy(),
                   num_classes=dataset.num_classes,
                   spec=dataset.spec)
