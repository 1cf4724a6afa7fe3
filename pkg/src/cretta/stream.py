"""Synthetic datasets, corruption operators, and evaluation streams.

Datasets are Gaussian blob rings (anisotropic clusters stretched along the
class circle) or two moons.  Corruptions map a severity level 1..5 onto a
monotone intensity; severity 0 is the identity.  Three stream schedulers
feed the adaptation engine: seeded i.i.d. epochs, Dirichlet class-skewed
batches, and a staged gradual-shift schedule ending in a frozen clean
re-evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for

CORRUPTION_KINDS = ("gaussian_noise", "feature_scale", "rotation",
                    "occlusion", "shear")


@dataclass
class DatasetSpec:
    kind: str = "blobs"
    n: int = 4000
    dim: int = 4
    classes: int = 4
    separation: float = 5.0
    aspect: float = 4.0
    spread: float = 10.0
    redundancy: float = 0.4
    offset: float = 2.0
    seed: int = 0


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    spec: DatasetSpec


@dataclass
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= int(self.severity) <= 5:
            raise ValueError("severity must lie in [0, 5]")


@dataclass
class StreamBatch:
    inputs: np.ndarray
    labels: np.ndarray
    stage: str = "iid"
    severity: int = 0
    substituted: int = 0


def make_dataset(kind: str = "blobs", n: int = 4000, d: int = 4, C: int = 4,
                 class_separation: float = 5.0, seed: int = 0,
                 aspect: float = 4.0, spread: float = 10.0,
                 redundancy: float = 0.4, offset: float = 2.0) -> Dataset:
    """Deterministic labeled dataset; near-linear class separation at
    separation >= 2 so a small pretrained MLP reaches >= 95% clean accuracy.

    blobs: C anisotropic Gaussian clusters with centers spaced
    class_separation apart on a circle in the first two dimensions; cluster
    radial std is separation/spread and tangential std is aspect times that.
    The circle sits offset*separation away from the origin, so geometric
    corruptions of that plane drag the whole marginal with them and batch
    statistics have something to undo.  Smaller spread means thicker
    clusters and more mass near the decision boundary.  When d >= 4 and
    redundancy > 0, dimensions 2-3 repeat the center layout at redundancy
    times the scale with isotropic noise: a weaker clean copy of the class
    signal that plane-targeted corruptions leave intact.  moons: the classic
    two interleaved half circles (C must be 2).
    """
    if n < 2 * C:
        raise ValueError("need at least two samples per class")
    if kind not in ("blobs", "moons"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    if kind == "moons" and C != 2:
        raise ValueError("moons is a 2-class dataset")
    if d < 2:
        raise ValueError("datasets need at least 2 feature dimensions")
    if spread <= 0:
        raise ValueError("spread must be positive")
    if redundancy < 0:
        raise ValueError("redundancy must be >= 0")
    if offset < 0:
        raise ValueError("offset must be >= 0")

    spec = DatasetSpec(kind=kind, n=n, dim=d, classes=C,
                       separation=float(class_separation),
                       aspect=float(aspect), spread=float(spread),
                       redundancy=float(redundancy), offset=float(offset),
                       seed=int(seed))
    rng = rng_for(seed, "dataset", kind)
    counts = np.full(C, n // C, dtype=np.int64)
    counts[: n % C] += 1
    labels = np.repeat(np.arange(C), counts)

    if kind == "blobs":
        radius = class_separation / 2.0 if C == 2 else \
            class_separation / (2.0 * np.sin(np.pi / C))
        sigma_r = class_separation / spread
        sigma_t = aspect * sigma_r
        angles = 2.0 * np.pi * labels / C
        centers = np.zeros((n, d))
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
        radial = rng.normal(0.0, sigma_r, size=n)
        tangential = rng.normal(0.0, sigma_t, size=n)
        inputs = centers.copy()
        inputs[:, 0] += radial * np.cos(angles) - tangential * np.sin(angles)
        inputs[:, 1] += radial * np.sin(angles) + tangential * np.cos(angles)
        inputs[:, 0] += offset * class_separation
        if d >= 4 and redundancy > 0:
            # Scaled-down copy of the center layout; corruptions that act on
            # the first plane leave this one clean.
            inputs[:, 2] += redundancy * radius * np.cos(angles)
            inputs[:, 3] += redundancy * radius * np.sin(angles)
            inputs[:, 2:4] += rng.normal(0.0, sigma_r, size=(n, 2))
            if d > 4:
                inputs[:, 4:] += rng.normal(0.0, sigma_r, size=(n, d - 4))
        elif d > 2:
            inputs[:, 2:] += rng.normal(0.0, sigma_r, size=(n, d - 2))
    else:
        scale = class_separation / 2.0
        t = rng.uniform(0.0, np.pi, size=n)
        inputs = np.zeros((n, d))
        outer = labels == 0
        inputs[outer, 0] = np.cos(t[outer])
        inputs[outer, 1] = np.sin(t[outer])
        inputs[~outer, 0] = 1.0 - np.cos(t[~outer])
        inputs[~outer, 1] = 0.5 - np.sin(t[~outer])
        inputs[:, :2] *= scale
        inputs[:, :2] += rng.normal(0.0, 0.06 * scale, size=(n, 2))
        if d > 2:
            inputs[:, 2:] += rng.normal(0.0, 0.06 * scale, size=(n, d - 2))

    order = rng.permutation(n)
    return Dataset(inputs=inputs[order], labels=labels[order],
                   num_classes=C, spec=spec)


def corrupt(inputs, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply one corruption at its severity-mapped intensity.

    Maps: gaussian_noise sigma = 0.1 s; feature_scale factor 1 + 0.15 s;
    rotation 9 degrees * s on the first two dims; occlusion zeroes
    ceil(d * 0.1 * s) seed-chosen coordinates per sample; shear coefficient
    0.1 s.  Severity 0 returns a copy of the input.
    """
    x = np.array(inputs, dtype=np.float64)
    s = int(spec.severity)
    if s == 0:
        return x
    n, d = x.shape
    rng = rng_for(seed, "corrupt", spec.kind, s)
    if spec.kind == "gaussian_noise":
        x += rng.normal(0.0, 0.1 * s, size=x.shape)
    elif spec.kind == "feature_scale":
        x *= 1.0 + 0.15 * s
    elif spec.kind == "rotation":
        angle = np.deg2rad(9.0 * s)
        cos, sin = np.cos(angle), np.sin(angle)
        x0, x1 = x[:, 0].copy(), x[:, 1].copy()
        x[:, 0] = cos * x0 - sin * x1
        x[:, 1] = sin * x0 + cos * x1
    elif spec.kind == "occlusion":
        k = int(np.ceil(d * 0.1 * s))
        for i in range(n):
            cols = rng.choice(d, size=k, replace=False)
            x[i, cols] = 0.0
    elif spec.kind == "shear":
        x[:, 0] += 0.1 * s * x[:, 1]
    return x


# ---------------------------------------------------------------------------
# stream schedulers
# ---------------------------------------------------------------------------

def iid_stream(dataset: Dataset, batch_size: int, seed: int = 0):
    """Endless stream of batches; each epoch is a fresh seeded permutation
    consumed sequentially, so one epoch's batches partition the dataset."""
    if batch_size > dataset.inputs.shape[0]:
        raise ValueError("batch_size exceeds dataset size")
    n = dataset.inputs.shape[0]
    epoch = 0
    while True:
        order = rng_for(seed, "iid-epoch", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield StreamBatch(inputs=dataset.inputs[idx],
                              labels=dataset.labels[idx])
        epoch += 1


def dirichlet_stream(dataset: Dataset, delta: float, batch_size: int,
                     seed: int = 0):
    """Class-skewed stream: per batch, class proportions are drawn from
    Dirichlet(delta * 1_C) and samples come from per-class pools without
    replacement within an epoch.  When a class runs dry the shortfall is
    filled from the remaining classes and counted in the batch's
    `substituted` field; when everything is dry a new epoch begins.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    c = dataset.num_classes
    epoch = 0
    pools = _class_pools(dataset, seed, epoch)
    batch_idx = 0
    while True:
        rng = rng_for(seed, "dirichlet-batch", batch_idx)
        proportions = rng.dirichlet(np.full(c, delta))
        wanted = rng.multinomial(batch_size, proportions)
        taken: list[np.ndarray] = []
        substituted = 0
        for cls in range(c):
            take = min(int(wanted[cls]), pools[cls].size)
            substituted += int(wanted[cls]) - take
            if take:
                taken.append(pools[cls][:take])
                pools[cls] = pools[cls][take:]
        shortfall = batch_size - sum(t.size for t in taken)
        cls = 0
        while shortfall > 0:
            if all(p.size == 0 for p in pools):
                epoch += 1
                pools = _class_pools(dataset, seed, epoch)
            if pools[cls].size:
                taken.append(pools[cls][:1])
                pools[cls] = pools[cls][1:]
                shortfall -= 1
            cls = (cls + 1) % c
        idx = np.concatenate(taken)
        idx = idx[rng.permutation(idx.size)]
        yield StreamBatch(inputs=dataset.inputs[idx],
                          labels=dataset.labels[idx],
                          stage="dirichlet", substituted=substituted)
        batch_idx += 1


def _class_pools(dataset: Dataset, seed: int, epoch: int) -> list[np.ndarray]:
    pools = []
    for cls in range(dataset.num_classes):
        members = np.nonzero(dataset.labels == cls)[0]
        order = rng_for(seed, "dirichlet-pool", epoch, cls).permutation(members.size)
        pools.append(members[order])
    return pools


def gradual_stream(dataset: Dataset, corruption_kind: str, severities,
                   batches_per_stage: int, batch_size: int, seed: int = 0,
                   eval_batches: int = 5):
    """Staged stream: a clean prologue tagged "Q", one stage per severity in
    order (the last tagged "P"), then eval_batches frozen re-evaluation
    batches on clean data tagged "Q_eval".  Each stage corrupts fresh i.i.d.
    draws from the clean dataset at its own severity.
    """
    severities = [int(s) for s in severities]
    if any(a > b for a, b in zip(severities, severities[1:])):
        raise ValueError("severities must be non-decreasing")
    base = iid_stream(dataset, batch_size, seed)
    stages = [("Q", 0)]
    for pos, s in enumerate(severities):
        tag = "P" if pos == len(severities) - 1 else str(s)
        stages.append((tag, s))
    batch_counter = 0
    for tag, severity in stages:
        for _ in range(batches_per_stage):
            clean = next(base)
            spec = CorruptionSpec(kind=corruption_kind, severity=severity)
            yield StreamBatch(
                inputs=corrupt(clean.inputs, spec,
                               seed=_batch_seed(seed, batch_counter)),
                labels=clean.labels, stage=tag, severity=severity)
            batch_counter += 1
    for _ in range(eval_batches):
        clean = next(base)
        yield StreamBatch(inputs=clean.inputs.copy(), labels=clean.labels,
                          stage="Q_eval", severity=0)
        batch_counter += 1


def _batch_seed(seed: int, batch_counter: int) -> int:
    from .seeding import seed_sequence_for
    return int(seed_sequence_for(seed, "gradual-corrupt",
                                 batch_counter).generate_state(1)[0])


def dump_dataset(dataset: Dataset, path=None) -> str:
    """Render the dataset as tab-separated columns (label, x0, x1, ...);
    writes to path when given, always returns the text."""
    d = dataset.inputs.shape[1]
    lines = ["label\t" + "\t".join(f"x{j}" for j in range(d))]
    for label, row in zip(dataset.labels, dataset.inputs):
        cells = "\t".join(repr(float(v)) for v in row)
        lines.append(f"{int(label)}\t{cells}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
