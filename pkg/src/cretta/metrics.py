"""Evaluation metrics: accuracy, expected calibration error, mean corruption
error, confidence statistics, and energy-trajectory summaries.

ECE bins are ((m-1)/M, m/M] with confidence 0 placed in bin 1, so the common
confidence-1.0 mass lands in the top bin.  Argmax ties break to the lowest
class index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label."""
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("accuracy expects a non-empty [n x C] array")
    if labels.shape != (logits.shape[0],):
        raise ValueError("labels length must match the batch")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class CalibrationInput:
    confidences: np.ndarray
    correctness: np.ndarray
    bin_count: int = 10

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.correctness = np.asarray(self.correctness, dtype=np.float64)
        if self.confidences.shape != self.correctness.shape:
            raise ValueError("confidence and correctness lengths differ")
        if self.bin_count < 1:
            raise ValueError("bin_count must be at least 1")
        if self.confidences.size and (self.confidences.min() < 0.0
                                      or self.confidences.max() > 1.0):
            raise ValueError("confidences must lie in [0, 1]")


def ece(calibration: CalibrationInput) -> float:
    """Expected calibration error: sum_m (|bin_m| / N) |conf_m - acc_m|."""
    counts, conf_sums, correct_sums = kernels.calibration_bin_stats(
        calibration.confidences, calibration.correctness, calibration.bin_count)
    return ece_from_bin_stats(counts, conf_sums, correct_sums)


def ece_from_bin_stats(counts, conf_sums, correct_sums) -> float:
    """ECE from per-bin aggregates; aggregates add across batches, which is
    how running ECE over a stream is computed."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    occupied = counts > 0
    gaps = np.abs(np.asarray(conf_sums)[occupied] / counts[occupied]
                  - np.asarray(correct_sums)[occupied] / counts[occupied])
    return float(np.sum(counts[occupied] / total * gaps))


@dataclass
class CorruptionErrorTable:
    """Error rates per (corruption, severity) for an evaluated model f and
    the base model f0, measured on identical data."""
    errors_f: dict
    errors_f0: dict

    def __post_init__(self):
        if set(self.errors_f) != set(self.errors_f0):
            raise ValueError("f and f0 must cover the same (corruption, "
                             "severity) cells")
        for table in (self.errors_f, self.errors_f0):
            for key, value in table.items():
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"error rate out of range at {key!r}")


def mce(table: CorruptionErrorTable) -> float:
    """Mean corruption error as a percentage: per corruption the ratio of
    summed error rates f / f0 across severities, averaged over corruptions.
    f = f0 gives exactly 100."""
    kinds = sorted({kind for kind, _ in table.errors_f})
    ratios = []
    for kind in kinds:
        severities = sorted(s for k, s in table.errors_f if k == kind)
        num = sum(table.errors_f[(kind, s)] for s in severities)
        den = sum(table.errors_f0[(kind, s)] for s in severities)
        if den == 0.0:
            raise ValueError(f"base model has zero error sum for {kind!r}; "
                             "ratio undefined")
        ratios.append(num / den)
    return float(100.0 * np.mean(ratios))


def confidence_stats(logits) -> dict:
    """Mean max-softmax probability and mean softmax entropy over rows."""
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("confidence_stats expects a non-empty [n x C] array")
    probs = kernels.softmax_rows(logits)
    log_probs = logits - kernels.logsumexp_rows(logits)[:, None]
    entropy = -np.sum(probs * log_probs, axis=1)
    return {"mean_confidence": float(np.mean(np.max(probs, axis=1))),
            "mean_entropy": float(np.mean(entropy))}


DEFAULT_TRAJECTORY_BATCHES = (0, 9, 19, 29, 39, 49)


def energy_trajectory(records, batch_indices=DEFAULT_TRAJECTORY_BATCHES) -> dict:
    """Mean target energy, mean weight, and running ECE at the requested
    batch indices, plus the last-minus-first delta per column.

    records is a RunRecord sequence ordered by batch.
    """
    records = list(records)
    batch_indices = [int(i) for i in batch_indices]
    for i in batch_indices:
        if i < 0 or i >= len(records):
            raise IndexError(f"batch index {i} outside the record series "
                             f"(length {len(records)})")
    bins = len(records[0].bin_counts)
    counts = np.zeros(bins)
    conf_sums = np.zeros(bins)
    correct_sums = np.zeros(bins)
    running = []
    for rec in records:
        counts += rec.bin_counts
        conf_sums += rec.bin_conf_sums
        correct_sums += rec.bin_correct_sums
        running.append(ece_from_bin_stats(counts, conf_sums, correct_sums))

    table = {
        "batch": batch_indices,
        "mean_energy_target": [records[i].mean_e_theta_t for i in batch_indices],
        "mean_weight": [records[i].mean_weight for i in batch_indices],
        "running_ece": [running[i] for i in batch_indices],
    }
    table["delta"] = {
        key: (None if table[key][0] is None or table[key][-1] is None
              else table[key][-1] - table[key][0])
        for key in ("mean_energy_target", "mean_weight", "running_ece")
    }
    return table
