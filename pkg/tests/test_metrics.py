"""Metric oracles: accuracy, binned calibration error, corruption error,
confidence summaries, and trajectory tables."""

import math

import numpy as np
import pytest

from cretta.engine import RunRecord
from cretta.metrics import (CalibrationInput, CorruptionErrorTable, accuracy,
                            confidence_stats, ece, ece_from_bin_stats,
                            energy_trajectory, mce)
from cretta.stream import CORRUPTION_KINDS


def brute_force_ece(conf, correct, bins):
    """Definition-level ECE: partition into ((m-1)/M, m/M] with 0 in bin 1."""
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    total = 0.0
    for m in range(1, bins + 1):
        member = [i for i, c in enumerate(conf)
                  if (m == 1 and c <= 1.0 / bins)
                  or (m > 1 and (m - 1) / bins < c <= m / bins)]
        if not member:
            continue
        gap = abs(conf[member].mean() - correct[member].mean())
        total += len(member) / conf.size * gap
    return total


def brute_force_mce(errors_f, errors_f0):
    # iteration order mirrors the implementation so float sums agree exactly
    kinds = sorted({k for k, _ in errors_f})
    ratios = []
    for kind in kinds:
        severities = sorted(s for k, s in errors_f if k == kind)
        num = sum(errors_f[(kind, s)] for s in severities)
        den = sum(errors_f0[(kind, s)] for s in severities)
        ratios.append(num / den)
    return float(100.0 * np.mean(ratios))


def test_accuracy_oracle(rng):
    logits = rng.normal(size=(200, 5))
    labels = rng.integers(0, 5, size=200)
    expected = np.mean([int(np.argmax(row) == y)
                        for row, y in zip(logits, labels)])
    assert accuracy(logits, labels) == expected


def test_accuracy_ties_break_low():
    logits = np.array([[1.0, 1.0, 0.0]])
    assert accuracy(logits, [0]) == 1.0
    assert accuracy(logits, [1]) == 0.0
    with pytest.raises(ValueError):
        accuracy(np.empty((0, 3)), [])
    with pytest.raises(ValueError):
        accuracy(logits, [0, 1])


def test_ece_matches_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(1, 200))
        bins = int(rng.integers(1, 20))
        conf = rng.uniform(size=n)
        conf[rng.uniform(size=n) < 0.1] = rng.choice([0.0, 1.0])
        correct = (rng.uniform(size=n) < conf).astype(np.float64)
        got = ece(CalibrationInput(conf, correct, bins))
        assert abs(got - brute_force_ece(conf, correct, bins)) < 1e-15


def test_ece_hand_value():
    conf = np.full(8, 0.75)
    correct = np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=np.float64)
    assert ece(CalibrationInput(conf, correct)) == pytest.approx(0.25,
                                                                 abs=1e-15)


def test_ece_permutation_invariant(rng):
    conf = rng.uniform(size=300)
    correct = rng.integers(0, 2, size=300).astype(np.float64)
    base = ece(CalibrationInput(conf, correct))
    perm = rng.permutation(300)
    assert ece(CalibrationInput(conf[perm], correct[perm])) == \
        pytest.approx(base, abs=1e-12)


def test_ece_of_perfectly_calibrated_predictor(rng):
    n = 100_000
    conf = rng.uniform(0.5, 1.0, size=n)
    correct = (rng.uniform(size=n) < conf).astype(np.float64)
    assert ece(CalibrationInput(conf, correct)) < 0.01


def test_ece_empty_and_validation():
    assert ece(CalibrationInput(np.empty(0), np.empty(0))) == 0.0
    with pytest.raises(ValueError):
        CalibrationInput([0.5, 1.2], [1.0, 0.0])
    with pytest.raises(ValueError):
        CalibrationInput([0.5], [1.0, 0.0])
    with pytest.raises(ValueError):
        CalibrationInput([0.5], [1.0], bin_count=0)


def test_running_ece_aggregates_across_batches(rng):
    from cretta import kernels
    conf = rng.uniform(size=500)
    correct = rng.integers(0, 2, size=500).astype(np.float64)
    pooled = ece(CalibrationInput(conf, correct))
    counts = np.zeros(10)
    conf_sums = np.zeros(10)
    correct_sums = np.zeros(10)
    for chunk in range(5):
        sl = slice(chunk * 100, chunk * 100 + 100)
        c, s, r = kernels.calibration_bin_stats(conf[sl], correct[sl], 10)
        counts += c
        conf_sums += s
        correct_sums += r
    assert ece_from_bin_stats(counts, conf_sums, correct_sums) == \
        pytest.approx(pooled, abs=1e-15)


def _random_error_tables(rng):
    keys = [(k, s) for k in CORRUPTION_KINDS for s in range(1, 6)]
    errors_f = {key: float(rng.uniform(0.05, 0.9)) for key in keys}
    errors_f0 = {key: float(rng.uniform(0.05, 0.9)) for key in keys}
    return errors_f, errors_f0


def test_mce_matches_brute_force(rng):
    for _ in range(100):
        errors_f, errors_f0 = _random_error_tables(rng)
        got = mce(CorruptionErrorTable(errors_f, errors_f0))
        assert abs(got - brute_force_mce(errors_f, errors_f0)) < 1e-15


def test_mce_of_base_model_is_100(rng):
    errors_f, _ = _random_error_tables(rng)
    assert mce(CorruptionErrorTable(errors_f, dict(errors_f))) == 100.0


def test_mce_scale_consistency(rng):
    errors_f, errors_f0 = _random_error_tables(rng)
    base = mce(CorruptionErrorTable(errors_f, errors_f0))
    halved = {k: v / 2 for k, v in errors_f.items()}
    assert mce(CorruptionErrorTable(halved, errors_f0)) == \
        pytest.approx(base / 2, abs=1e-12)


def test_mce_validation(rng):
    errors_f, errors_f0 = _random_error_tables(rng)
    with pytest.raises(ValueError):
        CorruptionErrorTable(errors_f, {("rotation", 1): 0.5})
    bad = dict(errors_f)
    bad[("shear", 1)] = 1.5
    with pytest.raises(ValueError):
        CorruptionErrorTable(bad, errors_f0)
    zero_base = {k: 0.0 for k in errors_f0}
    with pytest.raises(ValueError):
        mce(CorruptionErrorTable(errors_f, zero_base))


def test_confidence_stats_uniform():
    stats = confidence_stats(np.zeros((7, 10)))
    assert stats["mean_confidence"] == pytest.approx(0.1, abs=1e-12)
    assert stats["mean_entropy"] == pytest.approx(math.log(10), abs=1e-12)
    with pytest.raises(ValueError):
        confidence_stats(np.zeros((0, 3)))


def test_confidence_stats_sharp_predictor():
    logits = np.zeros((4, 3))
    logits[:, 1] = 60.0
    stats = confidence_stats(logits)
    assert stats["mean_confidence"] == pytest.approx(1.0, abs=1e-15)
    assert stats["mean_entropy"] == pytest.approx(0.0, abs=1e-15)


def _record(batch_index, energy, weight, conf, correct):
    from cretta import kernels
    counts, conf_sums, correct_sums = kernels.calibration_bin_stats(
        np.asarray(conf, dtype=np.float64),
        np.asarray(correct, dtype=np.float64), 10)
    return RunRecord(batch_index=batch_index, stage="iid", batch_size=len(conf),
                     loss=0.0, mean_weight=weight, mean_e_theta_t=energy,
                     mean_e_theta_s=0.0, mean_e_phi_t=0.0, accuracy=0.5,
                     correct=int(sum(correct)),
                     mean_confidence=float(np.mean(conf)),
                     retained=None, substituted=0,
                     bin_counts=counts.tolist(),
                     bin_conf_sums=conf_sums.tolist(),
                     bin_correct_sums=correct_sums.tolist(),
                     spot_check_dev=None, costs={})


def test_energy_trajectory_columns_and_delta(rng):
    records = []
    for i in range(50):
        conf = rng.uniform(size=20)
        correct = rng.integers(0, 2, size=20).astype(float)
        records.append(_record(i, energy=-1.0 - 0.01 * i, weight=0.5,
                               conf=conf, correct=correct))
    table = energy_trajectory(records)
    assert table["batch"] == [0, 9, 19, 29, 39, 49]
    assert table["mean_energy_target"][0] == -1.0
    assert table["delta"]["mean_energy_target"] == pytest.approx(-0.49)
    assert table["delta"]["mean_weight"] == 0.0

    # running ECE at index i pools batches 0..i
    running_at_9 = table["running_ece"][1]
    counts = np.sum([r.bin_counts for r in records[:10]], axis=0)
    conf_sums = np.sum([r.bin_conf_sums for r in records[:10]], axis=0)
    correct_sums = np.sum([r.bin_correct_sums for r in records[:10]], axis=0)
    assert running_at_9 == ece_from_bin_stats(counts, conf_sums, correct_sums)


def test_energy_trajectory_index_bounds(rng):
    records = [_record(i, -1.0, 0.5, rng.uniform(size=5),
                       np.ones(5)) for i in range(5)]
    table = energy_trajectory(records, batch_indices=[0, 4])
    assert table["batch"] == [0, 4]
    with pytest.raises(IndexError):
        energy_trajectory(records, batch_indices=[0, 5])
