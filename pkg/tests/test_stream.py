"""Synthetic data geometry, corruption operators, and the three stream
schedulers."""

import itertools

import numpy as np
import pytest

from cretta.model import forward, pretrain_source
from cretta.stream import (CORRUPTION_KINDS, CorruptionSpec, corrupt,
                           dirichlet_stream, dump_dataset, gradual_stream,
                           iid_stream, make_dataset)


def test_dataset_deterministic():
    a = make_dataset(n=200, C=3, seed=4)
    b = make_dataset(n=200, C=3, seed=4)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = make_dataset(n=200, C=3, seed=5)
    assert not np.array_equal(a.inputs, c.inputs)


def test_label_histogram_within_one():
    ds = make_dataset(n=10, d=4, C=3, seed=0)
    assert sorted(np.bincount(ds.labels, minlength=3).tolist()) == [3, 3, 4]
    exact = make_dataset(n=4000, C=4, seed=0)
    np.testing.assert_array_equal(np.bincount(exact.labels), [1000] * 4)


def test_nearest_centroid_separates_wide_blobs():
    ds = make_dataset(n=400, d=4, C=2, class_separation=10.0, seed=5)
    means = np.stack([ds.inputs[ds.labels == c].mean(axis=0)
                      for c in range(2)])
    dist = np.linalg.norm(ds.inputs[:, None, :] - means[None], axis=2)
    assert np.mean(np.argmin(dist, axis=1) == ds.labels) == 1.0


def test_moons_shape_and_class_count():
    ds = make_dataset("moons", n=300, d=3, C=2, seed=1)
    assert ds.inputs.shape == (300, 3)
    assert set(ds.labels.tolist()) == {0, 1}
    with pytest.raises(ValueError):
        make_dataset("moons", n=300, C=3)


@pytest.mark.parametrize("kwargs", [
    dict(n=5, C=3),            # fewer than two samples per class
    dict(kind="spirals"),
    dict(d=1),
    dict(spread=0.0),
    dict(redundancy=-0.1),
    dict(offset=-1.0),
])
def test_dataset_validation(kwargs):
    with pytest.raises(ValueError):
        make_dataset(**{"n": 100, "C": 2, **kwargs})


def test_offset_only_translates_first_dimension():
    base = make_dataset(n=300, d=4, C=2, class_separation=5.0, seed=8,
                        offset=0.0)
    moved = make_dataset(n=300, d=4, C=2, class_separation=5.0, seed=8,
                         offset=2.0)
    np.testing.assert_allclose(moved.inputs[:, 0] - base.inputs[:, 0], 10.0,
                               atol=1e-12)
    np.testing.assert_array_equal(moved.inputs[:, 1:], base.inputs[:, 1:])
    np.testing.assert_array_equal(moved.labels, base.labels)


def test_redundant_plane_repeats_center_layout():
    # dims 2-3 hold a scaled copy of the class centers: per-class means land
    # at redundancy * radius * (cos, sin) of the class angle
    ds = make_dataset(n=4000, d=4, C=2, class_separation=5.0, seed=3,
                      redundancy=0.4)
    radius = 2.5
    for cls, angle in ((0, 0.0), (1, np.pi)):
        mean = ds.inputs[ds.labels == cls][:, 2:4].mean(axis=0)
        np.testing.assert_allclose(
            mean, [0.4 * radius * np.cos(angle), 0.4 * radius * np.sin(angle)],
            atol=0.06)


def test_severity_zero_is_identity_copy():
    x = np.random.default_rng(0).normal(size=(5, 4))
    out = corrupt(x, CorruptionSpec("gaussian_noise", 0), seed=1)
    np.testing.assert_array_equal(out, x)
    assert not np.shares_memory(out, x)


def test_corrupt_deterministic():
    x = np.random.default_rng(1).normal(size=(50, 4))
    spec = CorruptionSpec("occlusion", 3)
    np.testing.assert_array_equal(corrupt(x, spec, seed=7),
                                  corrupt(x, spec, seed=7))
    assert not np.array_equal(corrupt(x, spec, seed=7),
                              corrupt(x, spec, seed=8))


def test_noise_scale_tracks_severity():
    x = np.zeros((4000, 4))
    sigmas = []
    for s in range(1, 6):
        noise = corrupt(x, CorruptionSpec("gaussian_noise", s), seed=2)
        sigmas.append(float(noise.std()))
        assert sigmas[-1] == pytest.approx(0.1 * s, rel=0.05)
    assert sigmas == sorted(sigmas)
    assert np.linalg.norm(corrupt(x[:100], CorruptionSpec(
        "gaussian_noise", 1), seed=2)) < np.linalg.norm(
        corrupt(x[:100], CorruptionSpec("gaussian_noise", 5), seed=2))


def test_rotation_is_invertible():
    x = np.random.default_rng(3).normal(size=(40, 5))
    for s in (1, 5):
        out = corrupt(x, CorruptionSpec("rotation", s), seed=0)
        np.testing.assert_array_equal(out[:, 2:], x[:, 2:])
        np.testing.assert_allclose(np.hypot(out[:, 0], out[:, 1]),
                                   np.hypot(x[:, 0], x[:, 1]), atol=1e-12)
        angle = np.deg2rad(9.0 * s)
        cos, sin = np.cos(angle), np.sin(angle)
        back = out.copy()
        back[:, 0] = cos * out[:, 0] + sin * out[:, 1]
        back[:, 1] = -sin * out[:, 0] + cos * out[:, 1]
        np.testing.assert_allclose(back, x, atol=1e-12)


def test_feature_scale_multiplies_everything():
    x = np.random.default_rng(4).normal(size=(10, 4))
    out = corrupt(x, CorruptionSpec("feature_scale", 5), seed=0)
    np.testing.assert_array_equal(out, x * 1.75)


def test_occlusion_zero_count():
    x = np.random.default_rng(5).normal(size=(200, 6))
    out = corrupt(x, CorruptionSpec("occlusion", 3), seed=0)
    zeros_per_row = np.sum(out == 0.0, axis=1)
    np.testing.assert_array_equal(zeros_per_row, np.ceil(6 * 0.1 * 3))
    touched = out == 0.0
    np.testing.assert_array_equal(out[~touched], x[~touched])


def test_shear_mixes_second_into_first():
    x = np.random.default_rng(6).normal(size=(10, 4))
    out = corrupt(x, CorruptionSpec("shear", 4), seed=0)
    np.testing.assert_allclose(out[:, 0], x[:, 0] + 0.4 * x[:, 1],
                               atol=1e-15)
    np.testing.assert_array_equal(out[:, 1:], x[:, 1:])


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 3)
    with pytest.raises(ValueError):
        CorruptionSpec("rotation", 6)


def test_source_accuracy_degrades_with_severity():
    """Severity maps are calibrated so a frozen source model loses accuracy
    monotonically (1-point noise allowance on the seed-averaged curve)."""
    seeds = 20
    curves = {kind: np.zeros(6) for kind in CORRUPTION_KINDS}
    for seed in range(seeds):
        train = make_dataset(n=600, d=4, C=2, class_separation=5.0,
                             seed=100 + seed)
        test = make_dataset(n=2000, d=4, C=2, class_separation=5.0,
                            seed=200 + seed)
        model = pretrain_source(train, seed=seed, epochs=4, batch_size=100)
        for kind in CORRUPTION_KINDS:
            for s in range(6):
                x = corrupt(test.inputs, CorruptionSpec(kind, s), seed=seed)
                logits = forward(model, x, bn_mode="running").data
                acc = np.mean(np.argmax(logits, axis=1) == test.labels)
                curves[kind][s] += 100.0 * acc / seeds
    for kind, curve in curves.items():
        drops = np.diff(curve[1:])
        assert np.all(drops <= 1.0), (kind, curve)
        assert curve[5] < curve[1], kind


def test_iid_epoch_partitions_dataset():
    ds = make_dataset(n=60, d=4, C=2, seed=9)
    stream = iid_stream(ds, batch_size=15, seed=1)
    rows = np.concatenate([next(stream).inputs for _ in range(4)])
    np.testing.assert_array_equal(rows[np.lexsort(rows.T)],
                                  ds.inputs[np.lexsort(ds.inputs.T)])
    # the next epoch reshuffles
    second = np.concatenate([next(stream).inputs for _ in range(4)])
    assert not np.array_equal(rows, second)
    np.testing.assert_array_equal(second[np.lexsort(second.T)],
                                  ds.inputs[np.lexsort(ds.inputs.T)])


def test_iid_stream_deterministic_and_validated():
    ds = make_dataset(n=60, d=4, C=2, seed=9)
    a = [next(iid_stream(ds, 20, seed=3)).inputs for _ in range(1)]
    b = [next(iid_stream(ds, 20, seed=3)).inputs for _ in range(1)]
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        next(iid_stream(ds, 61, seed=0))


def test_iid_batches_match_global_proportions():
    # chi-square sanity: summed per-batch statistic stays under the 99.9%
    # quantile for 100 batches x (C-1) degrees of freedom (~381)
    ds = make_dataset(n=4000, C=4, seed=2)
    stream = iid_stream(ds, batch_size=37, seed=5)
    stat = 0.0
    expected = 37 / 4
    for _ in range(100):
        counts = np.bincount(next(stream).labels, minlength=4)
        stat += float(np.sum((counts - expected) ** 2 / expected))
    assert stat < 381.0


def test_dirichlet_high_delta_is_nearly_uniform():
    ds = make_dataset(n=4000, C=4, seed=0)
    stream = dirichlet_stream(ds, delta=1e6, batch_size=200, seed=1)
    shares = np.stack([np.bincount(next(stream).labels, minlength=4) / 200
                       for _ in range(200)])
    pooled = shares.mean(axis=0)
    assert 0.5 * float(np.abs(pooled - 0.25).sum()) < 0.02
    sigma = np.sqrt(0.25 * 0.75 / (200 * 200))
    assert np.all(np.abs(pooled - 0.25) < 3 * sigma + 1e-9)


def test_dirichlet_low_delta_is_dominated_by_one_class():
    ds = make_dataset(n=4000, C=4, seed=0)
    stream = dirichlet_stream(ds, delta=0.01, batch_size=200, seed=1)
    dominant = [np.max(np.bincount(next(stream).labels, minlength=4)) / 200
                for _ in range(100)]
    assert float(np.median(dominant)) > 0.8
    with pytest.raises(ValueError):
        next(dirichlet_stream(ds, delta=0.0, batch_size=200))


def test_dirichlet_substitution_keeps_batches_full():
    ds = make_dataset(n=40, d=4, C=2, seed=7)
    stream = dirichlet_stream(ds, delta=0.01, batch_size=20, seed=3)
    substituted = 0
    for _ in range(30):  # many epochs on a tiny pool
        batch = next(stream)
        assert batch.inputs.shape == (20, 4)
        assert batch.stage == "dirichlet"
        substituted += batch.substituted
    assert substituted > 0


def test_gradual_stage_schedule():
    ds = make_dataset(n=120, d=4, C=2, seed=4)
    batches = list(gradual_stream(ds, "rotation", [1, 2, 3, 4, 5],
                                  batches_per_stage=2, batch_size=10, seed=0,
                                  eval_batches=3))
    tags = [b.stage for b in batches]
    sev = [b.severity for b in batches]
    assert tags == (["Q"] * 2 + ["1"] * 2 + ["2"] * 2 + ["3"] * 2
                    + ["4"] * 2 + ["P"] * 2 + ["Q_eval"] * 3)
    assert sev == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 0, 0, 0]
    pool = {tuple(row) for row in ds.inputs}
    for b in batches:
        if b.severity == 0:
            assert {tuple(row) for row in b.inputs} <= pool
    with pytest.raises(ValueError):
        next(gradual_stream(ds, "rotation", [2, 1], 2, 10))


def test_gradual_counts_match_stage_budget():
    ds = make_dataset(n=600, d=4, C=2, seed=4)
    batches = list(gradual_stream(ds, "gaussian_noise", [1, 2, 3, 4, 5],
                                  batches_per_stage=10, batch_size=10,
                                  seed=0))
    adapt = [b for b in batches if b.stage != "Q_eval"]
    assert len(adapt) == 60  # clean prologue + five severity stages
    assert len(batches) - len(adapt) == 5
    # fresh corruption randomness per batch within one stage
    noisy = [b.inputs for b in batches if b.stage == "P"]
    assert not np.array_equal(noisy[0], noisy[1])


def test_dump_dataset_round_trips(tmp_path):
    ds = make_dataset(n=6, d=3, C=2, seed=1)
    path = tmp_path / "data.tsv"
    text = dump_dataset(ds, path)
    assert path.read_text() == text
    lines = text.strip().split("\n")
    assert lines[0] == "label\tx0\tx1\tx2"
    assert len(lines) == 7
    first = lines[1].split("\t")
    assert int(first[0]) == ds.labels[0]
    np.testing.assert_array_equal([float(v) for v in first[1:]],
                                  ds.inputs[0])
