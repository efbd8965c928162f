import numpy as np
import pytest

from anofade.diffusion import make_schedule
from anofade.synthesis import (
    TexturePool,
    generate_mask,
    make_anomaly_source,
    make_texture_dataset,
    make_toy_test_set,
    make_training_batch,
    normal_texture,
    perlin_noise,
    simulate_prev_mask,
    threshold_shift_mask,
)


# ---------------------------------------------------------------------------
# gradient-noise fields
# ---------------------------------------------------------------------------


def test_perlin_deterministic_for_seed():
    a = perlin_noise(32, 48, seed=7, octaves=3)
    b = perlin_noise(32, 48, seed=7, octaves=3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, perlin_noise(32, 48, seed=8, octaves=3))


def test_perlin_roughly_zero_mean_over_many_seeds():
    means = [abs(perlin_noise(256, 256, seed).mean()) for seed in range(100)]
    assert max(means) < 0.1


def test_perlin_is_smooth():
    field = perlin_noise(256, 256, seed=3)
    span = field.max() - field.min()
    max_step = max(
        np.abs(np.diff(field, axis=0)).max(), np.abs(np.diff(field, axis=1)).max()
    )
    assert max_step < 0.2 * span


def test_perlin_rejects_bad_dims():
    with pytest.raises(ValueError):
        perlin_noise(0, 8, seed=0)


# ---------------------------------------------------------------------------
# mask generation
# ---------------------------------------------------------------------------


def test_threshold_below_min_gives_full_mask():
    field = perlin_noise(16, 16, seed=0)
    mask = generate_mask(field, field.min() - 1.0)
    assert mask.sum() == mask.size


def test_threshold_above_max_resamples_to_nonempty():
    field = perlin_noise(16, 16, seed=0)
    mask = generate_mask(field, field.max() + 1.0, rng=5)
    assert mask.sum() > 0
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_median_threshold_gives_half_area():
    field = perlin_noise(64, 64, seed=11)
    mask = generate_mask(field, float(np.median(field)))
    assert abs(mask.mean() - 0.5) < 0.05


def test_shifted_threshold_matches_ground_truth_at_zero():
    field = perlin_noise(16, 16, seed=2)
    threshold = float(np.median(field))
    assert np.array_equal(
        threshold_shift_mask(field, threshold, 0.0), generate_mask(field, threshold)
    )


def test_positive_shift_shrinks_mask():
    field = perlin_noise(32, 32, seed=4)
    threshold = float(np.quantile(field, 0.7))
    base = threshold_shift_mask(field, threshold, 0.0)
    shrunk = threshold_shift_mask(field, threshold, 0.1)
    assert shrunk.sum() <= base.sum()
    assert np.all(base[shrunk == 1] == 1)  # strict subset relation


def test_prev_mask_dropout_frequency():
    field = perlin_noise(8, 8, seed=1)
    threshold = float(np.median(field))
    drops = sum(
        not simulate_prev_mask(field, threshold, seed).any() for seed in range(10_000)
    )
    assert abs(drops / 10_000 - 0.25) < 0.03


def test_prev_mask_is_threshold_variant_when_kept():
    field = perlin_noise(16, 16, seed=9)
    threshold = float(np.median(field))
    for seed in range(40):
        prev = simulate_prev_mask(field, threshold, seed)
        if not prev.any():
            continue
        gt = generate_mask(field, threshold)
        # grown or shrunken variant: one of the two containments must hold
        assert np.all(gt[prev == 1] == 1) or np.all(prev[gt == 1] == 1)


# ---------------------------------------------------------------------------
# anomaly sources
# ---------------------------------------------------------------------------


def test_anomaly_source_deterministic(rng):
    normal = normal_texture(24, 24, seed=0)
    pool = TexturePool()
    a = make_anomaly_source(normal, pool, seed=3)
    b = make_anomaly_source(normal, pool, seed=3)
    assert np.array_equal(a, b)


def test_self_augment_differs_from_asymmetric_input():
    normal = normal_texture(24, 24, seed=1)  # asymmetric by construction
    out = make_anomaly_source(normal, TexturePool(), seed=0, mode="self")
    assert out.shape == normal.shape
    assert not np.allclose(out, normal)


def test_texture_mode_matches_dims_and_range():
    normal = normal_texture(20, 28, seed=2)
    tex = make_anomaly_source(normal, TexturePool(), seed=1, mode="texture")
    assert tex.shape == normal.shape
    assert tex.min() >= -1.0 and tex.max() <= 1.0


def test_texture_pool_from_directory(tmp_path):
    from anofade.data import save_image

    save_image(tmp_path / "tex.png", np.zeros((16, 16, 3)) + 0.25)
    pool = TexturePool(tmp_path)
    sample = pool.sample(np.random.default_rng(0), 12, 12)
    assert sample.shape == (12, 12, 3)
    with pytest.raises(ValueError):
        TexturePool(tmp_path / "empty_does_not_exist_yet")


def test_unknown_source_mode_rejected():
    with pytest.raises(ValueError):
        make_anomaly_source(normal_texture(8, 8, 0), TexturePool(), 0, mode="bogus")
    with pytest.raises(ValueError):
        make_anomaly_source(normal_texture(8, 8, 0), None, 0)


# ---------------------------------------------------------------------------
# training batches
# ---------------------------------------------------------------------------


def test_half_batch_is_anomalous():
    normals = list(make_texture_dataset(8, 16, seed=0))
    sched = make_schedule("linear", 20)
    batch = make_training_batch(normals, sched, seed=0)
    anomalous = [s for s in batch if s.gt_mask.any()]
    assert len(batch) == 8 and len(anomalous) == 4
    assert all(s.gt_mask.any() for s in batch[:4])
    assert not any(s.gt_mask.any() for s in batch[4:])


def test_normal_samples_pass_through():
    normals = list(make_texture_dataset(4, 16, seed=1))
    sched = make_schedule("linear", 20)
    batch = make_training_batch(normals, sched, seed=1)
    for sample in batch[2:]:
        assert np.array_equal(sample.image_t, sample.gt_normal)
        assert not sample.gt_mask.any()
        assert not sample.gt_anomaly.any()


def test_compositional_invariant_bit_exact():
    normals = list(make_texture_dataset(6, 16, seed=2))
    sched = make_schedule("linear", 20)
    batch = make_training_batch(normals, sched, seed=2)
    for sample in batch:
        assert 1 <= sample.t <= 20
        assert np.array_equal(sample.image_t, sample.recompose(sched))


def test_batch_deterministic_given_seed():
    normals = list(make_texture_dataset(6, 16, seed=3))
    sched = make_schedule("linear", 10)
    a = make_training_batch(normals, sched, seed=9)
    b = make_training_batch(normals, sched, seed=9)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image_t, sb.image_t)
        assert np.array_equal(sa.prev_mask, sb.prev_mask)
        assert sa.t == sb.t


def test_mask_area_nonempty_and_bounded():
    normals = list(make_texture_dataset(16, 32, seed=4))
    sched = make_schedule("linear", 20)
    for seed in range(5):
        batch = make_training_batch(normals, sched, seed=seed, max_mask_area=0.5)
        for sample in batch[: len(batch) // 2]:
            area = sample.gt_mask.mean()
            assert 0 < area <= 0.5


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        make_training_batch([], make_schedule("linear", 5), seed=0)


# ---------------------------------------------------------------------------
# toy dataset
# ---------------------------------------------------------------------------


def test_texture_dataset_shape_and_range():
    data = make_texture_dataset(5, 32, seed=0)
    assert data.shape == (5, 32, 32, 3)
    assert data.min() >= -1.0 and data.max() <= 1.0
    assert np.array_equal(data, make_texture_dataset(5, 32, seed=0))


def test_toy_test_set_composition():
    from anofade.diffusion import compose

    ts = make_toy_test_set(3, 4, 16, seed=5)
    assert len(ts) == 7
    assert ts.labels.tolist() == [0, 0, 0, 1, 1, 1, 1]
    for i in range(len(ts)):
        if ts.labels[i]:
            assert ts.masks[i].any()
            rebuilt = compose(ts.normals[i], ts.anomalies[i], ts.masks[i], 1.0)
            assert np.array_equal(ts.images[i], rebuilt.astype(np.float32))
        else:
            assert not ts.masks[i].any()
            assert np.array_equal(ts.images[i], ts.normals[i])
