import numpy as np
import pytest
import torch

from anofade.diffusion import compose, make_schedule
from anofade.inference import (
    InferenceTrace,
    OracleDenoiser,
    binarize,
    fuse_masks,
    run_reverse,
    score_image,
)
from anofade.model import DenoiserModel, ModelConfig
from anofade.synthesis import generate_mask, normal_texture, perlin_noise

from conftest import MINIATURE_CONFIG


def _anomalous_case(size=24, seed=0):
    rng = np.random.default_rng(seed)
    normal = normal_texture(size, size, rng)
    anomaly = rng.uniform(-1, 1, normal.shape).astype(np.float32)
    field = perlin_noise(size, size, rng)
    mask = generate_mask(field, float(np.quantile(field, 0.8)), rng)
    image = compose(normal, anomaly, mask, 1.0).astype(np.float32)
    return image, mask, anomaly, normal


class ZeroMaskModel:
    """Predicts an empty mask and arbitrary appearance layers."""

    pe_channels = 4

    def eval(self):
        return self

    def __call__(self, stacked, t):
        b, _, h, w = stacked.shape
        return (torch.zeros(b, 1, h, w),
                torch.full((b, 3, h, w), 0.7),
                torch.full((b, 3, h, w), -0.7))


# ---------------------------------------------------------------------------
# binarize
# ---------------------------------------------------------------------------


def test_binarize_below_threshold_all_zero():
    mask = np.full((4, 4), 0.45)
    assert not binarize(mask, 0.5).any()


def test_binarize_tie_maps_to_one():
    out = binarize(np.array([0.2, 0.5, 0.8]), 0.5)
    assert out.tolist() == [0.0, 1.0, 1.0]


def test_binarize_idempotent(rng):
    mask = rng.random((8, 8))
    once = binarize(mask, 0.5)
    assert np.array_equal(once, binarize(once, 0.5))


def test_binarize_torch_matches_numpy(rng):
    mask = rng.random((4, 4)).astype(np.float32)
    assert np.array_equal(binarize(torch.from_numpy(mask)).numpy(), binarize(mask))


# ---------------------------------------------------------------------------
# reverse engine
# ---------------------------------------------------------------------------


def test_oracle_model_restores_clean_image():
    image, mask, anomaly, normal = _anomalous_case()
    sched = make_schedule("linear", 20)
    oracle = OracleDenoiser(mask, anomaly, normal)
    trace = run_reverse(oracle, image, sched)
    assert len(trace.masks) == 20 and len(trace.images) == 20
    assert np.abs(trace.restored - normal).max() < 1e-4


def test_oracle_keeps_normal_regions_bitwise():
    image, mask, anomaly, normal = _anomalous_case(seed=3)
    sched = make_schedule("linear", 20)
    trace = run_reverse(OracleDenoiser(mask, anomaly, normal), image, sched)
    outside = mask == 0
    for stepped in trace.images:
        assert np.array_equal(stepped[outside], image[outside])


def test_zero_mask_model_is_identity():
    image, *_ = _anomalous_case(seed=1)
    sched = make_schedule("linear", 20)
    trace = run_reverse(ZeroMaskModel(), image, sched)
    assert np.array_equal(trace.restored, image)
    fuse_masks(trace)
    assert not trace.mask_disc.any()
    assert trace.score == 0.0  # reconstruction error is zero too


def test_step_count_override():
    image, mask, anomaly, normal = _anomalous_case()
    sched = make_schedule("linear", 20)
    trace = run_reverse(OracleDenoiser(mask, anomaly, normal), image, sched, steps=5)
    assert len(trace.masks) == 5


def test_trained_style_model_runs(miniature_model):
    image, *_ = _anomalous_case(size=16)
    sched = make_schedule("linear", 4)
    trace = score_image(miniature_model, image, sched)
    assert trace.score is not None and np.isfinite(trace.score)
    assert trace.mask_final.shape == image.shape[:2]


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _constant_trace(size=16, steps=5, level=0.4):
    image = np.zeros((size, size, 3), dtype=np.float32)
    restored = image - 2.0 * np.sqrt(level)  # squared error /4 == level
    trace = InferenceTrace(input_image=image)
    trace.masks = [np.full((size, size), level, dtype=np.float32)] * steps
    trace.images = [restored] * steps
    return trace


def test_fuse_constant_maps_preserve_level():
    trace = _constant_trace(level=0.36)
    _, score = fuse_masks(trace, fuse_weight=0.95, kernel_size=7)
    assert abs(score - 0.36) < 1e-6
    interior = trace.mask_final[6:-6, 6:-6]
    assert np.allclose(interior, 0.36, atol=1e-6)


def test_fuse_weight_endpoints_match_single_source_paths():
    image, mask, anomaly, normal = _anomalous_case(seed=5)
    sched = make_schedule("linear", 10)
    trace = run_reverse(OracleDenoiser(mask, anomaly, normal), image, sched)

    disc_map, disc_score = fuse_masks(trace, fuse_weight=1.0)
    only_disc_map, only_disc_score = fuse_masks(trace, mask_source="disc")
    assert np.array_equal(disc_map, only_disc_map)
    assert disc_score == only_disc_score

    recon_map, recon_score = fuse_masks(trace, fuse_weight=0.0)
    only_recon_map, only_recon_score = fuse_masks(trace, mask_source="recon")
    assert np.array_equal(recon_map, only_recon_map)
    assert recon_score == only_recon_score


def test_fuse_last_mask_variant():
    trace = _constant_trace()
    trace.masks = [np.zeros((16, 16), dtype=np.float32)] * 4 + [
        np.ones((16, 16), dtype=np.float32)
    ]
    last_map, _ = fuse_masks(trace, mask_source="last", kernel_size=1)
    assert np.array_equal(last_map, trace.masks[-1])


def test_mask_disc_is_exact_mean():
    image, mask, anomaly, normal = _anomalous_case(seed=7)
    sched = make_schedule("linear", 8)
    trace = run_reverse(OracleDenoiser(mask, anomaly, normal), image, sched)
    fuse_masks(trace)
    assert np.array_equal(trace.mask_disc, np.stack(trace.masks).mean(axis=0))


def test_binarized_disc_flag():
    trace = _constant_trace(level=0.6)
    fuse_masks(trace, mask_source="disc", binarized_disc=True, kernel_size=1)
    assert np.array_equal(trace.mask_disc, np.ones_like(trace.mask_disc))


def test_score_monotone_in_region_growth():
    rng = np.random.default_rng(11)
    size = 24
    normal = normal_texture(size, size, rng)
    anomaly = rng.uniform(-1, 1, normal.shape).astype(np.float32)
    field = perlin_noise(size, size, rng)
    small = generate_mask(field, float(np.quantile(field, 0.85)), rng)
    big = generate_mask(field, float(np.quantile(field, 0.6)), rng)
    assert np.all(big[small == 1] == 1) and big.sum() > small.sum()

    sched = make_schedule("linear", 10)
    scores = []
    for mask in (small, big):
        image = compose(normal, anomaly, mask, 1.0).astype(np.float32)
        trace = score_image(OracleDenoiser(mask, anomaly, normal), image, sched)
        scores.append(trace.score)
    assert scores[1] >= scores[0]


def test_fuse_validation_errors():
    trace = _constant_trace()
    with pytest.raises(ValueError):
        fuse_masks(trace, fuse_weight=1.5)
    with pytest.raises(ValueError):
        fuse_masks(trace, kernel_size=4)
    with pytest.raises(ValueError):
        fuse_masks(trace, mask_source="nope")
    with pytest.raises(ValueError):
        fuse_masks(InferenceTrace(input_image=trace.input_image))
