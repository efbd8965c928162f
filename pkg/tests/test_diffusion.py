import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anofade.diffusion import (
    SCHEDULE_SHAPES,
    compose,
    forward_sample,
    make_schedule,
    reverse_step,
)

from conftest import random_layers


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def test_linear_schedule_20_steps():
    sched = make_schedule("linear", 20)
    assert np.allclose(sched.betas, np.arange(21) / 20.0)
    assert sched.betas[0] == 0.0 and sched.betas[-1] == 1.0


def test_quadratic_schedule_two_steps():
    assert np.allclose(make_schedule("quadratic", 2).betas, [0.0, 0.25, 1.0])


def test_root_schedule_four_steps():
    expected = [0.0, 0.5, np.sqrt(0.5), np.sqrt(0.75), 1.0]
    assert np.allclose(make_schedule("root", 4).betas, expected)


@pytest.mark.parametrize("shape", SCHEDULE_SHAPES)
@pytest.mark.parametrize("steps", [1, 5, 20, 50])
def test_schedules_strictly_increasing(shape, steps):
    betas = make_schedule(shape, steps).betas
    assert betas[0] == 0.0 and betas[-1] == 1.0
    assert np.all(np.diff(betas) > 0)


def test_zero_steps_rejected():
    with pytest.raises(ValueError):
        make_schedule("linear", 0)
    with pytest.raises(ValueError):
        make_schedule("cubic", 5)


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------


def test_compose_zero_opacity_returns_normal(rng):
    normal, anomaly, mask = random_layers(rng)
    out = compose(normal, anomaly, mask, 0.0)
    assert np.array_equal(out, normal)


def test_compose_full_opacity_full_mask_returns_anomaly(rng):
    normal, anomaly, _ = random_layers(rng)
    mask = np.ones(normal.shape[:2])
    out = compose(normal, anomaly, mask, 1.0)
    assert np.array_equal(out, anomaly)


def test_compose_half_blend_split_mask():
    # constant layers, mask covering the left half, opacity one half:
    # left pixels blend to 0.0, right pixels stay at the normal value
    normal = np.full((4, 6, 3), 0.5)
    anomaly = np.full((4, 6, 3), -0.5)
    mask = np.zeros((4, 6))
    mask[:, :3] = 1.0
    out = compose(normal, anomaly, mask, 0.5)
    assert np.allclose(out[:, :3], 0.0)
    assert np.allclose(out[:, 3:], 0.5)
    # pixel-wise hand evaluation of the blending formula as an oracle
    oracle = (1 - mask[..., None]) * normal + 0.5 * mask[..., None] * anomaly \
        + 0.5 * mask[..., None] * normal
    assert np.allclose(out, oracle)


def test_compose_rejects_bad_inputs(rng):
    normal, anomaly, mask = random_layers(rng)
    with pytest.raises(ValueError):
        compose(normal, anomaly[:4], mask, 0.5)
    with pytest.raises(ValueError):
        compose(normal, anomaly, mask[:4], 0.5)
    with pytest.raises(ValueError):
        compose(normal, anomaly, mask, 1.5)
    with pytest.raises(ValueError):
        compose(normal, anomaly, mask, -0.1)
    with pytest.raises(ValueError):
        compose(normal, anomaly, mask + 2.0, 0.5)


def test_compose_linear_in_opacity(rng):
    normal, anomaly, mask = random_layers(rng)
    b1, b2, alpha = 0.2, 0.9, 0.3
    mixed = compose(normal, anomaly, mask, alpha * b1 + (1 - alpha) * b2)
    combo = alpha * compose(normal, anomaly, mask, b1) \
        + (1 - alpha) * compose(normal, anomaly, mask, b2)
    assert np.allclose(mixed, combo, atol=1e-12)


def test_compose_stays_in_range(rng):
    normal, anomaly, mask = random_layers(rng, size=16)
    soft = rng.random((16, 16))  # soft masks are valid too
    for opacity in (0.0, 0.3, 1.0):
        out = compose(normal, anomaly, soft, opacity)
        assert out.min() >= -1.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------


def test_forward_endpoint_identities(rng):
    normal, anomaly, mask = random_layers(rng)
    sched = make_schedule("linear", 20)
    assert np.array_equal(forward_sample(normal, anomaly, mask, sched, 0), normal)
    assert np.array_equal(
        forward_sample(normal, anomaly, mask, sched, 20),
        compose(normal, anomaly, mask, 1.0),
    )


def test_forward_midpoint_linear(rng):
    normal, anomaly, mask = random_layers(rng)
    sched = make_schedule("linear", 20)
    assert np.array_equal(
        forward_sample(normal, anomaly, mask, sched, 10),
        compose(normal, anomaly, mask, 0.5),
    )


def test_forward_rejects_out_of_range_timestep(rng):
    normal, anomaly, mask = random_layers(rng)
    sched = make_schedule("linear", 5)
    for t in (-1, 6):
        with pytest.raises(ValueError):
            forward_sample(normal, anomaly, mask, sched, t)


def test_monotone_prominence(rng):
    # wherever the anomaly is brighter than the normal appearance, the forward
    # samples are nondecreasing in t
    normal, _, mask = random_layers(rng)
    anomaly = np.clip(normal + rng.uniform(0.05, 0.5, normal.shape), -1, 1)
    sched = make_schedule("root", 7)
    previous = forward_sample(normal, anomaly, mask, sched, 0)
    for t in range(1, 8):
        current = forward_sample(normal, anomaly, mask, sched, t)
        assert np.all(current >= previous - 1e-12)
        previous = current


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------


def test_reverse_zero_mask_is_identity(rng):
    normal, anomaly, mask = random_layers(rng)
    sched = make_schedule("linear", 10)
    x_t = forward_sample(normal, anomaly, mask, sched, 4)
    out = reverse_step(x_t, np.zeros_like(mask), anomaly, normal, sched, 4)
    assert np.array_equal(out, x_t)


def test_reverse_at_zero_rejected(rng):
    normal, anomaly, mask = random_layers(rng)
    sched = make_schedule("linear", 10)
    with pytest.raises(ValueError):
        reverse_step(normal, mask, anomaly, normal, sched, 0)


@pytest.mark.parametrize("shape", SCHEDULE_SHAPES)
@pytest.mark.parametrize("steps", [5, 20])
def test_single_step_identity(rng, shape, steps):
    normal, anomaly, mask = random_layers(rng, size=12)
    sched = make_schedule(shape, steps)
    for t in range(1, steps + 1):
        stepped = reverse_step(
            forward_sample(normal, anomaly, mask, sched, t),
            mask, anomaly, normal, sched, t,
        )
        expected = forward_sample(normal, anomaly, mask, sched, t - 1)
        assert np.abs(stepped - expected).max() < 1e-6


@pytest.mark.parametrize("shape", SCHEDULE_SHAPES)
def test_telescoping_restores_clean_image(rng, shape):
    normal, anomaly, mask = random_layers(rng, size=16)
    sched = make_schedule(shape, 20)
    x = forward_sample(normal, anomaly, mask, sched, 20)
    for t in range(20, 0, -1):
        x = reverse_step(x, mask, anomaly, normal, sched, t)
    assert np.abs(x - normal).max() < 1e-5


def test_region_preservation_is_bitwise(rng):
    normal, anomaly, mask = random_layers(rng, size=16)
    sched = make_schedule("quadratic", 8)
    outside = mask == 0
    x = forward_sample(normal, anomaly, mask, sched, 8)
    assert np.array_equal(x[outside], normal[outside])
    for t in range(8, 0, -1):
        x = reverse_step(x, mask, anomaly, normal, sched, t)
        assert np.array_equal(x[outside], normal[outside])


def test_reverse_output_clamped(rng):
    # a wrong (overshooting) prediction cannot leave the value range
    normal = np.full((4, 4, 3), 0.9)
    anomaly = np.full((4, 4, 3), -1.0)
    mask = np.ones((4, 4))
    sched = make_schedule("linear", 2)
    out = reverse_step(normal, mask, anomaly, np.full_like(normal, 1.0), sched, 1)
    assert out.max() <= 1.0 and out.min() >= -1.0


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    shape=st.sampled_from(SCHEDULE_SHAPES),
    steps=st.sampled_from([1, 3, 5, 20]),
    size=st.integers(2, 10),
)
def test_telescoping_property(seed, shape, steps, size):
    rng = np.random.default_rng(seed)
    normal, anomaly, mask = random_layers(rng, size=size)
    sched = make_schedule(shape, steps)
    x = forward_sample(normal, anomaly, mask, sched, steps)
    for t in range(steps, 0, -1):
        x = reverse_step(x, mask, anomaly, normal, sched, t)
    assert np.abs(x - normal).max() < 1e-5


# ---------------------------------------------------------------------------
# torch interoperability (the training path runs the same algebra on tensors)
# ---------------------------------------------------------------------------


def test_batched_torch_roundtrip(rng):
    normal, anomaly, mask = random_layers(rng, size=8, dtype=np.float32)
    to_bchw = lambda a: torch.from_numpy(a).permute(2, 0, 1)[None]
    n, a = to_bchw(normal), to_bchw(anomaly)
    m = torch.from_numpy(mask)[None]
    sched = make_schedule("linear", 4)
    ts = np.array([3])
    x = forward_sample(n, a, m, sched, ts)
    expected = forward_sample(normal, anomaly, mask, sched, 3)
    assert np.allclose(x[0].permute(1, 2, 0).numpy(), expected, atol=1e-6)
    stepped = reverse_step(x, m, a, n, sched, ts)
    expected_prev = forward_sample(normal, anomaly, mask, sched, 2)
    assert np.allclose(stepped[0].permute(1, 2, 0).numpy(), expected_prev, atol=1e-6)
