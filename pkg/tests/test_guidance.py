import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c123.errors import BackendError, NumericError
from c123.guidance import (CallCounter, DiffusionStepSampler, EchoBackend, OffsetBackend, OracleBackend,
                           linear_alphas_cumprod, relative_pose, sds_grad_2d, sds_grad_3d)
from c123.losses import CaseInput
from c123.scene import pose_from_spherical, render

from conftest import random_scene


@pytest.fixture
def view():
    return render(random_scene(6, seed=1), pose_from_spherical(40, 10, 3), 8, background=0.5)


@pytest.fixture
def reference(view):
    return CaseInput(view.rgb, np.ones((8, 8)), None, "p", pose_from_spherical(0, 0, 3))


def noise_for(view, seed=0):
    return np.random.default_rng(seed).standard_normal(view.rgb.shape)


def test_schedule_is_decreasing():
    a = linear_alphas_cumprod()
    assert a.shape == (1000,)
    assert np.all((a > 0) & (a < 1))
    assert np.all(np.diff(a) < 0)


def test_echo_gives_zero(view, reference):
    g = sds_grad_2d(view, "p", EchoBackend(), 500, noise_for(view))
    assert np.array_equal(g.grad, np.zeros_like(view.rgb))
    g = sds_grad_3d(view, reference, view.pose, EchoBackend(), 500, noise_for(view))
    assert np.array_equal(g.grad, np.zeros_like(view.rgb))


def test_constant_offset(view):
    c = np.full(view.rgb.shape, 0.37)
    g = sds_grad_2d(view, "p", OffsetBackend(c), 123, noise_for(view), weighting=lambda t: 1.0)
    np.testing.assert_allclose(g.weighted, c, atol=1e-12)


def test_sds_is_deterministic(view):
    backend = OffsetBackend(lambda z: z ** 2)
    g1 = sds_grad_2d(view, "p", backend, 321, noise_for(view, 4))
    g2 = sds_grad_2d(view, "p", backend, 321, noise_for(view, 4))
    assert np.array_equal(g1.grad, g2.grad)


def test_pulls_toward_target():
    # gradient descent on the raster itself with residual z - z_target
    rng = np.random.default_rng(0)
    target = rng.uniform(size=(8, 8, 3))
    backend = OffsetBackend(lambda z: z - target)
    pose = pose_from_spherical(0, 0, 3)
    image = rng.uniform(size=(8, 8, 3))
    errors = []
    for step in range(50):
        view = render(random_scene(4), pose, 8, keep_tape=False)
        view.rgb = image
        g = sds_grad_2d(view, "p", backend, 500, rng.standard_normal(image.shape))
        image = image - 0.05 * g.weighted
        errors.append(np.mean((image - target) ** 2))
    assert all(b < a for a, b in zip(errors, errors[1:]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5.0), st.integers(1, 1000))
def test_weight_scales_gradient(w, t):
    view = render(random_scene(4, seed=2), pose_from_spherical(30, 0, 3), 8, keep_tape=False)
    backend = OffsetBackend(lambda z: np.sin(z))
    noise = noise_for(view)
    g1 = sds_grad_2d(view, "p", backend, t, noise, weighting=lambda _: w)
    g2 = sds_grad_2d(view, "p", backend, t, noise, weighting=lambda _: 2 * w)
    np.testing.assert_allclose(g2.weighted, 2 * g1.weighted, rtol=1e-14)
    assert np.all(np.isfinite(g1.grad))


def test_linear_in_residual(view):
    noise = noise_for(view)
    a = np.random.default_rng(1).normal(size=view.rgb.shape)
    b = np.random.default_rng(2).normal(size=view.rgb.shape)
    ga = sds_grad_2d(view, "p", OffsetBackend(a), 50, noise).grad
    gb = sds_grad_2d(view, "p", OffsetBackend(b), 50, noise).grad
    gab = sds_grad_2d(view, "p", OffsetBackend(2 * a - 3 * b), 50, noise).grad
    np.testing.assert_allclose(gab, 2 * ga - 3 * gb, atol=1e-12)


def test_backend_failure_is_wrapped(view):
    class Broken(EchoBackend):
        def predict_noise(self, z_t, condition, t_diff):
            raise RuntimeError("device lost")

    with pytest.raises(BackendError) as info:
        sds_grad_2d(view, "p", Broken(), 10, noise_for(view))
    assert isinstance(info.value.__cause__, RuntimeError)


def test_non_finite_prediction(view):
    bad = np.full(view.rgb.shape, np.nan)
    with pytest.raises(NumericError):
        sds_grad_2d(view, "p", OffsetBackend(bad), 10, noise_for(view))


def test_noise_shape_checked(view):
    with pytest.raises(ValueError):
        sds_grad_2d(view, "p", EchoBackend(), 10, np.zeros((4, 4, 3)))


def test_3d_condition_carries_relative_pose(view, reference):
    seen = {}

    class Spy(EchoBackend):
        def predict_noise(self, z_t, condition, t_diff):
            seen["cond"] = condition
            return super().predict_noise(z_t, condition, t_diff)

    sds_grad_3d(view, reference, view.pose, Spy(), 10, noise_for(view))
    cond = seen["cond"]
    assert cond.kind == "IMAGE_POSE"
    assert cond.image is reference.image
    R, T = relative_pose(reference.reference_pose, view.pose)
    np.testing.assert_allclose(cond.R, R)
    np.testing.assert_allclose(cond.T, T)


def test_relative_pose_identity():
    pose = pose_from_spherical(10, 20, 3)
    R, T = relative_pose(pose, pose)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T, 0, atol=1e-12)


def test_oracle_zero_at_target():
    target = random_scene(6, seed=8)
    pose = pose_from_spherical(60, 15, 3)
    view = render(target, pose, 8, background=0.7)
    g = sds_grad_2d(view, "p", OracleBackend(target), 400, noise_for(view))
    np.testing.assert_allclose(g.grad, 0, atol=1e-12)


def test_oracle_kappa():
    target = random_scene(6, seed=8)
    pose = pose_from_spherical(60, 15, 3)
    view = render(random_scene(6, seed=9), pose, 8, background=0.7)
    noise = noise_for(view)
    g0 = sds_grad_2d(view, "p", OracleBackend(target, kappa=0.0), 400, noise)
    g1 = sds_grad_2d(view, "p", OracleBackend(target, kappa=1.0), 400, noise)
    g2 = sds_grad_2d(view, "p", OracleBackend(target, kappa=2.0), 400, noise)
    assert np.array_equal(g0.grad, np.zeros_like(g0.grad))
    np.testing.assert_allclose(g2.grad, 2 * g1.grad, atol=1e-12)
    assert np.abs(g1.grad).max() > 0


def test_call_counter(view):
    counter = CallCounter(EchoBackend())
    for _ in range(3):
        sds_grad_2d(view, "p", counter, 10, noise_for(view))
    assert counter.calls == 3
    assert counter.num_steps == 1000


@given(st.integers(2, 5000), st.integers(0, 2 ** 32 - 1))
def test_step_sampler_bounds(num_steps, seed):
    sampler = DiffusionStepSampler()
    t = sampler.sample(np.random.default_rng(seed), num_steps)
    lo, hi = math.ceil(0.02 * num_steps), math.floor(0.98 * num_steps)
    assert max(1, lo) <= t <= max(lo, hi)


def test_step_sampler_rejects_bad_fractions():
    with pytest.raises(ValueError):
        DiffusionStepSampler(0.5, 0.4)
