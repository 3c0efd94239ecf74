import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c123.losses import CaseInput, LossWeights, depth_loss, mask_loss, rec_loss, rec_loss_terms, rgb_loss
from c123.scene import RenderedView, pose_from_spherical, render

from conftest import random_scene

POSE = pose_from_spherical(0, 0, 3)


def fake_view(rgb, alpha=None, depth=None, background=1.0):
    h = rgb.shape[0]
    alpha = np.ones((h, h)) if alpha is None else alpha
    depth = np.ones((h, h)) if depth is None else depth
    return RenderedView(rgb, depth, alpha, POSE, np.full(3, background), None)


def make_case(image, mask=None, depth=None):
    h = image.shape[0]
    mask = np.ones((h, h)) if mask is None else mask
    return CaseInput(image, mask, depth, "p", POSE)


def depth_pair(seed=0, n=10):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1.0, 3.0, (n, n))
    return gt


def test_rgb_identical_is_zero():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert rgb_loss(fake_view(img), make_case(img)) == 0.0


def test_rgb_offset():
    img = np.full((8, 8, 3), 0.5)
    assert rgb_loss(fake_view(img + 0.1), make_case(img)) == pytest.approx(0.01, abs=1e-12)


def test_rgb_composites_on_white():
    # transparent render over a gray background still reads as white
    view = fake_view(np.full((8, 8, 3), 0.3), alpha=np.zeros((8, 8)), background=0.3)
    assert rgb_loss(view, make_case(np.ones((8, 8, 3)))) == pytest.approx(0.0, abs=1e-15)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        rgb_loss(fake_view(np.zeros((8, 8, 3))), make_case(np.zeros((6, 6, 3))))
    with pytest.raises(ValueError):
        mask_loss(fake_view(np.zeros((8, 8, 3))), make_case(np.zeros((6, 6, 3))))


def test_mask_exact_is_zero():
    mask = (np.arange(64).reshape(8, 8) % 3 == 0).astype(float)
    assert mask_loss(fake_view(np.zeros((8, 8, 3)), alpha=mask), make_case(np.zeros((8, 8, 3)), mask)) == 0.0


def test_mask_fraction():
    mask = np.zeros((10, 10))
    mask[:3] = 1
    value = mask_loss(fake_view(np.zeros((10, 10, 3)), alpha=np.zeros((10, 10))), make_case(np.zeros((10, 10, 3)), mask))
    assert value == pytest.approx(0.3, abs=1e-12)


def test_case_rejects_non_binary_mask():
    with pytest.raises(ValueError):
        CaseInput(np.zeros((4, 4, 3)), np.full((4, 4), 0.5), None, "p", POSE)


def test_depth_perfect_and_anti_correlation():
    gt = depth_pair()
    img = np.zeros(gt.shape + (3,))
    case = make_case(img, depth=gt)
    assert depth_loss(fake_view(img, depth=gt.copy()), case) == pytest.approx(-1, abs=1e-6)
    assert depth_loss(fake_view(img, depth=2.5 * gt + 0.7), case) == pytest.approx(-1, abs=1e-6)
    assert depth_loss(fake_view(img, depth=-gt + 10), case) == pytest.approx(1, abs=1e-6)


def test_depth_degenerate_flags():
    gt = depth_pair()
    img = np.zeros(gt.shape + (3,))
    value, flag = depth_loss(fake_view(img, depth=np.full(gt.shape, 2.0)), make_case(img, depth=gt), return_flag=True)
    assert (value, flag) == (0.0, True)
    value, flag = depth_loss(fake_view(img, depth=gt), make_case(img, depth=np.full(gt.shape, 4.0)), return_flag=True)
    assert (value, flag) == (0.0, True)
    mask = np.zeros(gt.shape)
    mask[0, 0] = 1
    value, flag = depth_loss(fake_view(img, depth=gt), make_case(img, mask=mask, depth=gt), return_flag=True)
    assert (value, flag) == (0.0, True)


def test_depth_ignores_transparent_pixels():
    gt = depth_pair()
    img = np.zeros(gt.shape + (3,))
    depth = gt.copy()
    alpha = np.ones(gt.shape)
    alpha[:, :3] = 0.0
    depth[:, :3] = 50.0  # garbage where nothing was rendered
    assert depth_loss(fake_view(img, alpha=alpha, depth=depth), make_case(img, depth=gt)) == pytest.approx(-1, abs=1e-6)


@given(st.floats(0.01, 100), st.floats(-10, 10), st.floats(0.01, 100), st.floats(-10, 10), st.integers(0, 50))
def test_depth_affine_invariance(a, b, c, d, seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 3, (8, 8))
    rendered = gt + rng.normal(0, 0.3, gt.shape)
    img = np.zeros((8, 8, 3))
    base = depth_loss(fake_view(img, depth=rendered), make_case(img, depth=gt))
    moved = depth_loss(fake_view(img, depth=a * rendered + b), make_case(img, depth=c * gt + d))
    assert moved == pytest.approx(base, abs=1e-6)


def test_rec_loss_weights():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(8, 8, 3))
    mask = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    gt = rng.uniform(1, 2, (8, 8))
    view = fake_view(rng.uniform(size=(8, 8, 3)), alpha=rng.uniform(size=(8, 8)), depth=rng.uniform(1, 2, (8, 8)))
    case = make_case(img, mask, gt)
    assert rec_loss(view, case, LossWeights(0, 0, 0)) == 0.0
    assert rec_loss(view, case, LossWeights(1, 0, 0)) == rgb_loss(view, case)
    expected = rgb_loss(view, case) + mask_loss(view, case) + depth_loss(view, case)
    assert rec_loss(view, case, LossWeights(1, 1, 1)) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_rec_loss_linear_in_weights(wr, wm, wd, scale):
    rng = np.random.default_rng(4)
    view = fake_view(rng.uniform(size=(6, 6, 3)), alpha=rng.uniform(size=(6, 6)), depth=rng.uniform(1, 2, (6, 6)))
    case = make_case(rng.uniform(size=(6, 6, 3)), (rng.uniform(size=(6, 6)) > 0.3).astype(float),
                     rng.uniform(1, 2, (6, 6)))
    one = rec_loss(view, case, LossWeights(wr, wm, wd))
    scaled = rec_loss(view, case, LossWeights(scale * wr, scale * wm, scale * wd))
    assert scaled == pytest.approx(scale * one, rel=1e-12, abs=1e-12)
    assert np.isfinite(one)


def test_loss_weights_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.5, 0.1)


def test_rec_loss_gradient_matches_differences():
    scene = random_scene(6, seed=11)
    pose = pose_from_spherical(0, 0, 3)
    target = random_scene(6, seed=12)
    ref = render(target, pose, 10, keep_tape=False)
    case = CaseInput(ref.rgb, (ref.alpha > 0.5).astype(float), ref.depth, "p", pose)
    weights = LossWeights(5.0, 0.5, 0.1)
    view = render(scene, pose, 10, background=0.4)
    terms = rec_loss_terms(view, case, weights)
    grad = view.backward(terms.grad_rgb, terms.grad_alpha, terms.grad_depth)
    rng = np.random.default_rng(0)
    for _ in range(10):
        idx = tuple(rng.integers(0, 6, 3))
        old = scene.density[idx]
        values = []
        for delta in (1e-4, -1e-4):
            scene.density[idx] = old + delta
            values.append(rec_loss(render(scene, pose, 10, background=0.4, keep_tape=False), case, weights))
        scene.density[idx] = old
        numeric = (values[0] - values[1]) / 2e-4
        assert abs(grad.density[idx] - numeric) <= 1e-4 * max(abs(numeric), 1e-3)
