from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inrsteg import ndtensor as nt
from inrsteg.imageio import read_image
from inrsteg.inr import (
    FunctionRep, InrArch, box_downsample, dequantize, eval_function, fit_inr, image_to_cloud,
    init_theta, make_grid, quantize, render,
)
from inrsteg.metrics import psnr

DATA = Path(__file__).parent / "data"


def test_grid_examples():
    assert make_grid(2, 2).coords.tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]
    assert make_grid(1, 1).coords.tolist() == [[0, 0]]
    assert sorted(set(make_grid(3, 1).coords[:, 0].tolist())) == [-1, 0, 1]
    with pytest.raises(ValueError):
        make_grid(0, 3)


def test_param_count():
    assert InrArch().n_params == (128 * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 3 + 3)
    assert InrArch().n_params == 49923


def test_theta_length_checked():
    with pytest.raises(ValueError):
        FunctionRep(np.zeros(10), InrArch())


def test_zero_theta_renders_half_grey():
    img = eval_function(FunctionRep(np.zeros(InrArch().n_params)), make_grid(5, 7))
    assert img.shape == (5, 7, 3) and np.all(img == 0.5)


def test_eval_is_deterministic_and_in_range():
    rep = FunctionRep(init_theta(InrArch(), seed=3))
    a = eval_function(rep, make_grid(9, 9))
    b = eval_function(rep, make_grid(9, 9))
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_eval_chunking_does_not_change_values():
    rep = FunctionRep(init_theta(InrArch(), seed=4))
    grid = make_grid(10, 10)
    # BLAS blocking may differ with the chunk size, so only to rounding
    assert np.allclose(eval_function(rep, grid), eval_function(rep, grid, chunk=7), rtol=0, atol=1e-12)


def test_embedding_is_frozen():
    emb = InrArch().embedding
    with pytest.raises(ValueError):
        emb.B[0, 0] = 1.0
    assert emb(np.zeros((1, 2))).shape == (1, 128)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_quantization_error_bound(vals):
    x = np.array(vals)
    assert np.max(np.abs(dequantize(quantize(x)) - x)) <= 1 / 510 + 1e-12


def test_constant_image_fit():
    target = np.full((8, 8, 3), 0.5)
    res = fit_inr(target, steps=200)
    assert psnr(eval_function(res.rep, make_grid(8, 8)), target) >= 50.0


def test_best_loss_is_non_increasing_and_final():
    target = read_image(DATA / "chelsea_32.png")[::2, ::2]
    res = fit_inr(target, steps=60)
    best = np.minimum.accumulate(res.losses)
    assert res.best_loss == pytest.approx(best[-1]) or res.best_loss <= best[-1]
    mse = np.mean((eval_function(res.rep, make_grid(16, 16)) - target) ** 2)
    assert mse == pytest.approx(res.best_loss, rel=1e-9)


def test_refit_is_stable():
    target = read_image(DATA / "coffee_32.png")[::2, ::2]
    first = fit_inr(target, steps=400)
    render1 = eval_function(first.rep, make_grid(16, 16))
    p1 = psnr(render1, target)
    second = fit_inr(render1, steps=400, seed=1)
    assert psnr(eval_function(second.rep, make_grid(16, 16)), render1) >= p1 - 3.0


def test_resolution_independent_render():
    rep = FunctionRep(init_theta(InrArch(), seed=5))
    for h, w in [(1, 1), (3, 17), (128, 128)]:
        assert eval_function(rep, make_grid(h, w)).shape == (h, w, 3)


def test_fit_loss_gradient_4x4():
    arch = InrArch()
    target = np.random.default_rng(0).uniform(size=(4, 4, 3))
    coords, feats = image_to_cloud(target)
    y = nt.Tensor(feats[None])

    def loss(theta):
        return nt.square(render(theta.reshape(1, -1), arch, coords) - y).mean()

    theta = init_theta(arch, seed=6) + np.random.default_rng(1).normal(size=arch.n_params) * 0.01
    # check a random subset of coordinates: the full vector has ~50k entries
    pick = np.zeros(arch.n_params, bool)
    pick[np.random.default_rng(2).choice(arch.n_params, 300, replace=False)] = True
    assert nt.grad_check(loss, theta, exclude=~pick) < 1e-4


def test_box_downsample():
    img = np.arange(16.0).reshape(4, 4, 1)
    assert box_downsample(img, 2)[..., 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    with pytest.raises(ValueError):
        box_downsample(img, 3)


def test_fit_rejects_bad_targets():
    with pytest.raises(ValueError):
        fit_inr(np.full((4, 4, 3), 2.0), steps=1)
    with pytest.raises(ValueError):
        fit_inr(np.zeros((4, 4, 3)), steps=0)
