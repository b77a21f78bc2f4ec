import numpy as np
import pytest

from inrsteg import fungen
from inrsteg import ndtensor as nt
from inrsteg.fungen import (
    DISC_KEYS, HYPER_KEYS, GaspConfig, GaspState, TrainingAborted, disc_forward,
    discriminator_loss, gasp_train_step, generate_weights, init_disc, init_hyper, r1_penalty,
    sample_cover, sample_latent, train_gasp, two_blob_images,
)
from inrsteg.inr import InrArch, box_downsample, eval_function, make_grid
from inrsteg.metrics import psnr
from inrsteg.ndtensor import Tensor
from inrsteg.optim import AdamState, adam_step

SMALL = InrArch(n_freq=8, hidden=16)
SMALL_CFG = GaspConfig(batch=8, disc_hidden=16, latent=64)


def test_theta_length_formula():
    hyper = init_hyper(InrArch(), GaspConfig(), seed=0)
    rep = generate_weights(hyper, sample_latent(1), InrArch())
    assert rep.theta.size == (2 * 64 * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 3 + 3)


def test_generate_weights_is_pure():
    hyper = init_hyper(SMALL, SMALL_CFG, seed=0)
    z = sample_latent(3)
    a, b = generate_weights(hyper, z, SMALL), generate_weights(hyper, z, SMALL)
    assert np.array_equal(a.theta, b.theta)
    with pytest.raises(ValueError):
        generate_weights(hyper, z[:10], SMALL)
    with pytest.raises(ValueError):
        generate_weights(hyper, z, InrArch())


def test_sample_cover_repeatable():
    hyper = init_hyper(SMALL, SMALL_CFG, seed=0)
    a = sample_cover(hyper, 7, 9, 11, SMALL)
    assert a.shape == (9, 11, 3)
    assert np.array_equal(a, sample_cover(hyper, 7, 9, 11, SMALL))


def test_untrained_generator_is_near_constant():
    for seed in range(3):
        hyper = init_hyper(InrArch(), GaspConfig(), seed)
        for s in range(5):
            assert sample_cover(hyper, s, 16, 16, InrArch()).std() < 0.1


@pytest.fixture(scope="module")
def trained():
    imgs = two_blob_images(24, size=8, seed=0)
    state, rows = train_gasp(imgs, fungen.with_steps(SMALL_CFG, 40), seed=5, arch=SMALL)
    return state, rows


def test_latent_sensitivity(trained):
    state, _ = trained
    z = sample_latent(11)
    z2 = z.copy()
    z2[0] += 0.5
    grid = make_grid(16, 16)
    a = eval_function(generate_weights(state.hyper, z, SMALL), grid)
    b = eval_function(generate_weights(state.hyper, z2, SMALL), grid)
    assert np.any(a != b)


def test_sample_superresolution_consistency(trained):
    state, _ = trained
    lo = sample_cover(state.hyper, 4, 64, 64, SMALL)
    hi = sample_cover(state.hyper, 4, 128, 128, SMALL)
    assert psnr(box_downsample(hi, 2), lo) >= 25.0


def test_training_log_finite(trained):
    _, rows = trained
    assert len(rows) == 40
    for r in rows:
        assert all(np.isfinite(r[k]) for k in ("d_loss", "g_loss", "r1"))


def test_zero_steps_returns_initial_params():
    imgs = two_blob_images(4, size=8, seed=0)
    state, rows = train_gasp(imgs, fungen.with_steps(SMALL_CFG, 0), seed=2, arch=SMALL)
    fresh = GaspState.create(SMALL, fungen.with_steps(SMALL_CFG, 0), 2)
    assert rows == []
    for k in HYPER_KEYS:
        assert np.array_equal(state.hyper[k], fresh.hyper[k])


def test_training_is_bit_reproducible():
    imgs = two_blob_images(10, size=8, seed=1)
    cfg = fungen.with_steps(SMALL_CFG, 5)
    a, ra = train_gasp(imgs, cfg, seed=9, arch=SMALL)
    b, rb = train_gasp(imgs, cfg, seed=9, arch=SMALL)
    assert ra == rb
    for k in HYPER_KEYS:
        assert np.array_equal(a.hyper[k], b.hyper[k])
    for k in DISC_KEYS:
        assert np.array_equal(a.disc[k], b.disc[k])


def test_updates_touch_only_their_own_params(monkeypatch):
    imgs = two_blob_images(8, size=8, seed=2)
    state = GaspState.create(SMALL, SMALL_CFG, 3)
    hyper0 = {k: v.copy() for k, v in state.hyper.items()}
    calls = []
    real_adam = fungen.adam_step

    def spy(param, grad, opt):
        # snapshot the generator whenever the discriminator is being stepped
        phase = "disc" if opt in state.disc_opt.values() else "hyper"
        calls.append((phase, {k: v.copy() for k, v in state.hyper.items()},
                      {k: v.copy() for k, v in state.disc.items()}))
        return real_adam(param, grad, opt)

    monkeypatch.setattr(fungen, "adam_step", spy)
    gasp_train_step(state, imgs[:4].reshape(4, 64, 3), make_grid(8, 8).coords)
    phases = [c[0] for c in calls]
    assert phases == ["disc"] * len(DISC_KEYS) + ["hyper"] * len(HYPER_KEYS)
    for phase, hyper_snap, _ in calls[:len(DISC_KEYS)]:
        assert all(np.array_equal(hyper_snap[k], hyper0[k]) for k in HYPER_KEYS)
    disc_after_d = calls[len(DISC_KEYS)][2]
    assert all(np.array_equal(state.disc[k], disc_after_d[k]) for k in DISC_KEYS)


def test_r1_only_sees_real_clouds(monkeypatch):
    seen = []
    real_r1 = fungen.r1_penalty

    def spy(disc, feats, l=10.0):
        seen.append(np.array(feats.data if isinstance(feats, Tensor) else feats))
        return real_r1(disc, feats, l)

    monkeypatch.setattr(fungen, "r1_penalty", spy)
    state = GaspState.create(SMALL, SMALL_CFG, 4)
    real = two_blob_images(4, size=8, seed=3).reshape(4, 64, 3)
    gasp_train_step(state, real, make_grid(8, 8).coords)
    assert len(seen) == 1 and np.array_equal(seen[0], real)


def test_discriminator_learns_separable_toy():
    cfg = SMALL_CFG
    dp = init_disc(SMALL, cfg, seed=0)
    emb = SMALL.embedding(make_grid(6, 6).coords)
    real = np.full((4, 36, 3), 0.9)
    fake = Tensor(np.full((4, 36, 3), 0.1))
    opts = {k: AdamState(cfg.lr_disc, cfg.beta1, cfg.beta2) for k in DISC_KEYS}
    losses = []
    for _ in range(50):
        tp = {k: Tensor(v, requires_grad=True) for k, v in dp.items()}
        total, *_ = discriminator_loss(tp, emb, real, fake, cfg.r1)
        losses.append(total.item())
        for k, g in zip(DISC_KEYS, nt.grad(total, [tp[k] for k in DISC_KEYS])):
            dp[k] = adam_step(dp[k], g.data, opts[k])
    assert losses[-1] < losses[0]


def _linear_disc(w):
    def disc(y: Tensor) -> Tensor:
        b = y.shape[0]
        return (y.reshape(b, -1) @ Tensor(w[:, None])).reshape(b)
    return disc


def test_r1_linear_discriminator_exact():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5 * 3)
    y = rng.uniform(size=(1, 5, 3))
    got = r1_penalty(_linear_disc(w), y, l=10.0).item()
    want = 5.0 * float(w @ w)
    assert abs(got - want) / want < 1e-10


def test_r1_constant_discriminator_is_zero():
    const = lambda y: Tensor(np.zeros(y.shape[0]))
    assert r1_penalty(const, np.ones((2, 4, 3))).item() == 0.0
    zero_w = _linear_disc(np.zeros(12))
    assert r1_penalty(zero_w, np.ones((1, 4, 3))).item() == 0.0


def test_r1_matches_finite_differences():
    cfg = SMALL_CFG
    dp = {k: Tensor(v) for k, v in init_disc(SMALL, cfg, seed=1).items()}
    emb = SMALL.embedding(make_grid(3, 3).coords)
    y0 = np.random.default_rng(2).uniform(size=(1, 9, 3))
    disc = lambda y: disc_forward(dp, emb, y)
    h = 1e-6
    num = np.zeros(y0.size)
    flat = y0.reshape(-1)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        with nt.no_grad():
            num[i] = (disc(Tensor(up.reshape(y0.shape))).item()
                      - disc(Tensor(dn.reshape(y0.shape))).item()) / (2 * h)
    want = 0.5 * 10.0 * float(num @ num)
    got = r1_penalty(disc, y0, 10.0).item()
    assert abs(got - want) / max(want, 1e-12) < 1e-4


def test_r1_is_differentiable_wrt_discriminator():
    dp = {k: Tensor(v, requires_grad=True) for k, v in init_disc(SMALL, SMALL_CFG, 3).items()}
    emb = SMALL.embedding(make_grid(2, 2).coords)
    pen = r1_penalty(lambda y: disc_forward(dp, emb, y), np.full((2, 4, 3), 0.3))
    grads = nt.grad(pen, [dp["wy"]])
    assert grads[0] is not None and np.any(grads[0].data != 0)


def test_nan_aborts_with_step():
    state = GaspState.create(SMALL, SMALL_CFG, 6)
    state.disc["wo"] = state.disc["wo"] * np.nan
    with pytest.raises(TrainingAborted) as info:
        gasp_train_step(state, np.full((2, 4, 3), 0.5), make_grid(2, 2).coords)
    assert info.value.step == 1


def test_config_validation():
    with pytest.raises(ValueError):
        GaspConfig(lr_hyper=0)
    with pytest.raises(ValueError):
        GaspConfig(r1=-1)
