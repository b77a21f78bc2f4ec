"""Hypernetwork over function reps, trained adversarially on point clouds.

The generator maps a Gaussian latent to the flat weight vector of an
:class:`~inrsteg.inr.InrArch` MLP. The discriminator sees an image as a set of
(coordinate, feature) pairs: a shared per-point MLP, mean pooling, then a
small head producing one logit per cloud. Training uses the non-saturating
logistic loss with an R1 penalty on real clouds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .inr import CoordGrid, FunctionRep, InrArch, eval_function, make_grid, render
from .ndtensor import Rng, Tensor
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

HYPER_KEYS = ("w1", "b1", "w2", "b2")
DISC_KEYS = ("we", "wy", "b0", "w1", "b1", "wh", "bh", "wo", "bo")


@dataclass(frozen=True)
class GaspConfig:
    r1: float = 10.0
    lr_hyper: float = 1e-4
    lr_disc: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 64
    steps: int = 2000
    points: int | None = None  # random coordinate subset per step; None = full grid
    latent: int = 64
    hyper_hidden: int = 64
    init_gain: float = 0.05
    disc_hidden: int = 128

    def __post_init__(self):
        if self.lr_hyper <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.r1 < 0:
            raise ValueError("R1 coefficient must be non-negative")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch must be >= 1 and steps >= 0")


def _uniform(rng: Rng, shape, bound: float) -> np.ndarray:
    return rng.uniform(shape, -bound, bound)


def init_hyper(arch: InrArch, cfg: GaspConfig, seed: int) -> dict:
    """Two-layer MLP latent -> hidden -> theta.

    The output layer is drawn with bound ``init_gain * sqrt(3 / fan_in)`` and
    a zero bias, so freshly generated reps are close to the constant 0.5
    image.
    """
    rng = Rng(seed)
    n_out = arch.n_params
    return {
        "w1": _uniform(rng, (cfg.latent, cfg.hyper_hidden), math.sqrt(6.0 / cfg.latent)),
        "b1": np.zeros(cfg.hyper_hidden),
        "w2": _uniform(rng, (cfg.hyper_hidden, n_out),
                       cfg.init_gain * math.sqrt(3.0 / cfg.hyper_hidden)),
        "b2": np.zeros(n_out),
    }


def init_disc(arch: InrArch, cfg: GaspConfig, seed: int) -> dict:
    rng = Rng(seed)
    e, c, hd = arch.embedding.dim, arch.channels, cfg.disc_hidden
    fan0 = e + c
    return {
        "we": _uniform(rng, (e, hd), math.sqrt(6.0 / fan0)),
        "wy": _uniform(rng, (c, hd), math.sqrt(6.0 / fan0)),
        "b0": np.zeros(hd),
        "w1": _uniform(rng, (hd, hd), math.sqrt(6.0 / hd)),
        "b1": np.zeros(hd),
        "wh": _uniform(rng, (hd, hd), math.sqrt(6.0 / hd)),
        "bh": np.zeros(hd),
        "wo": _uniform(rng, (hd, 1), math.sqrt(3.0 / hd)),
        "bo": np.zeros(1),
    }


def _tensors(params: dict, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _bias(b: Tensor, shape) -> Tensor:
    return b.broadcast_to(shape)


def hyper_forward(hp: dict, z: Tensor) -> Tensor:
    """(B, latent) -> (B, n_params)."""
    b = z.shape[0]
    h = nt.relu(z @ hp["w1"] + _bias(hp["b1"], (b, hp["b1"].shape[0])))
    return h @ hp["w2"] + _bias(hp["b2"], (b, hp["b2"].shape[0]))


def generate_weights(hyper: dict, z: np.ndarray, arch: InrArch) -> FunctionRep:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != hyper["w1"].shape[0]:
        raise ValueError(f"latent must have {hyper['w1'].shape[0]} entries, got {z.size}")
    if hyper["w2"].shape[1] != arch.n_params:
        raise ValueError("hypernetwork output size does not match the INR architecture")
    with nt.no_grad():
        theta = hyper_forward(_tensors(hyper, False), Tensor(z[None])).data[0]
    return FunctionRep(theta, arch)


def sample_latent(seed: int, dim: int = 64) -> np.ndarray:
    return Rng(seed).normal((dim,))


def sample_cover(hyper: dict, seed: int, height: int, width: int, arch: InrArch) -> np.ndarray:
    """Draw z from ``seed`` and render the resulting function on an H×W grid."""
    z = sample_latent(seed, hyper["w1"].shape[0])
    return eval_function(generate_weights(hyper, z, arch), make_grid(height, width))


def disc_forward(dp: dict, emb: np.ndarray, feats: Tensor) -> Tensor:
    """Set discriminator: (B, n, C) features at shared embedded coords -> (B,) logits."""
    b, n, _ = feats.shape
    hd = dp["b0"].shape[0]
    point = Tensor(emb) @ dp["we"]
    h = feats @ dp["wy"] + point.broadcast_to((b, n, hd)) + _bias(dp["b0"], (b, n, hd))
    h = nt.relu(h)
    h = nt.relu(h @ dp["w1"] + _bias(dp["b1"], (b, n, hd)))
    pooled = h.mean(axis=1)
    h = nt.relu(pooled @ dp["wh"] + _bias(dp["bh"], (b, hd)))
    return (h @ dp["wo"] + _bias(dp["bo"], (b, 1))).reshape(b)


def r1_penalty(disc: Callable[[Tensor], Tensor], feats, l: float = 10.0) -> Tensor:
    """(l/2) * sum_i ||d D / d y_i||^2, averaged over the clouds in the batch.

    ``disc`` maps (B, n, C) features to (B,) logits. The result stays
    differentiable with respect to whatever parameters ``disc`` closes over.
    """
    y = Tensor(np.asarray(feats.data if isinstance(feats, Tensor) else feats), requires_grad=True)
    out = disc(y)
    (g,) = nt.grad(out.sum(), [y], create_graph=True)
    if g is None:
        return Tensor(0.0)
    if not np.all(np.isfinite(g.data)):
        raise nt.NonFiniteError("non-finite discriminator gradient in R1")
    return nt.scale(g.square().sum(), 0.5 * l / y.shape[0])


def discriminator_loss(dp: dict, emb: np.ndarray, real, fake: Tensor, l: float) -> tuple:
    """Non-saturating logistic loss plus R1 on the real clouds only.

    Returns ``(total, real_term, fake_term, r1_term)``.
    """
    def disc(feats: Tensor) -> Tensor:
        return disc_forward(dp, emb, feats)

    d_real = nt.softplus(-disc(Tensor(real))).mean()
    d_fake = nt.softplus(disc(fake)).mean()
    r1 = r1_penalty(disc, real, l) if l > 0 else Tensor(0.0)
    return d_real + d_fake + r1, d_real, d_fake, r1


@dataclass
class GaspState:
    arch: InrArch
    cfg: GaspConfig
    hyper: dict
    disc: dict
    rng: Rng
    step: int = 0
    hyper_opt: dict = field(default_factory=dict)
    disc_opt: dict = field(default_factory=dict)

    @classmethod
    def create(cls, arch: InrArch, cfg: GaspConfig, seed: int) -> "GaspState":
        master = Rng(seed)
        hyper = init_hyper(arch, cfg, master.spawn_seed())
        disc = init_disc(arch, cfg, master.spawn_seed())
        state = cls(arch, cfg, hyper, disc, Rng(master.spawn_seed()))
        state.hyper_opt = {k: AdamState(cfg.lr_hyper, cfg.beta1, cfg.beta2) for k in HYPER_KEYS}
        state.disc_opt = {k: AdamState(cfg.lr_disc, cfg.beta1, cfg.beta2) for k in DISC_KEYS}
        return state


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def _finite(value: float, step: int, what: str) -> float:
    if not math.isfinite(value):
        raise TrainingAborted(step, f"non-finite {what}")
    return value


def gasp_train_step(state: GaspState, real: np.ndarray, coords: np.ndarray) -> dict:
    """One discriminator update followed by one hypernetwork update.

    ``real`` holds (B, n, C) features at ``coords`` (n, 2). Fake clouds are
    renders of freshly drawn latents at the same coordinates.
    """
    cfg, arch = state.cfg, state.arch
    b = real.shape[0]
    emb = arch.embedding(coords)
    step = state.step + 1

    try:
        # discriminator
        z = Tensor(state.rng.normal((b, cfg.latent)))
        with nt.no_grad():
            fake = render(hyper_forward(_tensors(state.hyper, False), z), arch, coords)
        dp = _tensors(state.disc, True)
        d_loss, d_real, d_fake, r1 = discriminator_loss(dp, emb, real, fake, cfg.r1)
        _finite(d_loss.item(), step, "discriminator loss")
        d_grads = nt.grad(d_loss, [dp[k] for k in DISC_KEYS])
        for k, g in zip(DISC_KEYS, d_grads):
            state.disc[k] = adam_step(state.disc[k], g.data, state.disc_opt[k])

        # hypernetwork, against the updated discriminator
        z = Tensor(state.rng.normal((b, cfg.latent)))
        hp = _tensors(state.hyper, True)
        dp_frozen = _tensors(state.disc, False)
        fake = render(hyper_forward(hp, z), arch, coords)
        g_loss = nt.softplus(-disc_forward(dp_frozen, emb, fake)).mean()
        _finite(g_loss.item(), step, "generator loss")
        h_grads = nt.grad(g_loss, [hp[k] for k in HYPER_KEYS])
        for k, g in zip(HYPER_KEYS, h_grads):
            state.hyper[k] = adam_step(state.hyper[k], g.data, state.hyper_opt[k])
    except FloatingPointError as exc:
        raise TrainingAborted(step, str(exc)) from exc

    state.step = step
    return {
        "step": step,
        "d_loss": d_loss.item(),
        "d_real": d_real.item(),
        "d_fake": d_fake.item(),
        "r1": r1.item(),
        "g_loss": g_loss.item(),
    }


def train_gasp(
    images: np.ndarray,
    cfg: GaspConfig,
    seed: int,
    arch: InrArch | None = None,
    state: GaspState | None = None,
    on_step: Callable[[dict], None] | None = None,
    checkpoint_every: int = 0,
    on_checkpoint: Callable[[GaspState], None] | None = None,
) -> tuple:
    """Run ``cfg.steps`` updates over shuffled batches of ``images`` (N×H×W×C).

    Returns ``(state, log_rows)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("dataset must be a non-empty N×H×W×C array")
    n, h, w, c = images.shape
    if images.min() < 0 or images.max() > 1:
        raise ValueError("dataset pixels must lie in [0, 1]")
    if state is None:
        arch = arch or InrArch(channels=c)
        if arch.channels != c:
            raise ValueError("architecture channels differ from the dataset")
        state = GaspState.create(arch, cfg, seed)
    grid: CoordGrid = make_grid(h, w)
    clouds = images.reshape(n, h * w, c)
    batch = min(cfg.batch, n)
    order: list = []
    rows = []
    for _ in range(cfg.steps):
        if len(order) < batch:
            order = list(state.rng.permutation(n))
        idx, order = order[:batch], order[batch:]
        coords, real = grid.coords, clouds[idx]
        if cfg.points is not None and cfg.points < h * w:
            pick = np.sort(state.rng.permutation(h * w)[:cfg.points])
            coords, real = coords[pick], real[:, pick]
        row = gasp_train_step(state, real, coords)
        rows.append(row)
        if on_step:
            on_step(row)
        if checkpoint_every and on_checkpoint and state.step % checkpoint_every == 0:
            on_checkpoint(state)
    return state, rows


def two_blob_images(n: int, size: int = 16, seed: int = 0, channels: int = 3) -> np.ndarray:
    """Synthetic dataset: two soft coloured discs on a dark background."""
    rng = Rng(seed)
    grid = make_grid(size, size).coords.reshape(size, size, 2)
    out = np.empty((n, size, size, channels))
    for i in range(n):
        img = np.full((size, size, channels), 0.1) + rng.uniform((channels,), 0.0, 0.1)
        for _ in range(2):
            centre = rng.uniform((2,), -0.6, 0.6)
            radius = rng.uniform((), 0.2, 0.45)
            colour = rng.uniform((channels,), 0.4, 1.0)
            d2 = np.sum((grid - centre) ** 2, axis=-1)
            mask = np.exp(-d2 / (2 * radius ** 2))[..., None]
            img = img * (1 - mask) + colour * mask
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def with_steps(cfg: GaspConfig, steps: int) -> GaspConfig:
    return replace(cfg, steps=steps)
