"""Coordinate MLPs as continuous images.

A function rep is a flat weight vector for the MLP
``embed(x) -> 128 -> 128 -> 128 -> C`` with ReLU hidden layers and a sigmoid
output, where ``embed`` is a frozen random Fourier feature map. Images are
plain ``H×W×C`` float arrays in [0, 1].
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import Rng, Tensor
from .optim import AdamState, adam_step


@dataclass(frozen=True)
class CoordGrid:
    height: int
    width: int
    coords: np.ndarray  # (H*W, 2), row-major, (row, col) in [-1, 1]


def _axis(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def make_grid(height: int, width: int) -> CoordGrid:
    if height < 1 or width < 1:
        raise ValueError(f"grid dims must be >= 1, got {height}x{width}")
    rows, cols = np.meshgrid(_axis(height), _axis(width), indexing="ij")
    coords = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
    return CoordGrid(height, width, coords)


class FourierEmbedding:
    """x -> [sin(2π B x), cos(2π B x)] with B ~ N(0, sigma²) fixed by seed."""

    def __init__(self, n_freq: int = 64, sigma: float = 3.0, seed: int = 0):
        self.n_freq = n_freq
        self.sigma = sigma
        self.seed = seed
        self.B = Rng(seed).normal((n_freq, 2), std=sigma)
        self.B.setflags(write=False)

    @property
    def dim(self) -> int:
        return 2 * self.n_freq

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        proj = 2.0 * math.pi * (np.asarray(coords, dtype=np.float64) @ self.B.T)
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


@functools.lru_cache(maxsize=16)
def _embedding(n_freq: int, sigma: float, seed: int) -> FourierEmbedding:
    return FourierEmbedding(n_freq, sigma, seed)


@dataclass(frozen=True)
class InrArch:
    n_freq: int = 64
    sigma: float = 3.0
    hidden: int = 128
    n_hidden: int = 3
    channels: int = 3
    embed_seed: int = 0

    @property
    def embedding(self) -> FourierEmbedding:
        return _embedding(self.n_freq, self.sigma, self.embed_seed)

    @property
    def layer_shapes(self) -> list:
        dims = [2 * self.n_freq] + [self.hidden] * self.n_hidden + [self.channels]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes)

    def fan_ins(self) -> np.ndarray:
        """Fan-in of the layer each entry of theta belongs to."""
        return np.concatenate([np.full(fi * fo + fo, fi) for fi, fo in self.layer_shapes])


@dataclass(frozen=True)
class FunctionRep:
    theta: np.ndarray
    arch: InrArch = InrArch()

    def __post_init__(self):
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError(
                f"theta has {self.theta.size} entries, architecture needs {self.arch.n_params}"
            )


def init_theta(arch: InrArch, seed: int) -> np.ndarray:
    """He-uniform weights, zero biases."""
    rng = Rng(seed)
    parts = []
    for fi, fo in arch.layer_shapes:
        bound = math.sqrt(6.0 / fi)
        parts.append(rng.uniform((fi * fo,), -bound, bound))
        parts.append(np.zeros(fo))
    return np.concatenate(parts)


def render(theta: Tensor, arch: InrArch, coords: np.ndarray) -> Tensor:
    """Evaluate a batch of function reps at shared coordinates.

    ``theta`` is (B, P); the result is (B, n, C).
    """
    if theta.ndim != 2 or theta.shape[1] != arch.n_params:
        raise ValueError(f"theta must be (B, {arch.n_params}), got {theta.shape}")
    batch = theta.shape[0]
    n = len(coords)
    h = Tensor(arch.embedding(coords))
    off = 0
    shapes = arch.layer_shapes
    for i, (fi, fo) in enumerate(shapes):
        w = theta[:, off:off + fi * fo].reshape(batch, fi, fo)
        off += fi * fo
        b = theta[:, off:off + fo].reshape(batch, 1, fo)
        off += fo
        h = nt.matmul(h, w) + b.broadcast_to((batch, n, fo))
        h = nt.relu(h) if i < len(shapes) - 1 else nt.sigmoid(h)
    return h


def eval_function(rep: FunctionRep, grid: CoordGrid, chunk: int = 1 << 15) -> np.ndarray:
    """Render ``rep`` on ``grid`` as an H×W×C image."""
    if len(grid.coords) == 0:
        raise ValueError("empty grid")
    out = np.empty((len(grid.coords), rep.arch.channels))
    theta = Tensor(rep.theta.reshape(1, -1))
    with nt.no_grad():
        for lo in range(0, len(grid.coords), chunk):
            hi = lo + chunk
            out[lo:hi] = render(theta, rep.arch, grid.coords[lo:hi]).data[0]
    return out.reshape(grid.height, grid.width, rep.arch.channels)


def image_to_cloud(image: np.ndarray) -> tuple:
    """Coordinate-feature pairs of an H×W×C image."""
    h, w, c = image.shape
    return make_grid(h, w).coords, image.reshape(h * w, c)


def quantize(image: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 by rounding to the nearest level."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = image.shape
    if h % factor or w % factor:
        raise ValueError("image dims must be divisible by the factor")
    return image.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


@dataclass
class FitResult:
    rep: FunctionRep
    losses: list
    best_loss: float


def fit_inr(
    target: np.ndarray,
    steps: int = 2000,
    lr: float = 1e-3,
    arch: InrArch | None = None,
    seed: int = 0,
    beta1: float = 0.9,
) -> FitResult:
    """Fit a function rep to one image by Adam on the per-pixel MSE."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 3 or target.min() < 0 or target.max() > 1:
        raise ValueError("target must be an H×W×C image in [0, 1]")
    arch = arch or InrArch(channels=target.shape[2])
    if arch.channels != target.shape[2]:
        raise ValueError("architecture channel count differs from the target")
    coords, feats = image_to_cloud(target)
    y = Tensor(feats[None])
    theta = init_theta(arch, seed)
    state = AdamState(lr=lr, beta1=beta1)
    best_theta, best = theta.copy(), math.inf
    losses = []
    for _ in range(steps):
        th = Tensor(theta[None], requires_grad=True)
        loss = (render(th, arch, coords) - y).square().mean()
        val = loss.item()
        if not math.isfinite(val):
            raise FloatingPointError("non-finite fit loss")
        if val < best:
            best, best_theta = val, theta.copy()
        losses.append(val)
        (g,) = nt.grad(loss, [th])
        theta = adam_step(theta, g.data[0], state)
    # the final update has not been scored yet
    with nt.no_grad():
        last = (render(Tensor(theta[None]), arch, coords) - y).square().mean().item()
    if last < best:
        best, best_theta = last, theta
    return FitResult(FunctionRep(best_theta, arch), losses, best)
