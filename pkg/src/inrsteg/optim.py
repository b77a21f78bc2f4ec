"""Adam and projected L-BFGS on flat numpy parameter arrays."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update. Returns the new parameter array;
    ``state`` is updated in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LbfgsState:
    max_iter: int = 10
    alpha: float = 0.1
    pair_alpha: float | None = None  # initial step once curvature pairs exist; None = alpha
    history: int = 10
    c1: float = 1e-4
    max_backtracks: int = 20
    curvature_eps: float = 1e-10
    pairs: deque = field(default_factory=deque)


@dataclass
class LbfgsResult:
    x: np.ndarray
    loss: float
    iterations: int
    evaluations: int
    line_search_failed: bool = False
    losses: list = field(default_factory=list)


def _two_loop(g: np.ndarray, pairs) -> np.ndarray:
    """Apply the inverse-Hessian approximation to ``g``."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def _free_direction(x: np.ndarray, d: np.ndarray, project) -> np.ndarray:
    """Zero the components of ``d`` that the projection pins at ``x``."""
    blocked = (project(x + d) == x) & (d != 0)
    if np.any(blocked):
        d = d.copy()
        d[blocked] = 0.0
    return d


def lbfgs_minimize(
    f: Callable[[np.ndarray], tuple],
    x0: np.ndarray,
    state: LbfgsState | None = None,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> LbfgsResult:
    """Projected L-BFGS with Armijo backtracking.

    ``f`` maps a flat array to ``(loss, grad)``. At most ``state.max_iter``
    iterations run. Each line search starts at ``alpha``; while no curvature
    pair is stored the direction is the raw negative gradient and the trial
    step is further scaled by ``min(1, 1/|g|_1)``. Trial steps are halved
    until the Armijo condition holds on the projected point. Direction
    components that would push a variable further past an active bound are
    dropped. The best iterate seen is returned.
    """
    state = state or LbfgsState()
    project = project or (lambda v: v)
    pairs = state.pairs
    while len(pairs) > state.history:
        pairs.popleft()

    x = project(np.array(x0, dtype=np.float64))
    fx, g = f(x)
    evals = 1
    if not math.isfinite(fx) or not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite loss or gradient at the starting point")
    best_x, best_f = x.copy(), fx
    losses = [fx]
    failed = False
    it = 0
    for it in range(1, state.max_iter + 1):
        if not np.any(g):
            it -= 1
            break
        d = _free_direction(x, -_two_loop(g, pairs), project)
        if np.dot(g, d) >= 0:
            pairs.clear()
            d = _free_direction(x, -g, project)
            if not np.any(d):
                it -= 1
                break
        # without curvature pairs the direction is the raw gradient; bound its length
        if pairs:
            step = state.alpha if state.pair_alpha is None else state.pair_alpha
        else:
            step = state.alpha * min(1.0, 1.0 / np.sum(np.abs(g)))
        accepted = stalled = False
        for _ in range(state.max_backtracks):
            x_new = project(x + step * d)
            moved = x_new - x
            if not np.any(moved):
                stalled = True
                break
            f_new, g_new = f(x_new)
            evals += 1
            if math.isfinite(f_new) and np.all(np.isfinite(g_new)) \
                    and f_new <= fx + state.c1 * np.dot(g, moved):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            failed = not stalled
            it -= 1
            break
        y = g_new - g
        sy = np.dot(moved, y)
        if sy > state.curvature_eps:
            pairs.append((moved, y, 1.0 / sy))
            if len(pairs) > state.history:
                pairs.popleft()
        x, fx, g = x_new, f_new, g_new
        losses.append(fx)
        if fx < best_f:
            best_x, best_f = x.copy(), fx
    return LbfgsResult(best_x, best_f, it, evals, failed, losses)
