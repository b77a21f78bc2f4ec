"""Dense float64 tensors with reverse-mode differentiation.

Every op records a node holding its parents and a backward closure. The
backward closures are written in terms of Tensor ops themselves, so running
them with graph recording switched on (``create_graph=True``) yields
differentiable gradients. The R1 penalty of the set discriminator relies on
this. ``conv2d`` is the one exception: its backward is first-order only.

Only scalar broadcasting is implicit. Bias-style expansion is spelled out
with :meth:`Tensor.broadcast_to`, and ``matmul`` batches over a leading axis.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- inspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def square(self):
        return square(self)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # one reduction pass; an overflowing finite sum is treated as an error too
    if arr.size and not math.isfinite(float(np.add.reduce(arr, axis=None))):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str,
          check: bool = True) -> Tensor:
    # pure shape ops pass check=False: their inputs were already checked
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward)
    return out


def _scalar_compatible(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    return tsum(g).reshape(shape)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _scalar_compatible(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _scalar_compatible(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(scale(g, -1.0), b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _scalar_compatible(a, b)

    def backward(g):
        ga = _reduce_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _reduce_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)

    def backward(g):
        return (scale(g, c),)

    return _make(a.data * c, (a,), backward, "scale")


def square(a: Tensor) -> Tensor:
    def backward(g):
        return (mul(g, scale(a, 2.0)),)

    return _make(a.data * a.data, (a,), backward, "square")


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape

    def backward(g):
        return (reshape(g, orig),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape", check=False)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ValueError("transpose needs at least 2 dims")

    def backward(g):
        return (transpose(g),)

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward, "transpose", check=False)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    lead = len(shape) - len(orig)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(orig) if d == 1 and shape[i + lead] != 1
    )

    def backward(g):
        r = tsum(g, axis=axes, keepdims=True) if axes else g
        return (reshape(r, orig),)

    # read-only view; no op writes into tensor data in place
    return _make(np.broadcast_to(a.data, shape), (a,), backward, "broadcast_to", check=False)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            gk = reshape(g, (1,) * len(shape))
        elif keepdims:
            gk = g
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            kshape = tuple(1 if i in axes else d for i, d in enumerate(shape))
            gk = reshape(g, kshape)
        return (broadcast_to(gk, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    s = tsum(a, axis=axis, keepdims=keepdims)
    count = a.size // max(s.size, 1) if a.size else 1
    return scale(s, 1.0 / count)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    shape = a.shape

    def backward(g):
        return (_place(g, index, shape),)

    return _make(a.data[index].copy(), (a,), backward, "take", check=False)


def _place(g: Tensor, index, shape) -> Tensor:
    out = np.zeros(shape, dtype=DTYPE)
    out[index] = g.data

    def backward(gg):
        return (take(gg, index),)

    return _make(out, (g,), backward, "place")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = (slice(None),) * ax + (slice(int(lo), int(hi)),)
            grads.append(take(g, idx))
        return tuple(grads)

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, tuple(tensors), backward, "concat")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; either operand may carry one leading batch axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ValueError("matmul expects 2-D or batched 3-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"batch dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = matmul(g, transpose(b))
            if a.ndim == 2 and ga.ndim == 3:
                ga = tsum(ga, axis=0)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim == 3:
                # fold the batch into the contraction: one 2-D product
                k, n = b.shape
                gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, n)))
            else:
                gb = matmul(transpose(a), g)
                if b.ndim == 2 and gb.ndim == 3:
                    gb = tsum(gb, axis=0)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# -- nonlinearities --------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(DTYPE))

    def backward(g):
        return (mul(g, mask),)

    return _make(np.maximum(a.data, 0.0), (a,), backward, "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def backward(g):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _make(_sigmoid_np(a.data), (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.data

    def backward(g):
        return (mul(g, sigmoid(a)),)

    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, (a,), backward, "softplus")


def sin(a: Tensor) -> Tensor:
    def backward(g):
        return (mul(g, cos(a)),)

    return _make(np.sin(a.data), (a,), backward, "sin")


def cos(a: Tensor) -> Tensor:
    def backward(g):
        return (mul(g, scale(sin(a), -1.0)),)

    return _make(np.cos(a.data), (a,), backward, "cos")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient flows only strictly inside the bounds."""
    if lo > hi:
        raise ValueError("clamp needs lo <= hi")
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(DTYPE))

    def backward(g):
        return (mul(g, mask),)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clamp")


def pointwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name."""
    table = {
        "relu": relu,
        "sigmoid": sigmoid,
        "sin": sin,
        "cos": cos,
        "add": add,
        "sub": sub,
        "mul": mul,
        "scale": scale,
        "clamp": clamp,
        "square": square,
        "softplus": softplus,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown pointwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- losses ----------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits.

    Uses max(l, 0) - l*t + log1p(exp(-|l|)), which never overflows.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be binary")
    x = logits.data
    n = x.size
    tt = Tensor(t)

    def backward(g):
        return (mul(broadcast_to(g, logits.shape), scale(sub(sigmoid(logits), tt), 1.0 / n)),)

    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make(np.asarray(per.mean()), (logits,), backward, "bce_with_logits")


# -- convolution -----------------------------------------------------------

def _conv_np(x: np.ndarray, w: np.ndarray, dtype=DTYPE) -> np.ndarray:
    """Same-padded stride-1 correlation, x: H×W×Cin, w: K×K×Cin×Cout.

    ``dtype`` is the arithmetic precision; the result is always float64.
    """
    k = w.shape[0]
    p = k // 2
    h, wd, cin = x.shape
    xp = np.zeros((h + 2 * p, wd + 2 * p, cin), dtype=dtype)
    xp[p:p + h, p:p + wd] = x
    # im2col: one (H·W)×(K·K·Cin) matrix, one matmul
    cols = sliding_window_view(xp, (k, k), axis=(0, 1)).transpose(0, 1, 3, 4, 2)
    cols = cols.reshape(h * wd, k * k * cin)
    out = cols @ w.reshape(k * k * cin, -1).astype(dtype, copy=False)
    return out.reshape(h, wd, -1).astype(DTYPE, copy=False)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    h, wd, cin = x.shape
    cout = g.shape[2]
    xp = np.zeros((h + 2 * p, wd + 2 * p, cin), dtype=DTYPE)
    xp[p:p + h, p:p + wd] = x
    g2 = g.reshape(h * wd, cout)
    gw = np.empty((k, k, cin, cout), dtype=DTYPE)
    for di in range(k):
        for dj in range(k):
            patch = xp[di:di + h, dj:dj + wd].reshape(h * wd, cin)
            gw[di, dj] = patch.T @ g2
    return gw


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           single: bool = False) -> Tensor:
    """2-D convolution (cross-correlation), stride 1, zero "same" padding.

    ``x`` is H×W×Cin and ``kernel`` is K×K×Cin×Cout with K odd. With
    ``single=True`` the products (forward and input gradient) are computed
    in float32, roughly 4x faster; values are still returned as float64.
    """
    cdt = np.float32 if single else DTYPE
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError("conv2d expects H×W×Cin input and K×K×Cin×Cout kernel")
    k = kernel.shape[0]
    if kernel.shape[1] != k or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kernel.shape[:2]}")
    if kernel.shape[2] != x.shape[2]:
        raise ValueError(f"channel mismatch: input {x.shape[2]} vs kernel {kernel.shape[2]}")
    cout = kernel.shape[3]
    if bias is None:
        bias = Tensor(np.zeros(cout))
    bias = as_tensor(bias)
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},)")

    def backward(g):
        if _grad_enabled:
            raise NotImplementedError("conv2d supports first-order gradients only")
        gd = g.data
        gx = gk = gb = None
        if x.requires_grad:
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)
            gx = Tensor(_conv_np(gd, np.ascontiguousarray(flipped), cdt))
        if kernel.requires_grad:
            gk = Tensor(_conv_weight_grad(x.data, gd, k))
        if bias.requires_grad:
            gb = Tensor(gd.sum(axis=(0, 1)))
        return gx, gk, gb

    out = _conv_np(x.data, kernel.data, cdt) + bias.data
    return _make(out, (x, kernel, bias), backward, "conv2d")


# -- tape and backward -----------------------------------------------------

class Tape:
    """Topologically ordered op records reachable from an output tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _toposort(output)

    @property
    def records(self) -> list:
        ids = {id(t): i for i, t in enumerate(self.nodes)}
        recs = []
        for t in self.nodes:
            if t.node is not None:
                recs.append((t.node.op, [ids.get(id(p)) for p in t.node.parents], ids[id(t)]))
        return recs

    def leaves(self) -> list:
        return [t for t in self.nodes if t.node is None and t.requires_grad]

    def backward(self, create_graph: bool = False) -> dict:
        return backward(self.output, create_graph=create_graph, _order=self.nodes)


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _run_backward(output: Tensor, seed: Tensor, create_graph: bool,
                  order=None, stop: set | None = None) -> dict:
    if order is None:
        order = _toposort(output)
    stop = stop or set()
    grads: dict = {id(output): seed}
    reached: dict = {}
    with _grad_mode(create_graph):
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None or id(t) in stop:
                reached[id(t)] = (t, g)
                continue
            pgrads = t.node.backward(g)
            for p, pg in zip(t.node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return reached


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False) -> list:
    """Gradients of ``output`` with respect to ``inputs`` (None if unreachable).

    Inputs may be intermediate tensors as well as leaves; nothing is written
    to ``.grad``.
    """
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad of a non-scalar output needs grad_output")
        grad_output = Tensor(np.ones(output.shape))
    if not output.requires_grad:
        return [None for _ in inputs]
    stop = {id(t) for t in inputs}
    reached = _run_backward(output, as_tensor(grad_output), create_graph, stop=stop)
    out = []
    for t in inputs:
        hit = reached.get(id(t))
        out.append(None if hit is None else hit[1])
    return out


def backward(loss: Tensor, create_graph: bool = False, _order=None) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Returns a mapping leaf -> gradient array (identity-keyed).
    """
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return {}
    reached = _run_backward(loss, Tensor(np.ones(loss.shape)), create_graph, _order)
    result = {}
    for t, g in reached.values():
        gd = g.data.reshape(t.shape)
        t.grad = gd.copy() if t.grad is None else t.grad + gd
        result[t] = gd
    return result


# -- gradient checking -----------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
               exclude: np.ndarray | None = None, kink_tol: float = 1e-3) -> float:
    """Max relative error between backward and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    Coordinates in the boolean mask ``exclude`` are skipped, and so is any
    coordinate where the two one-sided slopes disagree by more than
    ``kink_tol`` (a clamp boundary or ReLU kink inside the stencil).
    """
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar function")
    f0 = float(y.data)
    if not math.isfinite(f0):
        raise NonFiniteError("f(x) is not finite")
    (g,) = grad(y, [xt])
    analytic = np.zeros(x0.size) if g is None else g.data.reshape(-1)
    flat = x0.reshape(-1)
    skip = np.zeros(flat.size, dtype=bool) if exclude is None else np.asarray(exclude, bool).reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            if skip[i]:
                continue
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x0)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x0)).data)
            flat[i] = orig
            right, left = (fp - f0) / h, (f0 - fm) / h
            if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                continue
            num = (fp - fm) / (2 * h)
            a = analytic[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


# -- random numbers --------------------------------------------------------

class Rng:
    """Seeded counter-based generator (Philox 4x64).

    Uniform draws are exact affine maps of 53 random bits, hence bit-identical
    on every IEEE-754 platform.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def bits(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=n, dtype=np.uint8)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = self._gen.integers(0, 1 << 53, size=shape, dtype=np.uint64)
        return lo + (hi - lo) * (u.astype(DTYPE) * (1.0 / (1 << 53)))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def integers(self, n: int, size=None) -> np.ndarray:
        return self._gen.integers(0, n, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn_seed(self) -> int:
        return int(self._gen.integers(0, 1 << 63))


def parameters_to_vector(params: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in params])
