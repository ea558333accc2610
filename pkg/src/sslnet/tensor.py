"""Small reverse-mode differentiation engine on top of numpy.

Every op takes and returns :class:`Tensor` objects. A tensor produced from
at least one ``requires_grad`` input remembers its parents and a backward
rule; :func:`backward` walks that graph in reverse topological order. The
graph built during a forward pass is the computation tape.

Binary elementwise ops never broadcast: operands must have identical shapes.
The only ops that expand a smaller operand are :func:`linear` (bias row) and
:func:`conv2d` (bias per output channel), where the expansion is part of the
op's definition.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, LabelError, ParameterError, UsageError

LOG_FLOOR = 1e-10


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(values)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``x`` (N, in), ``weight`` (in, out), ``bias`` (out,)."""
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    xv, wv = x.values, weight.values

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _result(xv @ wv + bias.values, (x, weight, bias), back, "linear")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.values * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _result(np.maximum(a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    x = a.values
    clipped = np.maximum(x, floor)
    live = x > floor
    return _result(np.log(clipped), (a,), lambda g: (np.where(live, g / clipped, 0.0),), "log")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def elementwise(op: str, *tensors: Tensor) -> Tensor:
    """Dispatch by name: add, mul, sigmoid, relu, log, exp."""
    binary = {"add": add, "mul": mul}
    unary = {"sigmoid": sigmoid, "relu": relu, "log": log, "exp": exp}
    if op in binary:
        if len(tensors) != 2:
            raise UsageError(f"{op} takes two tensors, got {len(tensors)}")
        return binary[op](*tensors)
    if op in unary:
        if len(tensors) != 1:
            raise UsageError(f"{op} takes one tensor, got {len(tensors)}")
        return unary[op](tensors[0])
    raise UsageError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- shape ops

def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis, ``a`` first."""
    if a.values.ndim != b.values.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading extents of {a.shape} and {b.shape} differ")
    split = a.shape[-1]
    return _result(
        np.concatenate([a.values, b.values], axis=-1),
        (a, b),
        lambda g: (g[..., :split], g[..., split:]),
        "concat",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def repeat_last(a: Tensor, times: int) -> Tensor:
    """Repeat each entry of the last axis ``times`` times in place ([a, b] -> [a, a, b, b])."""
    old = a.shape

    def back(g):
        return (g.reshape(*old, times).sum(axis=-1),)

    return _result(np.repeat(a.values, times, axis=-1), (a,), back, "repeat")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor, axis: int | tuple[int, ...]) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.values.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return _result(a.values.mean(axis=axes), (a,), back, "mean")


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 ("same" output size).

    Channels-last: ``x`` is (N, H, W, C), ``weight`` (O, C, 3, 3), ``bias`` (O,),
    output (N, H, W, O).
    """
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, h, w, c = x.shape
    o, kc, kh, kw = weight.shape
    if kc != c or (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d: kernel {weight.shape} does not fit input {x.shape}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not fit kernel {weight.shape}")

    xp = np.pad(x.values, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # im2col: rows (n, h, w), columns (c, ki, kj); reused for the weight gradient
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * w, c * 9)
    wmat = weight.values.reshape(o, c * 9)
    out = (cols @ wmat.T + bias.values).reshape(n, h, w, o)
    need_x = x.requires_grad

    def back(g):
        gmat = g.reshape(n * h * w, o)
        gw = (gmat.T @ cols).reshape(o, c, 3, 3)
        gb = gmat.sum(axis=0)
        if not need_x:
            return None, gw, gb
        gcols = (gmat @ wmat).reshape(n, h, w, c, 3, 3)
        gxp = np.zeros((n, h + 2, w + 2, c))
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + h, j:j + w, :] += gcols[..., i, j]
        return gxp[:, 1:-1, 1:-1, :], gw, gb

    return _result(out, (x, weight, bias), back, "conv2d")


def avg_pool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling over (N, H, W, C); H and W must be even."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2d: spatial extents {(h, w)} must be even")
    v = x.values
    out = (v[:, 0::2, 0::2] + v[:, 1::2, 0::2] + v[:, 0::2, 1::2] + v[:, 1::2, 1::2]) * 0.25

    def back(g):
        gx = np.empty((n, h, w, c))
        q = g * 0.25
        gx[:, 0::2, 0::2] = q
        gx[:, 1::2, 0::2] = q
        gx[:, 0::2, 1::2] = q
        gx[:, 1::2, 1::2] = q
        return (gx,)

    return _result(out, (x,), back, "avg_pool2d")


# ---------------------------------------------------------------- probability

def _softmax_values(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    ndim = logits.values.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {logits.shape}")
    y = _softmax_values(logits.values, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (logits,), back, "softmax")


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax(
    logits: Tensor,
    tau: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Relaxed categorical sample along the last axis: softmax((logits + g) / tau).

    ``noise`` pins g explicitly. Without ``noise`` and ``rng`` the noise is zero,
    which is what evaluation uses.
    """
    if not tau > 0:
        raise ParameterError(f"gumbel_softmax: temperature must be positive, got {tau}")
    if noise is None:
        noise = gumbel_noise(logits.shape, rng) if rng is not None else np.zeros(logits.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != logits.shape:
        raise DimensionError(f"gumbel_softmax: noise {noise.shape} does not match logits {logits.shape}")
    return softmax(scale(add(logits, Tensor(noise)), 1.0 / tau), axis=-1)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.values.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (batch, C), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        row = int(bad[0])
        raise LabelError(f"cross_entropy: label {labels[row]} in row {row} outside [0, {c})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))

    def back(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _result(np.asarray(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------- backward

def topological_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf tensor.

    Gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.size != 1:
        raise UsageError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.values)}
    for node in reversed(topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[[Tensor], Tensor], point: Tensor | np.ndarray, eps: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        up = x0.copy().reshape(-1)
        down = up.copy()
        up[i] += eps
        down[i] -= eps
        f_up = float(f(Tensor(up.reshape(x0.shape))).values)
        f_down = float(f(Tensor(down.reshape(x0.shape))).values)
        flat[i] = (f_up - f_down) / (2 * eps)
    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-4) -> dict[str, float]:
    """Finite-difference check of every parameter of a closure-defined scalar loss.

    ``loss_fn`` must read the current ``values`` of ``params`` on each call.
    Returns the max relative error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.values)
        flat_v = p.values.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_v.size):
            saved = flat_v[i]
            flat_v[i] = saved + eps
            f_up = float(loss_fn().values)
            flat_v[i] = saved - eps
            f_down = float(loss_fn().values)
            flat_v[i] = saved
            flat_n[i] = (f_up - f_down) / (2 * eps)
        errors[name] = float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))) if p.size else 0.0
    return errors


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded source of independent, named numpy generators.

    ``stream(name)`` always restarts the same sequence for the same
    (seed, name) pair, so each purpose (init, gumbel, shuffle, ...) gets its own
    reproducible stream regardless of how the others are consumed.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, key])
        return np.random.Generator(np.random.Philox(seq))

    def child(self, name: str) -> "Rng":
        sub = self.stream(name).integers(0, 2**63, dtype=np.int64)
        return Rng(int(sub))


def count_params(params: dict[str, Tensor] | Iterable[Tensor]) -> int:
    """Total number of trainable scalars."""
    tensors = params.values() if isinstance(params, dict) else params
    return int(sum(t.size for t in tensors if t.requires_grad))
