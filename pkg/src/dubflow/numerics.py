"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on a tape (:class:`Graph`) as they execute. Calling
:func:`backward` walks the tape once in reverse and then resets it, so a second
``backward`` on the same loss raises :class:`GraphConsumed`.

The primitive set is deliberately small: just what a transformer-style vector
field network needs.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import GraphConsumed, NonFinite, NotScalar, ShapeMismatch

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
MASK_VALUE = -1e30

_debug = os.environ.get("DUBFLOW_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle finite-value gates on every primitive's inputs."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def release(self) -> None:
        """Drop references to inputs and cached arrays so memory frees without the cycle collector."""
        self.output._node = None
        self.inputs = ()
        self.backward = None


class Graph:
    """Execution-ordered record of primitive ops."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_graph = Graph()
_grad_enabled = True


def current_graph() -> Graph:
    return _graph


@contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_gen")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None
        self._gen = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(op: str, tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFinite(f"{op}: input contains NaN or Inf")


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, backward)
        out._node = node
        out._gen = _graph.generation
        _graph.record(node)
    return out


def _prep(op: str, *xs) -> tuple[Tensor, ...]:
    ts = tuple(as_tensor(x) for x in xs)
    if _debug:
        _check_finite(op, ts)
    return ts


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _prep("add", a, b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _prep("sub", a, b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _prep("mul", a, b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _prep("div", a, b)
    _broadcast_shape("div", a, b)
    return _emit(
        "div", (a, b), a.data / b.data,
        lambda g: (unbroadcast(g / b.data, a.shape),
                   unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def neg(a) -> Tensor:
    (a,) = _prep("neg", a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    (a,) = _prep("exp", a)
    y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a) -> Tensor:
    (a,) = _prep("log", a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def square(a) -> Tensor:
    (a,) = _prep("square", a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    (a,) = _prep("gelu", a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", (a,), y, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = _prep("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else unbroadcast(ga, a.shape),
            None if gb is None else unbroadcast(gb, b.shape),
        )

    return _emit("matmul", (a, b), y, backward)


def softmax(a, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``bias`` is a constant added to the logits first
    (use ``MASK_VALUE`` entries to exclude positions)."""
    (a,) = _prep("softmax", a)
    z = a.data if bias is None else a.data + bias
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z, out=z)
    e /= e.sum(axis=axis, keepdims=True)
    y = e

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _emit("softmax", (a,), y, backward)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    (a,) = _prep("layer_norm", a)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)

    return _emit("layer_norm", (a,), xhat, backward)


# ---------------------------------------------------------------- structure


def embedding(table, ids) -> Tensor:
    (table,) = _prep("embedding", table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding: ids out of range for {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("embedding", (table,), table.data[idx], backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = _prep("concat", *tensors)
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in ts]} along {axis}") from exc
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, y, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = _prep("stack", *tensors)
    if len({t.shape for t in ts}) > 1:
        raise ShapeMismatch(f"stack: shapes differ {[t.shape for t in ts]}")
    y = np.stack([t.data for t in ts], axis=axis)
    return _emit("stack", ts, y,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def reshape(a, shape: Sequence[int]) -> Tensor:
    (a,) = _prep("reshape", a)
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    return _emit("reshape", (a,), y, lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    (a,) = _prep("transpose", a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def getitem(a, idx) -> Tensor:
    (a,) = _prep("getitem", a)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("getitem", (a,), a.data[idx], backward)


def pad_rows(a, length: int) -> Tensor:
    """Zero-pad a 2-D tensor along axis 0 to ``length`` rows."""
    a = as_tensor(a)
    extra = length - a.shape[0]
    if extra < 0:
        raise ShapeMismatch(f"pad_rows: {a.shape[0]} rows > {length}")
    if extra == 0:
        return a
    return concat([a, Tensor(np.zeros((extra,) + a.shape[1:]))], axis=0)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    (a,) = _prep("sum", a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), y, backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mse(pred, target, mask=None) -> Tensor:
    """Squared error summed over the last axis, averaged over the remaining positions.

    ``mask`` (shape ``pred.shape[:-1]``) weights the positions; masked-out
    positions receive exactly zero gradient.
    """
    pred, target = _prep("mse", pred, target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
    if mask is None:
        w = np.ones(pred.shape[:-1])
    else:
        w = np.asarray(mask, dtype=DTYPE)
        if w.shape != pred.shape[:-1]:
            raise ShapeMismatch(f"mse: mask {w.shape} vs positions {pred.shape[:-1]}")
    denom = w.sum()
    d = pred.data - target.data
    y = np.array((w * (d * d).sum(axis=-1)).sum() / denom)

    def backward(g):
        gd = g * 2.0 * d * (w / denom)[..., None]
        return gd, -gd

    return _emit("mse", (pred, target), y, backward)


# ---------------------------------------------------------------- backward


@dataclass
class BackwardReport:
    disconnected: list[str] = field(default_factory=list)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> BackwardReport:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    When ``params`` is given, any of them not reached from ``loss`` gets a zero
    gradient and is listed in the report's ``disconnected``.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    report = BackwardReport()
    reached: set[int] = set()

    if loss._gen >= 0 and loss._gen != _graph.generation:
        raise GraphConsumed("graph already consumed by a previous backward(); rebuild the loss")
    if loss.requires_grad and loss._node is not None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_graph.nodes):
            g = grads.pop(id(node.output), None)
            if g is not None:
                for inp, gi in zip(node.inputs, node.backward(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    if inp._node is None:
                        inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                        reached.add(id(inp))
                    else:
                        key = id(inp)
                        grads[key] = grads[key] + gi if key in grads else gi
            node.release()
        _graph.reset()
    elif loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        reached.add(id(loss))

    for i, p in enumerate(params or ()):
        if id(p) not in reached:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            report.disconnected.append(p.name or f"param[{i}]")
    return report


# ---------------------------------------------------------------- modules


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, val in vars(self).items():
            out.extend(_collect(val, prefix + key))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))


def _collect(val, name: str) -> list[tuple[str, Tensor]]:
    if isinstance(val, Tensor):
        return [(name, val)] if val.requires_grad else []
    if isinstance(val, Module):
        return val.named_parameters(name + ".")
    if isinstance(val, (list, tuple)):
        out = []
        for i, v in enumerate(val):
            out.extend(_collect(v, f"{name}.{i}"))
        return out
    return []


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 scale: float = 1.0):
        self.weight = parameter(rng.normal(0.0, scale / math.sqrt(n_in), (n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        # Stacked inputs go through one BLAS call per leading index, so a row's
        # result never depends on how many other items share the batch.
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    rtol: float
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-6,
    max_coords: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` must rebuild the loss from scratch on every call and be deterministic.
    With ``max_coords`` set, only that many randomly chosen coordinates per
    parameter are probed. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, n_checked=0, rtol=rtol)

    with no_grad():
        for i, p in enumerate(params):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
                flat[c] = orig
                num = (fp - fm) / (2.0 * h)
                ana = analytic[i].reshape(-1)[c]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                report.n_checked += 1
                report.max_rel_err = max(report.max_rel_err, err)
                if err > rtol:
                    idx = tuple(int(k) for k in np.unravel_index(c, p.shape))
                    report.failures.append((p.name or f"param[{i}]", idx, float(ana), float(num)))
    for p in params:
        p.grad = None
    return report


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeMismatch(f"adam_step: param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
