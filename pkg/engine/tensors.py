"""Reverse-mode differentiation over float64 numpy arrays.

A Graph is a tape rebuilt on every forward pass. Each op appends one node
holding its output value and a closure mapping the output gradient to one
gradient per input. Node ids are append order, so the tape is already in
topological order and backward is a single reverse sweep.

Tensors are plain ``numpy.ndarray`` of float64. Values stored on the tape are
marked read-only; ops never write into their inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

import config

log = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], tuple]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_CORRUPTION_FACTOR = 1.5


class DimensionError(ValueError):
    """Operand shapes are incompatible with the op."""


class ContractError(ValueError):
    """An op or graph precondition does not hold."""


def as_array(value) -> np.ndarray:
    """Copy ``value`` into a fresh, read-only, C-contiguous float64 array."""
    arr = np.array(value, dtype=np.float64, order="C", copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(eq=False)
class Node:
    """One op record on the tape."""
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: BackwardFn | None = None


class Var:
    """Handle to a node of a Graph; the differentiable value type of the ops."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def op(self) -> str:
        return self.graph.nodes[self.id].op

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    def __radd__(self, other):
        return add(_lift(self.graph, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.graph, other))

    def __rsub__(self, other):
        return sub(_lift(self.graph, other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, op={self.op!r}, shape={self.shape})"


def _lift(graph: Graph, x) -> Var:
    if isinstance(x, Var):
        return x
    return graph.constant(x)


class Graph:
    """Define-by-run tape with named parameter leaves.

    ``bytes_allocated`` counts every array the forward pass stores (outputs and
    saved activations); nothing is released before backward, so it is also the
    peak of the arena.
    """

    def __init__(self, corrupt_ops: Iterable[str] = ()):
        self.nodes: list[Node] = []
        self.parameters: dict[str, int] = {}
        self.trainable: set[str] = set()
        self.corrupt_ops = frozenset(corrupt_ops)
        self.bytes_allocated = 0

    @property
    def peak_bytes(self) -> int:
        return self.bytes_allocated

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray,
               backward: BackwardFn | None = None, saved: Sequence[np.ndarray] = ()) -> Var:
        ids = []
        for v in inputs:
            if v.graph is not self:
                raise ContractError(f"{op}: operand belongs to a different graph")
            ids.append(v.id)
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        self.bytes_allocated += value.nbytes + sum(s.nbytes for s in saved)
        node = Node(id=len(self.nodes), op=op, inputs=tuple(ids), value=value, backward=backward)
        self.nodes.append(node)
        return Var(self, node.id)

    def constant(self, value) -> Var:
        return self.record("constant", (), as_array(value))

    def param(self, name: str, value, trainable: bool = True) -> Var:
        if name in self.parameters:
            raise ContractError(f"parameter {name!r} declared twice")
        var = self.record("param", (), as_array(value))
        self.parameters[name] = var.id
        if trainable:
            self.trainable.add(name)
        return var

    def bind(self, params: dict[str, np.ndarray],
             trainable: Callable[[str], bool] | None = None) -> dict[str, Var]:
        """Declare every entry of ``params`` as a leaf, in dict order."""
        return {
            name: self.param(name, value, trainable=True if trainable is None else trainable(name))
            for name, value in params.items()
        }

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Reverse-mode sweep from a scalar loss; returns a gradient per trainable leaf.

        Accumulation order is fixed by node ids, so results are bit-reproducible.
        Trainable leaves the loss does not depend on get zero gradients.
        """
        if loss.graph is not self:
            raise ContractError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: list[np.ndarray | None] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads[node.id]
            if g is None or node.backward is None:
                continue
            input_grads = node.backward(g)
            if node.op in self.corrupt_ops:
                input_grads = tuple(None if ig is None else ig * _CORRUPTION_FACTOR for ig in input_grads)
            for i, ig in zip(node.inputs, input_grads):
                if ig is None:
                    continue
                grads[i] = ig if grads[i] is None else grads[i] + ig

        out: dict[str, np.ndarray] = {}
        for name, node_id in self.parameters.items():
            if name not in self.trainable:
                continue
            shape = self.nodes[node_id].value.shape
            g = grads[node_id] if node_id < len(grads) else None
            out[name] = np.zeros(shape) if g is None else np.array(g, dtype=np.float64).reshape(shape)
        return out


# ── Broadcasting helper ─────────────────────────────────────────────────────

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ── Elementwise ─────────────────────────────────────────────────────────────

def add(a: Var, b: Var) -> Var:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return a.graph.record("add", (a, b), a.value + b.value, backward)


def sub(a: Var, b: Var) -> Var:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return a.graph.record("sub", (a, b), a.value - b.value, backward)


def mul(a: Var, b: Var) -> Var:
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.graph.record("mul", (a, b), av * bv, backward)


def scale(a: Var, c: float) -> Var:
    def backward(g):
        return (g * c,)

    return a.graph.record("scale", (a,), a.value * c, backward)


def total(a: Var) -> Var:
    """Sum of all entries, as a scalar."""
    shape = a.shape

    def backward(g):
        return (np.full(shape, float(g)),)

    return a.graph.record("sum", (a,), np.asarray(a.value.sum()), backward)


def mean(a: Var) -> Var:
    shape, n = a.shape, a.value.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return a.graph.record("mean", (a,), np.asarray(a.value.mean()), backward)


def mse(pred: Var, target) -> Var:
    """Mean squared error against a constant target."""
    diff = pred - target
    return mean(mul(diff, diff))


def gelu(x: Var) -> Var:
    """Exact GELU, x·Φ(x)."""
    xv = x.value
    cdf = ndtr(xv)

    def backward(g):
        return (g * (cdf + xv * np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI),)

    return x.graph.record("gelu", (x,), xv * cdf, backward, saved=(cdf,))


def dropout(x: Var, p: float, rng: np.random.Generator | None) -> Var:
    """Bernoulli mask scaled by 1/(1-p). Identity when ``rng`` is None or p == 0."""
    if rng is None or p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError(f"dropout probability must be < 1, got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, x.graph.constant(mask))


# ── Shape ───────────────────────────────────────────────────────────────────

def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    src = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from None

    def backward(g):
        return (g.reshape(src),)

    return x.graph.record("reshape", (x,), value, backward)


def transpose(x: Var, axes: tuple[int, ...]) -> Var:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return x.graph.record("transpose", (x,), np.ascontiguousarray(x.value.transpose(axes)), backward)


def slice_last(x: Var, start: int, stop: int) -> Var:
    """x[..., start:stop]"""
    shape = x.shape
    if not 0 <= start < stop <= shape[-1]:
        raise DimensionError(f"slice_last: [{start}:{stop}] outside last axis of {shape}")

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return x.graph.record("slice_last", (x,), np.ascontiguousarray(x.value[..., start:stop]), backward)


def concat_last(parts: Sequence[Var]) -> Var:
    if not parts:
        raise ContractError("concat_last: nothing to concatenate")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat_last: shapes {parts[0].shape} and {p.shape} differ before the last axis")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g):
        return tuple(np.ascontiguousarray(g[..., bounds[i]:bounds[i + 1]]) for i in range(len(parts)))

    value = np.concatenate([p.value for p in parts], axis=-1)
    return parts[0].graph.record("concat_last", tuple(parts), value, backward)


def gather_rows(x: Var, index: np.ndarray) -> Var:
    """x[index] along the first axis; ``index`` may have any integer shape."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return x.graph.record("gather_rows", (x,), x.value[index], backward)


def scatter_rows(x: Var, index: np.ndarray, rows: int) -> Var:
    """Adjoint of gather_rows: sum x into ``rows`` rows at ``index``."""
    index = np.asarray(index, dtype=np.intp)
    if x.shape[: index.ndim] != index.shape:
        raise DimensionError(f"scatter_rows: index shape {index.shape} does not lead value shape {x.shape}")
    out = np.zeros((rows,) + x.shape[index.ndim:])
    np.add.at(out, index, x.value)

    def backward(g):
        return (g[index],)

    return x.graph.record("scatter_rows", (x,), out, backward)


# ── Linear algebra ──────────────────────────────────────────────────────────

def matmul(a: Var, b: Var) -> Var:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        value = a.value @ b.value
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return a.graph.record("matmul", (a, b), value, backward)


def softmax_rows(x: Var) -> Var:
    """Softmax over the last axis, shifted by the row max."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return x.graph.record("softmax_rows", (x,), y, backward)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = config.LN_EPS) -> Var:
    """Per-token normalization over the last axis, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gv = gamma.value
    lead = tuple(range(xv.ndim - 1))

    def backward(g):
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gx_hat = g * gv
        gx = inv_std * (gx_hat
                        - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta

    return x.graph.record("layer_norm", (x, gamma, beta), xhat * gv + beta.value, backward, saved=(xhat,))


# ── Convolutions (H×W×C layout, cross-correlation) ──────────────────────────

def _check_kernel(op: str, kernel: Var) -> int:
    ks = kernel.shape
    if len(ks) != 4 or ks[0] != ks[1]:
        raise DimensionError(f"{op}: kernel must be k×k×c×c', got {ks}")
    return ks[0]


def _taps(k: int, stride: int, out_h: int, out_w: int):
    for p in range(k):
        for q in range(k):
            yield p, q, (slice(p, p + stride * (out_h - 1) + 1, stride),
                         slice(q, q + stride * (out_w - 1) + 1, stride))


def conv2d(x: Var, kernel: Var, stride: int = 1, padding: int = 0) -> Var:
    """Valid cross-correlation of an H×W×c map with a k×k×c×c' kernel.

    ``padding`` zeros are added on every spatial side first; there is no
    implicit padding.
    """
    if x.value.ndim != 3:
        raise DimensionError(f"conv2d: input must be H×W×c, got {x.shape}")
    k = _check_kernel("conv2d", kernel)
    if kernel.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} has {x.shape[2]} channels, kernel {kernel.shape} expects {kernel.shape[2]}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} / padding {padding} invalid")
    h, w = x.shape[0] + 2 * padding, x.shape[1] + 2 * padding
    if h < k or w < k:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape} (padding {padding})")

    xp = np.pad(x.value, ((padding, padding), (padding, padding), (0, 0))) if padding else x.value
    kv = kernel.value
    out_h, out_w = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((out_h, out_w, kv.shape[3]))
    for p, q, sl in _taps(k, stride, out_h, out_w):
        out += xp[sl] @ kv[p, q]

    def backward(g):
        gxp = np.zeros(xp.shape)
        gk = np.zeros(kv.shape)
        for p, q, sl in _taps(k, stride, out_h, out_w):
            gxp[sl] += g @ kv[p, q].T
            gk[p, q] = np.tensordot(xp[sl], g, axes=([0, 1], [0, 1]))
        gx = gxp[padding:h - padding, padding:w - padding] if padding else gxp
        return gx, gk

    return x.graph.record("conv2d", (x, kernel), out, backward)


def conv_transpose2d(x: Var, kernel: Var, stride: int = 1, padding: int = 0) -> Var:
    """Adjoint of conv2d for the same kernel.

    The kernel keeps the layout of the conv2d it transposes, k×k×c_out×c_in,
    so ⟨conv2d(z, K, s), y⟩ == ⟨z, conv_transpose2d(y, K, s)⟩ for all z, y.
    Output side is (h−1)·s + k − 2·padding.
    """
    if x.value.ndim != 3:
        raise DimensionError(f"conv_transpose2d: input must be h×w×c, got {x.shape}")
    k = _check_kernel("conv_transpose2d", kernel)
    if kernel.shape[3] != x.shape[2]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} has {x.shape[2]} channels, kernel {kernel.shape} expects {kernel.shape[3]}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv_transpose2d: stride {stride} / padding {padding} invalid")

    xv, kv = x.value, kernel.value
    in_h, in_w = xv.shape[0], xv.shape[1]
    full_h, full_w = (in_h - 1) * stride + k, (in_w - 1) * stride + k
    if full_h <= 2 * padding or full_w <= 2 * padding:
        raise DimensionError(f"conv_transpose2d: padding {padding} crops away the whole output")
    full = np.zeros((full_h, full_w, kv.shape[2]))
    for p, q, sl in _taps(k, stride, in_h, in_w):
        full[sl] += xv @ kv[p, q].T
    out = full[padding:full_h - padding, padding:full_w - padding] if padding else full

    def backward(g):
        gfull = np.pad(g, ((padding, padding), (padding, padding), (0, 0))) if padding else g
        gx = np.zeros(xv.shape)
        gk = np.zeros(kv.shape)
        for p, q, sl in _taps(k, stride, in_h, in_w):
            gx += gfull[sl] @ kv[p, q]
            gk[p, q] = np.tensordot(gfull[sl], xv, axes=([0, 1], [0, 1]))
        return gx, gk

    return x.graph.record("conv_transpose2d", (x, kernel), out, backward)


def avg_pool2d(x: Var, k: int) -> Var:
    """k×k mean pooling with stride k."""
    h, w, c = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: grid {h}×{w} not divisible by {k}")
    value = x.value.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k),)

    return x.graph.record("avg_pool2d", (x,), value, backward)


def repeat2d(x: Var, k: int) -> Var:
    """Nearest-neighbour replication of every cell into a k×k block."""
    h, w, c = x.shape

    def backward(g):
        return (g.reshape(h, k, w, k, c).sum(axis=(1, 3)),)

    return x.graph.record("repeat2d", (x,), np.repeat(np.repeat(x.value, k, axis=0), k, axis=1), backward)


# ── Gradient check ──────────────────────────────────────────────────────────

LossFn = Callable[[Graph, dict[str, Var]], Var]


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel_error: float
    worst_index: int


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.max_rel_error < self.tolerance for p in self.params)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if p.max_rel_error >= self.tolerance]


def loss_value(loss_fn: LossFn, params: dict[str, np.ndarray]) -> float:
    g = Graph()
    return loss_fn(g, g.bind(params)).item()


def grad_check(loss_fn: LossFn, params: dict[str, np.ndarray], step: float = config.GRAD_CHECK_STEP,
               tolerance: float = config.GRAD_CHECK_TOL, max_samples: int = config.GRAD_CHECK_MAX_SAMPLES,
               seed: int = 0, corrupt_ops: Iterable[str] = (),
               floor: float = config.GRAD_CHECK_FLOOR) -> GradCheckReport:
    """Compare backward gradients with central finite differences.

    Tensors with more than ``max_samples`` scalars are checked on a seeded
    random subsample. Relative error is |a − n| / max(|a|, |n|, floor).
    Failures are reported, never raised.
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be > 0, got {step}")
    g = Graph(corrupt_ops=corrupt_ops)
    analytic = g.backward(loss_fn(g, g.bind(params)))

    work = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    report = GradCheckReport(tolerance=tolerance)
    for name, grad in analytic.items():
        flat = work[name].reshape(-1)
        size = flat.size
        if size > max_samples:
            rng = np.random.default_rng(config.sub_seed(seed, f"grad_check:{name}"))
            picks = np.sort(rng.choice(size, size=max_samples, replace=False))
        else:
            picks = np.arange(size)
        worst, worst_idx = 0.0, -1
        gflat = grad.reshape(-1)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + step
            plus = loss_value(loss_fn, work)
            flat[idx] = orig - step
            minus = loss_value(loss_fn, work)
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            a = gflat[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst or worst_idx < 0:
                worst, worst_idx = err, int(idx)
        report.params.append(ParamCheck(name=name, checked=len(picks), max_rel_error=worst, worst_index=worst_idx))
        log.debug("grad_check %s: %d scalars, max rel err %.3e", name, len(picks), worst)
    return report
