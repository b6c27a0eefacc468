"""Dense float64 tensors with reverse-mode autodiff, MAC instrumentation, and Adam.

Everything downstream (vision encoder, fusion transformer, action decoder) is built
from the operations in this module. Gradients are exact analytic derivatives checked
against central finite differences; `matmul` is the only operation that accrues
multiply-accumulate counts, which is what lets the closed-form cost model be compared
against an instrumented forward pass without slack.

Conventions:
  * all floating data is float64; integer index arrays stay plain numpy int arrays
  * tensors are leaves (parameters, inputs) or op outputs; leaves that require grad
    own a zero-filled `.grad` buffer from construction so an unused parameter reads
    as an all-zero gradient rather than None
  * broadcasting is deliberately narrow: equal shapes, a python/0-d scalar, or a
    trailing-axis vector against a 2-D operand (the bias/gain case); anything else
    raises ShapeError
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


# ---------------------------------------------------------------------------
# grad-mode and MAC-count global state
# ---------------------------------------------------------------------------

_GRAD_ENABLED = [True]


@contextmanager
def inference_mode():
    """Disable graph construction inside the block (forward values unaffected)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class MacCounter:
    """Accumulates multiply-accumulate counts from matmul calls."""

    __slots__ = ("macs",)

    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)

    def reset(self) -> None:
        self.macs = 0


_MAC_STACK: list[MacCounter] = []


@contextmanager
def count_macs():
    """Count forward-pass MACs inside the block; yields the live counter.

    Counters nest: an inner block's matmuls are charged to every enclosing
    counter as well.
    """
    counter = MacCounter()
    _MAC_STACK.append(counter)
    try:
        yield counter
    finally:
        _MAC_STACK.pop()


# ---------------------------------------------------------------------------
# tensor type
# ---------------------------------------------------------------------------


class Tensor:
    """A numpy float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # small operator surface; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Construct a leaf tensor, rejecting non-finite input values."""
    t = Tensor(data, requires_grad=requires_grad)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("tensor() given non-finite values")
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _attach(out: Tensor, parents: Sequence[Tensor], backward: Callable[[], None]) -> None:
    """Mark `out` as an op output of `parents` when grad mode is on."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    """Allow equal shapes, scalars, or a trailing vector against a 2-D operand."""
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"unsupported broadcast between shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bw():
        g = out.grad
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    _attach(out, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def bw():
        g = out.grad
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    _attach(out, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def bw():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    _attach(out, (a, b), bw)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bw():
        _accum(a, -out.grad)

    _attach(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; charges m*k*n MACs to every active counter."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul needs 2-D operands with matching inner dims, got {a.shape} and {b.shape}"
        )
    m, k = a.shape
    n = b.shape[1]
    for counter in _MAC_STACK:
        counter.add(m * k * n)
    out = Tensor(a.data @ b.data)

    def bw():
        g = out.grad
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _attach(out, (a, b), bw)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    out = Tensor(a.data.T)

    def bw():
        _accum(a, out.grad.T)

    _attach(out, (a,), bw)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw():
        _accum(a, out.grad.reshape(a.shape))

    _attach(out, (a,), bw)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty sequence")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    for p in parts:
        if p.ndim != 2:
            raise ShapeError(f"concat needs 2-D tensors, got shape {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def bw():
        g = out.grad
        start = 0
        for p, n in zip(parts, sizes):
            if axis == 0:
                _accum(p, g[start : start + n, :])
            else:
                _accum(p, g[:, start : start + n])
            start += n

    _attach(out, tuple(parts), bw)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"narrow needs a 2-D tensor, got shape {a.shape}")
    if axis not in (0, 1):
        raise ShapeError(f"narrow axis must be 0 or 1, got {axis}")
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow range [{start}, {start + length}) exceeds axis {axis} of shape {a.shape}"
        )
    if axis == 0:
        out = Tensor(a.data[start : start + length, :])
    else:
        out = Tensor(a.data[:, start : start + length])

    def bw():
        g = np.zeros_like(a.data)
        if axis == 0:
            g[start : start + length, :] = out.grad
        else:
            g[:, start : start + length] = out.grad
        _accum(a, g)

    _attach(out, (a,), bw)
    return out


def take_rows(table: Tensor, ids) -> Tensor:
    """Row gather (embedding lookup). `ids` is a 1-D int array; grads scatter-add."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"take_rows needs a 2-D table and 1-D ids, got {table.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def bw():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accum(table, g)

    _attach(out, (table,), bw)
    return out


def gather_pairs(a: Tensor, rows, cols) -> Tensor:
    """Pick a[rows[i], cols[i]] as a 1-D tensor (the cross-entropy gather)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError(
            f"gather_pairs needs a 2-D tensor and equal-length 1-D indices, got {a.shape}, {rows.shape}, {cols.shape}"
        )
    out = Tensor(a.data[rows, cols])

    def bw():
        g = np.zeros_like(a.data)
        np.add.at(g, (rows, cols), out.grad)
        _accum(a, g)

    _attach(out, (a,), bw)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bw():
        _accum(a, np.full_like(a.data, float(out.grad)))

    _attach(out, (a,), bw)
    return out


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean_all of an empty tensor")
    out = Tensor(a.data.mean())

    def bw():
        _accum(a, np.full_like(a.data, float(out.grad) / a.size))

    _attach(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"{op} axis {axis} out of range for ndim {ndim}")
    return axis


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to one exactly up to rounding."""
    axis = _norm_axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * y)

    _attach(out, (a,), bw)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def bw():
        g = out.grad
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    _attach(out, (a,), bw)
    return out


# test hook: scales the analytic gelu derivative so a verification harness can
# prove it detects a planted gradient fault; never set outside tests/CLI gradcheck
_GELU_BACKWARD_SCALE = [1.0]


@contextmanager
def gelu_backward_fault(scale: float = 1.01):
    """Deliberately mis-scale the gelu derivative inside the block."""
    _GELU_BACKWARD_SCALE.append(float(scale))
    try:
        yield
    finally:
        _GELU_BACKWARD_SCALE.pop()


_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-form gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).

    The derivative is the exact analytic one for this approximation:
      u  = sqrt(2/pi) * (x + 0.044715*x^3)
      d/dx = 0.5*(1 + tanh(u)) + 0.5*x*(1 - tanh(u)^2) * sqrt(2/pi)*(1 + 3*0.044715*x^2)
    """
    x = a.data
    u = _GELU_C0 * (x + _GELU_C1 * x**3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def bw():
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        _accum(a, out.grad * d * _GELU_BACKWARD_SCALE[-1])

    _attach(out, (a,), bw)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per feature.

    Forward, with d the last-axis width and statistics per row:
      mu = mean(x), var = mean((x - mu)^2), xhat = (x - mu) / sqrt(var + eps)
      y = xhat * gain + bias

    Backward (hand-derived; s = 1/sqrt(var + eps), gh = g * gain):
      d_gain = sum_rows(g * xhat)
      d_bias = sum_rows(g)
      d_x    = s * (gh - mean(gh) - xhat * mean(gh * xhat))
    where the means are over the last axis per row.
    """
    d = a.shape[-1] if a.ndim else 0
    if d == 0:
        raise ShapeError(f"layer_norm over an empty last dimension, shape {a.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw():
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gh - m1 - xhat * m2))

    _attach(out, (a, gain, bias), bw)
    return out


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Iterative postorder topological sort; every reachable op node is visited
    exactly once, and leaf `.grad` buffers accumulate (callers zero them
    between steps via the optimizer).
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor that does not require grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# finite differences and error metrics
# ---------------------------------------------------------------------------


def rel_err(a: float, b: float) -> float:
    """|a - b| / max(1e-8, |a|, |b|)."""
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x.

    f must be a pure function of its argument's values. Every coordinate is
    perturbed by +/- h, so cost is 2*size evaluations; keep inputs small.
    """
    base = np.array(x.data, dtype=np.float64)
    g = np.zeros_like(base)
    work = base.copy()
    probe = Tensor(work)
    flat = work.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar_value(f(probe))
        flat[i] = orig - h
        fm = _scalar_value(f(probe))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(g)


def finite_diff_coords(
    f: Callable[[], Tensor], t: Tensor, coords: Iterable[int], h: float = 1e-5
) -> np.ndarray:
    """Central differences of a nullary scalar f w.r.t. selected flat coords of t.

    Perturbs t.data in place and restores it; used to spot-check large
    parameter tensors without 2*size full sweeps.
    """
    flat = t.data.reshape(-1)
    vals = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar_value(f())
        flat[i] = orig - h
        fm = _scalar_value(f())
        flat[i] = orig
        vals.append((fp - fm) / (2.0 * h))
    return np.asarray(vals, dtype=np.float64)


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


# ---------------------------------------------------------------------------
# initialization and seeding helpers
# ---------------------------------------------------------------------------


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named component.

    Seeding with (seed, crc32(name)) keeps each component's draws stable when
    other components are added or removed from a model, which is what makes
    fusion-strategy ablations share their non-fusion weights bit for bit.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) float64 weights."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float64)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction, updating parameter tensors in place.

    With lr=0 the update subtracts an exact 0.0 from every entry, so parameters
    stay bitwise identical; state (m, v, t) still advances.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 5e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.names = list(params.keys())
        self.params = [params[n] for n in self.names]
        for n, p in zip(self.names, self.params):
            if not p.requires_grad:
                raise ValueError(f"Adam given parameter {n!r} that does not require grad")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            else:
                p.grad[...] = 0.0

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= self.lr * update
