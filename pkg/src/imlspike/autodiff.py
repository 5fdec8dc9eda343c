"""Minimal tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive application whose inputs require
gradients. :func:`backward` replays the tape in reverse, visiting each node
once. Only the primitives the spiking Transformer needs are provided; the
spike-firing primitive lives in :mod:`imlspike.neuron` and plugs in through
:func:`record`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, StateError
from .numeric import Rng

_TAPES: list["Tape"] = []
_REGION_LOGS: list[list] = []


class Tensor:
    """float64 array plus gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: object
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of primitive applications within a ``with`` block."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for n in self.nodes:
            counts[n.op] = counts.get(n.op, 0) + 1
        return counts


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(op: str, data, inputs, backward_fn) -> Tensor:
    """Create the output tensor of a primitive and record it if needed.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    inputs = tuple(as_tensor(x) for x in inputs)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


@contextlib.contextmanager
def region_log():
    """Collect region codes reported by piecewise primitives (kink detection)."""
    log: list = []
    _REGION_LOGS.append(log)
    try:
        yield log
    finally:
        _REGION_LOGS.remove(log)


def log_region(codes: np.ndarray) -> None:
    for log in _REGION_LOGS:
        log.append(np.array(codes, copy=True))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- primitives -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def mask_mul(a, mask) -> Tensor:
    """Elementwise product with a constant (non-differentiated) mask."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    return record("mask_mul", a.data * m, (a,), lambda g: (_unbroadcast(g * m, a.shape),))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", ad @ bd, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return record("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def softmax(a) -> Tensor:
    """Softmax over the last axis; ``-inf`` logits receive zero weight."""
    from .numeric import softmax_rows

    a = as_tensor(a)
    y = softmax_rows(a.data)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return record("softmax_rows", y, (a,), backward)


def mean_pool(x, valid_lengths) -> Tensor:
    """Mean over the valid frames of ``x[B, L, D]`` -> ``[B, D]``."""
    x = as_tensor(x)
    B, L, _ = x.shape
    lengths = np.asarray(valid_lengths, dtype=np.int64)
    w = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
    w /= lengths[:, None]
    out = np.einsum("bl,bld->bd", w, x.data)
    return record("mean_pool", out, (x,), lambda g: (w[:, :, None] * g[:, None, :],))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch (scalar)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = len(labels)
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return record("cross_entropy", np.array(loss), (logits,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# --- backward ----------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, loss_grad: float = 1.0, params=None):
    """Reverse sweep over ``tape``; sets ``.grad`` on leaf tensors.

    Returns the gradients of ``params`` (in order) when given.
    """
    if not tape.nodes or not any(n.output is loss for n in tape.nodes):
        raise StateError("backward called before a forward pass was recorded for this loss")
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(loss_grad))}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.output) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else np.array(gi, dtype=np.float64)
            if key not in produced:
                leaves[key] = inp
    for key, t in leaves.items():
        t.grad = grads[key]
    if params is not None:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    return None


# --- finite-difference checker ---------------------------------------------


@dataclass
class GradCheckEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    retries: int
    kink: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def pass_fraction(self) -> float:
        if not self.entries:
            return 1.0
        return float(np.mean([e.rel_error <= self.tolerance for e in self.entries]))

    def quantile(self, q: float) -> float:
        return float(np.quantile([e.rel_error for e in self.entries], q))


def relative_error(a: float, b: float, atol: float = 1e-9) -> float:
    diff = abs(a - b)
    if diff <= atol:
        return 0.0
    return diff / max(abs(a), abs(b))


def _analytic(function, params):
    with Tape() as tape:
        loss = function()
    return backward(tape, loss, params=params)


def _eval(function):
    with region_log() as log:
        value = float(function().data)
    return value, log


def _same_regions(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(function, params, eps: float = 1e-3, tolerance: float = 1e-3,
               max_entries: int | None = None, seed: int = 0,
               max_retries: int = 8) -> GradCheckReport:
    """Compare tape gradients of ``function()`` with central differences.

    ``function`` takes no arguments and returns a scalar Tensor built from
    ``params``. If the +eps and -eps evaluations fall in different regions of
    a piecewise primitive, the probe value is jittered and retried.
    """
    rng = Rng(seed)
    base_grads = _analytic(function, params)
    entries = []
    for p_idx, p in enumerate(params):
        flat = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            flat = np.sort(rng.permutation(p.data.size)[:max_entries])
        for f in flat:
            idx = np.unravel_index(f, p.shape)
            orig = p.data[idx]
            grads = base_grads
            retries = 0
            while True:
                centre = p.data[idx]
                p.data[idx] = centre + eps
                fp, log_p = _eval(function)
                p.data[idx] = centre - eps
                fm, log_m = _eval(function)
                p.data[idx] = centre
                kink = not _same_regions(log_p, log_m)
                if not kink or retries >= max_retries:
                    break
                retries += 1
                p.data[idx] = orig + rng.uniform((), -20 * eps, 20 * eps)
                grads = _analytic(function, params)
            numeric = (fp - fm) / (2 * eps)
            analytic = float(grads[p_idx][idx])
            entries.append(GradCheckEntry(p.name or f"param{p_idx}", tuple(int(i) for i in idx),
                                          analytic, numeric, relative_error(analytic, numeric),
                                          retries, kink))
            p.data[idx] = orig
    return GradCheckReport(entries, tolerance)


# --- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """In-place Adam update with bias correction."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise DimensionError("one gradient per parameter expected")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
