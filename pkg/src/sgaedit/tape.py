"""Reverse-mode autodiff over the exact primitive set the model needs.

A `GradTape` holds an ordered record of primitive applications. Each op
below accepts either plain numpy arrays (returning plain arrays, no
recording: the inference path) or `Tensor` handles (returning a recorded
`Tensor`: the training path). Model code is written once against these
functions and works in both modes.

The op set is deliberately closed: matmul, add, mul, scale, masked_softmax,
layer_norm, peg, gather_rows, slice_cols, concat_cols, gelu, log, sum/mean
reductions, and cross_entropy. There is no general broadcasting engine.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .errors import NumericalError, ShapeError

# Ops with gradient support; the test suite checks every name listed here.
DIFFERENTIABLE_OPS = (
    "add",
    "add_bias",
    "mul",
    "scale",
    "matmul",
    "masked_softmax",
    "layer_norm",
    "peg",
    "gather_rows",
    "slice_cols",
    "concat_cols",
    "reshape",
    "gelu",
    "log",
    "sum_all",
    "mean_all",
    "cross_entropy",
)


class Tensor:
    """A value recorded on a GradTape."""

    __slots__ = ("value", "grad", "tape", "_backward", "_recompute")

    def __init__(self, value: np.ndarray, tape: "GradTape"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._recompute: Optional[Callable[[], np.ndarray]] = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape


class GradTape:
    """Ordered record of primitive ops; replays forward, walks backward."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def param(self, value) -> Tensor:
        """Register a leaf whose gradient will be accumulated."""
        node = Tensor(np.array(value, dtype=np.float64, copy=True), self)
        self._nodes.append(node)
        return node

    def _record(self, node: Tensor) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's .grad."""
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.shape != ():
            raise ShapeError("backward requires a scalar loss")
        loss.accumulate(np.asarray(1.0))
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        for node in self._nodes:
            node.grad = None

    def replay(self) -> None:
        """Recompute every recorded value in order from current leaf values."""
        for node in self._nodes:
            if node._recompute is not None:
                node.value = node._recompute()


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> GradTape:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    raise ValueError("no Tensor operand")


def _node(tape: GradTape, value, backward, recompute) -> Tensor:
    node = Tensor(value, tape)
    node._backward = backward
    node._recompute = recompute
    tape._record(node)
    return node


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        av, bv = nm.as_array(a), nm.as_array(b)
        if av.shape != bv.shape:
            raise ShapeError(f"add shapes differ: {av.shape} vs {bv.shape}")
        return av + bv
    tape = _tape_of(a, b)
    if value_of(a).shape != value_of(b).shape:
        raise ShapeError(f"add shapes differ: {value_of(a).shape} vs {value_of(b).shape}")

    def backward(g):
        if is_tensor(a):
            a.accumulate(g)
        if is_tensor(b):
            b.accumulate(g)

    return _node(tape, value_of(a) + value_of(b), backward, lambda: value_of(a) + value_of(b))


def add_bias(x, b):
    """Add a width-d bias row vector to every row of x."""
    if not (is_tensor(x) or is_tensor(b)):
        xv, bv = nm.as_array(x), nm.as_array(b)
        if xv.shape[-1] != bv.shape[-1] or bv.ndim != 1:
            raise ShapeError(f"bias {bv.shape} incompatible with {xv.shape}")
        return xv + bv
    tape = _tape_of(x, b)
    if value_of(b).ndim != 1 or value_of(x).shape[-1] != value_of(b).shape[0]:
        raise ShapeError(f"bias {value_of(b).shape} incompatible with {value_of(x).shape}")

    def backward(g):
        if is_tensor(x):
            x.accumulate(g)
        if is_tensor(b):
            b.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(tape, value_of(x) + value_of(b), backward, lambda: value_of(x) + value_of(b))


def reshape(x, shape: tuple):
    shape = tuple(int(s) for s in shape)
    if not is_tensor(x):
        return nm.as_array(x).reshape(shape)
    old = x.value.shape

    def backward(g):
        x.accumulate(g.reshape(old))

    return _node(x.tape, x.value.reshape(shape), backward, lambda: x.value.reshape(shape))


def mul(a, b):
    """Elementwise (Hadamard) product."""
    if not (is_tensor(a) or is_tensor(b)):
        return nm.as_array(a) * nm.as_array(b)
    tape = _tape_of(a, b)

    def backward(g):
        if is_tensor(a):
            a.accumulate(g * value_of(b))
        if is_tensor(b):
            b.accumulate(g * value_of(a))

    return _node(tape, value_of(a) * value_of(b), backward, lambda: value_of(a) * value_of(b))


def scale(a, c: float):
    """Multiply by a python constant."""
    c = float(c)
    if not is_tensor(a):
        return nm.as_array(a) * c

    def backward(g):
        a.accumulate(g * c)

    return _node(a.tape, a.value * c, backward, lambda: a.value * c)


def _mm(av: np.ndarray, bv: np.ndarray, transpose_b: bool) -> np.ndarray:
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {av.shape} and {bv.shape}")
    inner_b = bv.shape[1] if transpose_b else bv.shape[0]
    if av.shape[1] != inner_b:
        raise ShapeError(f"inner dimensions differ: {av.shape} vs {bv.shape} (transpose_b={transpose_b})")
    return av @ bv.T if transpose_b else av @ bv


def matmul(a, b, transpose_b: bool = False):
    if not (is_tensor(a) or is_tensor(b)):
        return _mm(nm.as_array(a), nm.as_array(b), transpose_b)
    tape = _tape_of(a, b)
    out = _mm(value_of(a), value_of(b), transpose_b)

    def backward(g):
        av, bv = value_of(a), value_of(b)
        if transpose_b:
            if is_tensor(a):
                a.accumulate(g @ bv)
            if is_tensor(b):
                b.accumulate(g.T @ av)
        else:
            if is_tensor(a):
                a.accumulate(g @ bv.T)
            if is_tensor(b):
                b.accumulate(av.T @ g)

    return _node(tape, out, backward, lambda: _mm(value_of(a), value_of(b), transpose_b))


def masked_softmax(scores, mask):
    """Row softmax of scores + mask; the mask is a non-differentiable constant."""
    mask = nm.as_array(mask)
    if not is_tensor(scores):
        return nm.masked_softmax(scores, mask)

    def forward():
        return nm.masked_softmax(scores.value, mask)

    def backward(g):
        y = nm.masked_softmax(scores.value, mask)
        scores.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(scores.tape, forward(), backward, forward)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    if not (is_tensor(x) or is_tensor(gain) or is_tensor(bias)):
        return nm.layer_norm(x, gain, bias, eps)
    tape = _tape_of(x, gain, bias)

    def forward():
        return nm.layer_norm(value_of(x), value_of(gain), value_of(bias), eps)

    def backward(g):
        xv = value_of(x)
        mean = xv.mean(axis=-1, keepdims=True)
        var = np.square(xv - mean).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean) * inv
        if is_tensor(gain):
            gain.accumulate((g * xhat).reshape(-1, xv.shape[-1]).sum(axis=0))
        if is_tensor(bias):
            bias.accumulate(g.reshape(-1, xv.shape[-1]).sum(axis=0))
        if is_tensor(x):
            dxhat = g * value_of(gain)
            dx = (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            ) * inv
            x.accumulate(dx)

    return _node(tape, forward(), backward, forward)


def peg(x, kernel):
    """Residual depth-wise 5x5 convolution (see numerics.peg)."""
    if not (is_tensor(x) or is_tensor(kernel)):
        return nm.peg(x, kernel)
    tape = _tape_of(x, kernel)

    def forward():
        return nm.peg(value_of(x), value_of(kernel))

    def backward(g):
        xv, kv = value_of(x), value_of(kernel)
        h, w, d = xv.shape
        if is_tensor(x):
            gpad = np.zeros((h + 4, w + 4, d), dtype=np.float64)
            gpad[2 : 2 + h, 2 : 2 + w] = g
            dx = np.array(g, copy=True)
            for u in range(5):
                for v in range(5):
                    dx += gpad[4 - u : 4 - u + h, 4 - v : 4 - v + w] * kv[u, v]
            x.accumulate(dx)
        if is_tensor(kernel):
            xpad = np.zeros((h + 4, w + 4, d), dtype=np.float64)
            xpad[2 : 2 + h, 2 : 2 + w] = xv
            dk = np.empty_like(kv)
            for u in range(5):
                for v in range(5):
                    dk[u, v] = (g * xpad[u : u + h, v : v + w]).sum(axis=(0, 1))
            kernel.accumulate(dk)

    return _node(tape, forward(), backward, forward)


def gather_rows(table, indices):
    """Row lookup table[indices]; used for embeddings and position selection."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects 1D indices, got {idx.shape}")
    if not is_tensor(table):
        return nm.as_array(table)[idx]

    def backward(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, idx, g)
        table.accumulate(dt)

    return _node(table.tape, table.value[idx], backward, lambda: table.value[idx])


def slice_cols(x, start: int, stop: int):
    if not is_tensor(x):
        return nm.as_array(x)[:, start:stop]

    def backward(g):
        dx = np.zeros_like(x.value)
        dx[:, start:stop] = g
        x.accumulate(dx)

    return _node(x.tape, x.value[:, start:stop], backward, lambda: x.value[:, start:stop])


def concat_cols(parts: Sequence):
    if not any(is_tensor(p) for p in parts):
        return np.concatenate([nm.as_array(p) for p in parts], axis=1)
    tape = _tape_of(*parts)
    widths = [value_of(p).shape[1] for p in parts]

    def forward():
        return np.concatenate([value_of(p) for p in parts], axis=1)

    def backward(g):
        offset = 0
        for p, w in zip(parts, widths):
            if is_tensor(p):
                p.accumulate(g[:, offset : offset + w])
            offset += w

    return _node(tape, forward(), backward, forward)


def gelu(x):
    if not is_tensor(x):
        return nm.gelu(x)

    def backward(g):
        xv = x.value
        c = np.sqrt(2.0 / np.pi)
        u = c * (xv + 0.044715 * xv**3)
        t = np.tanh(u)
        du = c * (1.0 + 3 * 0.044715 * xv**2)
        x.accumulate(g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t**2) * du))

    return _node(x.tape, nm.gelu(x.value), backward, lambda: nm.gelu(x.value))


def log(x):
    if not is_tensor(x):
        return np.log(nm.as_array(x))

    def backward(g):
        x.accumulate(g / x.value)

    return _node(x.tape, np.log(x.value), backward, lambda: np.log(x.value))


def sum_all(x):
    if not is_tensor(x):
        return nm.as_array(x).sum()

    def backward(g):
        x.accumulate(np.full_like(x.value, float(g)))

    return _node(x.tape, x.value.sum(), backward, lambda: x.value.sum())


def mean_all(x):
    if not is_tensor(x):
        return nm.as_array(x).mean()
    n = value_of(x).size

    def backward(g):
        x.accumulate(np.full_like(x.value, float(g) / n))

    return _node(x.tape, x.value.mean(), backward, lambda: x.value.mean())


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under row softmaxes."""
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim != 1:
        raise ShapeError(f"targets must be 1D, got {tgt.shape}")

    def forward_value(lv: np.ndarray) -> np.ndarray:
        if lv.ndim != 2 or lv.shape[0] != tgt.shape[0]:
            raise ShapeError(f"logits {lv.shape} incompatible with {tgt.shape[0]} targets")
        logp = _log_softmax(lv)
        return np.asarray(-logp[np.arange(tgt.shape[0]), tgt].mean())

    if not is_tensor(logits):
        return forward_value(nm.as_array(logits))

    def backward(g):
        lv = logits.value
        p = np.exp(_log_softmax(lv))
        p[np.arange(tgt.shape[0]), tgt] -= 1.0
        logits.accumulate(p * (float(g) / tgt.shape[0]))

    return _node(logits.tape, forward_value(logits.value), backward, lambda: forward_value(logits.value))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(f, point, step: float = 1e-3) -> float:
    """Max relative error between tape gradients of `f` and central differences.

    `f` maps one array-like argument to a scalar; it is called with a Tensor
    for the analytic pass and with plain numpy arrays for the probes.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)
    tape = GradTape()
    p = tape.param(point)
    out = f(p)
    out_value = float(value_of(out))
    if not np.isfinite(out_value):
        raise NumericalError("f(point) is not finite")
    tape.backward(out)
    analytic = np.zeros_like(point) if p.grad is None else p.grad
    analytic = analytic.ravel()

    numeric = np.empty_like(analytic)
    flat = point.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = float(value_of(f(point)))
        flat[i] = saved - step
        lo = float(value_of(f(point)))
        flat[i] = saved
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalError(f"non-finite probe at coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
