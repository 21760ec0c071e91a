"""Minimal dense-tensor reverse-mode autodiff with second-order support.

Every primitive computes its value eagerly in float64 numpy and, while a
Tape is active, appends a node to the innermost tape. Gradient cotangents
are themselves built out of the same primitives, so a backward pass that
runs while the tape is still recording can be differentiated again
(reverse-over-reverse). That is the mechanism the meta-update relies on to
push gradients through a gradient step.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending op."""


class Tensor:
    """A dense float64 array node. Leaf unless produced by a primitive."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "vjp", "fn")

    def __init__(self, op, inputs, output, vjp, fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp  # fn(cotangent Tensor) -> tuple of cotangents (None = no grad)
        self.fn = fn  # raw value recomputation, for replay()


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered, replayable record of primitive ops.

    Use as a context manager; ops executed inside are recorded in
    topological (execution) order. gradient() may be called while the tape
    is still active, in which case the backward arithmetic is recorded too
    and can itself be differentiated by a later gradient() call.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor],
                 seed: Tensor | np.ndarray | None = None) -> list[Tensor]:
        """Cotangents of target w.r.t. sources, seeded with `seed` (default ones).

        Sources with no path to target get explicit zero tensors. `sign`
        nodes contribute nothing (piecewise-constant convention).
        """
        produced = any(n.output is target for n in self.nodes)
        if not produced:
            raise ShapeError("gradient target was not produced on this tape")
        if seed is None:
            seed = Tensor(np.ones_like(target.value))
        else:
            seed = _wrap(seed)
            if seed.shape != target.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match target {target.shape}")
        cot: dict[int, Tensor] = {id(target): seed}
        # Snapshot: cotangent ops recorded below must not be traversed now.
        for node in reversed(list(self.nodes)):
            g = cot.get(id(node.output))
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                acc = cot.get(id(inp))
                cot[id(inp)] = gi if acc is None else add(acc, gi)
        return [cot.get(id(s)) or Tensor(np.zeros_like(s.value)) for s in sources]

    def replay(self) -> None:
        """Re-execute every node from its recorded inputs, in order.

        Outputs are overwritten in place; with unchanged leaf values the
        recomputation is bit-identical (fixed kernels and reduction order).
        """
        for node in self.nodes:
            node.output.value = node.fn()


def _record(op: str, inputs: tuple[Tensor, ...], out_value: np.ndarray,
            vjp: Callable, fn: Callable[[], np.ndarray]) -> Tensor:
    out = Tensor(out_value)
    if _TAPE_STACK:
        # Record on every active tape so an outer tape can differentiate
        # through work done (and backward passes taken) under an inner one.
        node = Node(op, inputs, out, vjp, fn)
        for tape in _TAPE_STACK:
            tape.nodes.append(node)
    return out


def _sum_to_shape(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reverse numpy broadcasting: reduce g back to `shape` (traced)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        val = a.value + b.value
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), val,
                   lambda g: (_sum_to_shape(g, sa), _sum_to_shape(g, sb)),
                   lambda: a.value + b.value)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        val = a.value - b.value
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), val,
                   lambda g: (_sum_to_shape(g, sa), _sum_to_shape(neg(g), sb)),
                   lambda: a.value - b.value)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        val = a.value * b.value
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _record("mul", (a, b), val,
                   lambda g: (_sum_to_shape(mul(g, b), sa),
                              _sum_to_shape(mul(g, a), sb)),
                   lambda: a.value * b.value)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        val = a.value / b.value
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    out = _record("div", (a, b), val,
                  lambda g: (_sum_to_shape(div(g, b), sa),
                             _sum_to_shape(neg(div(mul(g, out), b)), sb)),
                  lambda: a.value / b.value)
    return out


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _record("neg", (a,), -a.value,
                   lambda g: (neg(g),),
                   lambda: -a.value)


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _record("matmul", (a, b), a.value @ b.value,
                   lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
                   lambda: a.value @ b.value)


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _record("transpose", (a,), a.value.T.copy(),
                   lambda g: (transpose(g),),
                   lambda: a.value.T.copy())


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    orig = a.shape
    try:
        val = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e
    return _record("reshape", (a,), val,
                   lambda g: (reshape(g, orig),),
                   lambda: a.value.reshape(shape))


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by an integer index array (constant)."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape}")
    n_rows = a.shape[0]
    return _record("gather", (a,), a.value[idx],
                   lambda g: (scatter_rows(g, idx, n_rows),),
                   lambda: a.value[idx])


def scatter_rows(a: Tensor, idx, n_rows: int) -> Tensor:
    """Adjoint of gather_rows: sum rows of `a` into an n_rows-tall zero matrix."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)

    def fwd():
        out = np.zeros((n_rows, a.value.shape[1]))
        np.add.at(out, idx, a.value)
        return out

    return _record("scatter", (a,), fwd(),
                   lambda g: (gather_rows(g, idx),),
                   fwd)


# ---------------------------------------------------------------------------
# nonlinearities

def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _record("tanh", (a,), np.tanh(a.value),
                  lambda g: (mul(g, sub(Tensor(1.0), mul(out, out))),),
                  lambda: np.tanh(a.value))
    return out


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = Tensor((a.value > 0).astype(np.float64))
    return _record("relu", (a,), np.maximum(a.value, 0.0),
                   lambda g: (mul(g, mask),),
                   lambda: np.maximum(a.value, 0.0))


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _record("exp", (a,), np.exp(a.value),
                  lambda g: (mul(g, out),),
                  lambda: np.exp(a.value))
    return out


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _record("log", (a,), np.log(a.value),
                   lambda g: (div(g, a),),
                   lambda: np.log(a.value))


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0)=0. Zero gradient by convention."""
    a = _wrap(a)
    return _record("sign", (a,), np.sign(a.value),
                   lambda g: (None,),
                   lambda: np.sign(a.value))


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            gg = reshape(g, (1,) * len(in_shape)) if in_shape else g
        elif not keepdims:
            kept = list(g.shape)
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in sorted(ax % len(in_shape) for ax in axes):
                kept.insert(ax, 1)
            gg = reshape(g, tuple(kept))
        else:
            gg = g
        return (broadcast_to(gg, in_shape),)

    return _record("sum", (a,), np.sum(a.value, axis=axis, keepdims=keepdims),
                   vjp, lambda: np.sum(a.value, axis=axis, keepdims=keepdims))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(count)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    orig = a.shape
    try:
        val = np.broadcast_to(a.value, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from e
    return _record("broadcast", (a,), val,
                   lambda g: (_sum_to_shape(g, orig),),
                   lambda: np.broadcast_to(a.value, shape).copy())


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Fused, shift-stable log-sum-exp along one axis.

    The cotangent is softmax(a) along the axis, expressed with traced ops
    so the backward pass stays twice-differentiable.
    """
    a = _wrap(a)

    def fwd():
        m = np.max(a.value, axis=axis, keepdims=True)
        out = m + np.log(np.sum(np.exp(a.value - m), axis=axis, keepdims=True))
        return out if keepdims else np.squeeze(out, axis=axis)

    out = _record("logsumexp", (a,), fwd(), None, fwd)

    def vjp(g):
        lse_k = out if keepdims else _expand_axis(out, axis, a.ndim)
        g_k = g if keepdims else _expand_axis(g, axis, a.ndim)
        soft = exp(sub(a, broadcast_to(lse_k, a.shape)))
        return (mul(broadcast_to(g_k, a.shape), soft),)

    if _TAPE_STACK:
        _TAPE_STACK[-1].nodes[-1].vjp = vjp
    return out


def _expand_axis(t: Tensor, axis: int, ndim: int) -> Tensor:
    shape = list(t.shape)
    shape.insert(axis % ndim, 1)
    return reshape(t, tuple(shape))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample CE of row-wise logits against integer labels, via logsumexp."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = tsum(mul(logits, Tensor(onehot)), axis=1)
    return sub(logsumexp(logits, axis=1), picked)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    lse = logsumexp(logits, axis=axis, keepdims=True)
    return exp(sub(logits, broadcast_to(lse, logits.shape)))
