"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Tape-based, micrograd-style: every primitive op creates a node that remembers
its parents and a vector-Jacobian closure. Tapes are single-use; a fresh graph
is built on every forward call. Covers exactly the primitives needed by the
dynamics models, the NLL loss and integrated-gradients attribution, plus an
Adam optimizer and a finite-difference gradient checker.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


class Tensor:
    __slots__ = ("data", "grad", "parents", "vjp", "op")

    def __init__(self, data, parents=(), vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp  # grad_out -> tuple of grads, one per parent
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"


def tensor(data, checked=True):
    """Create a leaf tensor. In checked mode non-finite values are rejected."""
    t = Tensor(data)
    if checked and not np.all(np.isfinite(t.data)):
        raise ValueError("tensor: non-finite values in leaf data")
    return t


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _binary(a, b, out, vjp, op):
    return Tensor(out, parents=(a, b), vjp=vjp, op=op)


def add(a, b):
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")
    return _binary(
        a, b, out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")
    return _binary(
        a, b, out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    return _binary(
        a, b, out,
        lambda g: (_unbroadcast(g * b.data, a.shape),
                   _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a):
    return Tensor(-a.data, parents=(a,), vjp=lambda g: (-g,), op="neg")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: expected (m,k)@(k,n), got {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _binary(
        a, b, out,
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def tanh(a):
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * (1.0 - out * out),),
                  op="tanh")


def softplus(a):
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, parents=(a,), vjp=lambda g: (g * sig,), op="softplus")


def exp(a):
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out,), op="exp")


def log(a):
    return Tensor(np.log(a.data), parents=(a,),
                  vjp=lambda g: (g / a.data,), op="log")


def square(a):
    return Tensor(a.data * a.data, parents=(a,),
                  vjp=lambda g: (2.0 * g * a.data,), op="square")


def tsum(a, axis=None):
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(out, parents=(a,), vjp=vjp, op="sum")


def tmean(a, axis=None):
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count,
                                a.shape).copy(),)

    return Tensor(out, parents=(a,), vjp=vjp, op="mean")


def max_const(a, c):
    """Elementwise max against a constant."""
    keep = a.data > c
    return Tensor(np.maximum(a.data, c), parents=(a,),
                  vjp=lambda g: (g * keep,), op="max_const")


def min_const(a, c):
    """Elementwise min against a constant."""
    keep = a.data < c
    return Tensor(np.minimum(a.data, c), parents=(a,),
                  vjp=lambda g: (g * keep,), op="min_const")


def mask_mul(a, mask):
    """Multiply by a constant binary mask (no gradient through the mask)."""
    m = np.asarray(mask, dtype=np.float64)
    try:
        out = a.data * m
    except ValueError:
        raise ShapeError(f"mask_mul: cannot broadcast {a.shape} with {m.shape}")
    return Tensor(out, parents=(a,),
                  vjp=lambda g: (_unbroadcast(g * m, a.shape),), op="mask_mul")


def select_col(a, idx):
    """Select column `idx` of a 2-D tensor; gradient scatters back."""
    if a.data.ndim != 2:
        raise ShapeError(f"select_col: expected 2-D tensor, got {a.shape}")
    out = a.data[:, idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, idx] = g
        return (full,)

    return Tensor(out, parents=(a,), vjp=vjp, op="select_col")


class Tape:
    """Topologically ordered record of the nodes reaching a set of outputs."""

    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.nodes = []
        seen = set()
        stack = [(o, False) for o in reversed(self.outputs)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                self.nodes.append(node)
            else:
                stack.append((node, True))
                for p in node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))


def forward_eval(graph, inputs):
    """Run `graph(*inputs)` and trace the tape of the resulting outputs.

    Returns (outputs, tape). `graph` may return a single Tensor or a
    list/tuple of Tensors.
    """
    out = graph(*inputs)
    outputs = list(out) if isinstance(out, (list, tuple)) else [out]
    return outputs, Tape(outputs)


def backward(tape, seed):
    """Reverse-mode sweep over a tape.

    `seed` is one array (single-output tape) or a list of arrays matching the
    tape outputs. Gradients accumulate into `.grad` of every node on the tape.
    """
    seeds = seed if isinstance(seed, (list, tuple)) else [seed]
    if len(seeds) != len(tape.outputs):
        raise ShapeError(
            f"backward: {len(seeds)} seeds for {len(tape.outputs)} outputs")
    for node in tape.nodes:
        node.grad = np.zeros_like(node.data)
    for out, s in zip(tape.outputs, seeds):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != out.data.shape:
            raise ShapeError(
                f"backward: seed shape {s.shape} != output shape "
                f"{out.data.shape}")
        out.grad = out.grad + s
    for node in reversed(tape.nodes):
        if node.vjp is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            parent.grad = parent.grad + g


def grad(graph, inputs, seed=None):
    """Convenience: gradients of a single-output graph w.r.t. its inputs."""
    outputs, tape = forward_eval(graph, inputs)
    if seed is None:
        seed = np.ones_like(outputs[0].data)
    backward(tape, [seed] + [np.zeros_like(o.data) for o in outputs[1:]])
    return [x.grad for x in inputs]


class AdamState:
    """Adam accumulators and hyperparameters for one parameter list."""

    def __init__(self, params, lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to `params` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: parameter/gradient count mismatch")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def finite_diff_check(graph, inputs, h=1e-5):
    """Max relative error between autodiff and central-difference gradients.

    The graph output is reduced with a sum so the check works for any output
    shape. Relative error uses |central difference| + 1e-8 as denominator.
    """

    def scalar_graph(*xs):
        return tsum(graph(*xs))

    auto = grad(scalar_graph, inputs, seed=np.asarray(1.0))
    worst = 0.0
    for i, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = float(scalar_graph(*inputs).data)
            flat[k] = orig - h
            f_minus = float(scalar_graph(*inputs).data)
            flat[k] = orig
            cd = (f_plus - f_minus) / (2.0 * h)
            err = abs(auto[i].reshape(-1)[k] - cd) / (abs(cd) + 1e-8)
            worst = max(worst, err)
    return worst
