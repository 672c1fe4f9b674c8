"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Every Tensor holds an (n, d) matrix; scalars are (1, 1).  The tape is the
implicit graph of parent links; ``backward`` walks it in reverse topological
order and accumulates gradients by summation over uses.  Only the layer set
the neural causal models need is provided: affine maps, ReLU, clamp,
softmax / Gumbel-softmax with straight-through, concatenation, reductions,
and a hook for externally computed gradients (used by the Sinkhorn loss).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ShapeError(Exception):
    pass


class GraphError(Exception):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        v = np.asarray(value, dtype=float)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {v.shape}")
        self.value = v
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    # -- construction helpers ------------------------------------------------
    @staticmethod
    def param(value):
        t = Tensor(np.array(value, dtype=float))
        t.requires_grad = True
        return t

    @staticmethod
    def const(value):
        return Tensor(value)

    def detach(self):
        return Tensor(self.value.copy())

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item() needs a scalar tensor")
        return float(self.value[0, 0])

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), Tensor(-1.0)))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Collapse a broadcast gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce grad {grad.shape} to {shape}")
    return out


def add(a, b):
    out = Tensor(a.value + b.value, (a, b))

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    out._backward = back
    return out


def mul(a, b):
    out = Tensor(a.value * b.value, (a, b))

    def back(g):
        return (_unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape))

    out._backward = back
    return out


def matmul(a, b):
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, (a, b))

    def back(g):
        return g @ b.value.T, a.value.T @ g

    out._backward = back
    return out


def relu(a):
    mask = a.value > 0.0
    out = Tensor(np.where(mask, a.value, 0.0), (a,))
    out._backward = lambda g: (g * mask,)
    return out


def clamp(a, lo, hi):
    """Truncation T_K; subgradient 1 inside (boundary counted inside), 0 outside."""
    inside = (a.value >= lo) & (a.value <= hi)
    out = Tensor(np.clip(a.value, lo, hi), (a,))
    out._backward = lambda g: (g * inside,)
    return out


def concat(tensors, axis=1):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]

    def back(g):
        grads, off = [], 0
        for s in sizes:
            sl = (slice(None), slice(off, off + s)) if axis == 1 else (slice(off, off + s), slice(None))
            grads.append(g[sl])
            off += s
        return tuple(grads)

    out._backward = back
    return out


def col_slice(a, lo, hi):
    out = Tensor(a.value[:, lo:hi], (a,))

    def back(g):
        full = np.zeros_like(a.value)
        full[:, lo:hi] = g
        return (full,)

    out._backward = back
    return out


def tsum(a, axis=None):
    if axis is None:
        out = Tensor(a.value.sum(keepdims=True).reshape(1, 1), (a,))
        out._backward = lambda g: (np.full_like(a.value, g[0, 0]),)
        return out
    out = Tensor(a.value.sum(axis=axis, keepdims=True), (a,))
    out._backward = lambda g: (np.broadcast_to(g, a.value.shape).copy(),)
    return out


def tmean(a, axis=None):
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis), Tensor(1.0 / count))


def softmax(a, axis=1):
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(w, (a,))

    def back(g):
        dot = (g * w).sum(axis=axis, keepdims=True)
        return ((g - dot) * w,)

    out._backward = back
    return out


def tlog(a):
    out = Tensor(np.log(a.value), (a,))
    out._backward = lambda g: (g / a.value,)
    return out


def normalize_rows(a, floor=1e-6):
    """ReLU + floor then L1 row normalization: a nonnegative simplex head."""
    q = add(relu(a), Tensor(floor))
    s = tsum(q, axis=1)
    return mul(q, tpow_inv(s))


def tpow_inv(a):
    inv = 1.0 / a.value
    out = Tensor(inv, (a,))
    out._backward = lambda g: (-g * inv * inv,)
    return out


def external_grad(value, parents_and_grads):
    """Leaf-style node whose gradient to each parent was computed outside the tape.

    ``parents_and_grads`` is a list of (Tensor, grad_array) pairs; backward
    contributes upstream_scalar * grad_array to each parent.  Used for the
    Sinkhorn envelope gradient.
    """
    parents = tuple(p for p, _ in parents_and_grads)
    grads = [np.asarray(g, dtype=float) for _, g in parents_and_grads]
    out = Tensor(np.array([[float(value)]]), parents)

    def back(g):
        scale = g[0, 0]
        return tuple(scale * gr for gr in grads)

    out._backward = back
    return out


def straight_through(hard_value, soft):
    """Forward the hard array, route gradients through the soft surrogate."""
    out = Tensor(np.asarray(hard_value, dtype=float), (soft,))
    out._backward = lambda g: (g,)
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every reachable tensor; sums over uses."""
    if loss.value.size != 1:
        raise ShapeError("backward needs a scalar loss")
    if not loss.parents and not loss.requires_grad:
        raise GraphError("loss is detached from all parameters")

    topo, seen = [], set()

    def visit(t):
        if id(t) in seen:
            return
        seen.add(id(t))
        for p in t.parents:
            visit(p)
        topo.append(t)

    visit(loss)
    for t in topo:
        t.grad = None
    loss.grad = np.ones_like(loss.value)
    for t in reversed(topo):
        if t._backward is None or t.grad is None:
            continue
        for parent, g in zip(t.parents, t._backward(t.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g


def gumbel_softmax(log_p: Tensor, tau: float, g, tau_st: float = 0.5) -> Tensor:
    """Gumbel-softmax weights on the simplex, batched over rows.

    tau > 0: rows are softmax((log_p + g) / tau), differentiable in log_p.
    tau == 0: rows are exact one-hot at argmax(log_p + g) (the hard sampler);
    gradients use a straight-through surrogate at temperature ``tau_st``.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    g = np.asarray(g, dtype=float)
    shifted = add(log_p, Tensor(g))
    if tau > 0:
        return softmax(mul(shifted, Tensor(1.0 / tau)), axis=1)
    scores = log_p.value + g
    hard = np.zeros_like(scores)
    hard[np.arange(scores.shape[0]), np.argmax(scores, axis=1)] = 1.0
    soft = softmax(mul(shifted, Tensor(1.0 / tau_st)), axis=1)
    return straight_through(hard, soft)


# --------------------------------------------------------------------------
# MLPs
# --------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Stack of affine layers with ReLU between; output transform at the end.

    ``output``: "identity", ("clamp", K) or ("propensity", floor).  ``layers``
    holds (W, b) Tensor pairs; depth counts weight layers.
    """

    layers: list = field(default_factory=list)
    output: object = "identity"

    def parameters(self):
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def dims(self):
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]


def mlp_init(dims, rng, output="identity") -> MlpParams:
    """Kaiming-uniform style init scaled by fan-in; dims = [in, h1, ..., out].

    Propensity heads get a positive output bias so every category starts on
    the live side of the ReLU truncation (a zero start would never recover:
    the truncation has zero gradient below 0).
    """
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / d_in)
        w = Tensor.param(rng.uniform(-lim, lim, size=(d_in, d_out)))
        b = Tensor.param(np.zeros((1, d_out)))
        layers.append((w, b))
    if isinstance(output, tuple) and output[0] == "propensity":
        layers[-1][1].value[:] = 1.0
    return MlpParams(layers=layers, output=output)


def mlp_apply(p: MlpParams, x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.value.shape[1] != p.layers[0][0].shape[0]:
        raise ShapeError(
            f"input width {x.value.shape[1]} != mlp input dim {p.layers[0][0].shape[0]}")
    h = x
    last = len(p.layers) - 1
    for i, (w, b) in enumerate(p.layers):
        h = add(matmul(h, w), b)
        if i < last:
            h = relu(h)
    if p.output == "identity":
        return h
    kind = p.output[0]
    if kind == "clamp":
        return clamp(h, -p.output[1], p.output[1])
    if kind == "propensity":
        return normalize_rows(h, floor=p.output[1])
    raise ValueError(f"unknown output transform {p.output!r}")


def linf_norm(w) -> float:
    """Operator infinity-norm: max absolute row sum."""
    return float(np.abs(np.asarray(w)).sum(axis=1).max())


def project_linf(p: MlpParams, cap: float):
    """Rescale any weight matrix with ||W||_inf > cap down to the cap, in place."""
    for w, _ in p.layers:
        norm = linf_norm(w.value)
        if norm > cap:
            w.value *= cap / norm


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_arrays(path, named_arrays: dict, manifest: dict, manifest_path):
    np.savez(path, **{k: np.asarray(v) for k, v in named_arrays.items()})
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_arrays(path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
