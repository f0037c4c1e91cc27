"""Dense arithmetic and a small two-mode differentiation engine.

The reverse-mode engine works on :class:`Var` nodes wrapping float64 numpy
arrays.  Every primitive records a pullback that maps the output cotangent
to input cotangents using plain numpy, so derivatives of quantities that are
themselves built from derivative computations (tangent propagation through a
network, or a hand-written vector-Jacobian product) are obtained by ordinary
reverse mode over the graph that computes them.

Network helpers come in two flavours: ``*_var`` functions build engine
graphs, the plain functions return numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf appears at an operation boundary."""


class DimensionError(ValueError):
    """Raised on incompatible input dimensions."""


def check_finite(arr, what: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite entries in {what}")


# ---------------------------------------------------------------------------
# Reverse-mode engine
# ---------------------------------------------------------------------------


class Var:
    """A node in the differentiation graph."""

    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        # tuple of (parent Var, pullback: cotangent -> parent cotangent)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return Var(a.value + b.value,
               ((a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return Var(a.value - b.value,
               ((a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av * bv,
               ((a, lambda g: _unbroadcast(g * bv, av.shape)),
                (b, lambda g: _unbroadcast(g * av, bv.shape))))


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, ((a, lambda g: g * c),))


def square(a: Var) -> Var:
    av = a.value
    return Var(av * av, ((a, lambda g: 2.0 * g * av),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, ((a, lambda g: g * (1.0 - t * t)),))


def sigmoid(a: Var) -> Var:
    # split by sign so large |u| never overflows exp
    u = a.value
    e = np.exp(-np.abs(u))
    s = np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Var(s, ((a, lambda g: g * s * (1.0 - s)),))


def exp(a: Var) -> Var:
    e = np.exp(a.value)
    return Var(e, ((a, lambda g: g * e),))


def sqrt(a: Var) -> Var:
    r = np.sqrt(a.value)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)
    return Var(r, ((a, lambda g: g * d),))


def vsum(a: Var, axis=None) -> Var:
    shape = a.value.shape
    out = a.value.sum(axis=axis)

    def pb(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(out, ((a, pb),))


def mean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(vsum(a, axis), 1.0 / n)


def norm(a: Var, axis=-1) -> Var:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    av = a.value
    r = np.sqrt(np.sum(av * av, axis=axis))

    def pb(g):
        rk = np.expand_dims(r, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(rk > 0, av / np.where(rk > 0, rk, 1.0), 0.0)
        return np.expand_dims(g, axis) * q

    return Var(r, ((a, pb),))


def inner(a, b, axis=-1) -> Var:
    return vsum(mul(a, b), axis=axis)


def matmul(a, b) -> Var:
    """``a @ b`` with ``a`` of shape (..., m, k) and ``b`` a (k, n) matrix."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if bv.ndim != 2:
        raise DimensionError("right operand of matmul must be 2-D")

    def pb_b(g):
        k = av.shape[-1]
        return av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])

    return Var(av @ bv, ((a, lambda g: g @ bv.T), (b, pb_b)))


def transpose(a: Var) -> Var:
    return Var(a.value.T, ((a, lambda g: g.T),))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),))


def getitem(a: Var, idx) -> Var:
    shape = a.value.shape

    def pb(g):
        out = np.zeros(shape)
        if _is_fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return out

    return Var(a.value[idx], ((a, pb),))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(parts: Sequence, axis=-1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=axis)
    parents = []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        parents.append((p, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return Var(out, tuple(parents))


def expand_dims(a: Var, axis) -> Var:
    return reshape(a, np.expand_dims(a.value, axis).shape)


def backward(out: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradient of the scalar ``out`` with respect to each Var in ``wrt``."""
    if out.value.size != 1:
        raise DimensionError("backward needs a scalar output")
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    keep = {id(w) for w in wrt}
    grads = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        if not node.parents:
            continue
        key = id(node)
        g = grads.get(key) if key in keep else grads.pop(key, None)
        if g is None:
            continue
        for parent, pullback in node.parents:
            contrib = pullback(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return [grads.get(id(w), np.zeros_like(w.value)).reshape(w.value.shape) for w in wrt]


def grad_scalar_wrt_params(fn: Callable[[Var], Var], theta) -> np.ndarray:
    """Reverse-mode gradient of ``fn`` at the flat parameter vector ``theta``.

    ``fn`` receives a :class:`Var` holding ``theta`` and must return a scalar
    Var built from engine primitives.
    """
    theta_var = Var(np.array(theta, dtype=np.float64))
    out = fn(theta_var)
    check_finite(out.value, "function value")
    (g,) = backward(out, [theta_var])
    check_finite(g, "gradient")
    return g


# ---------------------------------------------------------------------------
# Fully connected networks
# ---------------------------------------------------------------------------


@dataclass
class Mlp:
    """Tanh network with an affine output layer.

    ``weights[l]`` has shape ``(layer_sizes[l+1], layer_sizes[l])``.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        if not self.weights:
            self.weights = [np.zeros((m, n)) for n, m in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]
            self.biases = [np.zeros(m) for m in self.layer_sizes[1:]]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError(f"{len(self.weights)} weights and {len(self.biases)} biases for "
                                 f"{len(self.layer_sizes) - 1} layers")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if W.shape != expect or b.shape != (expect[0],):
                raise DimensionError(f"layer {l}: weight {W.shape} / bias {b.shape} do not match {expect}")

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return mlp_param_count(self.layer_sizes)

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence) -> "Mlp":
        weights = [np.asarray(W, dtype=np.float64) for W in weights]
        biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if not weights:
            raise DimensionError("a network needs at least one layer")
        return cls([weights[0].shape[1]] + [W.shape[0] for W in weights], weights, biases)

    @classmethod
    def glorot(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        """Uniform Glorot weights, zero biases."""
        weights = []
        for n, m in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = np.sqrt(6.0 / (n + m))
            weights.append(rng.uniform(-lim, lim, size=(m, n)))
        return cls(list(layer_sizes), weights, [np.zeros(m) for m in layer_sizes[1:]])

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), [W.copy() for W in self.weights], [b.copy() for b in self.biases])


def mlp_param_count(layer_sizes: Sequence[int]) -> int:
    return sum(m * (n + 1) for n, m in zip(layer_sizes[:-1], layer_sizes[1:]))


def flatten(nets: Sequence[Mlp]) -> np.ndarray:
    """ParamVector: for each net in order, all weights (row-major, layer by
    layer) followed by all biases."""
    chunks = []
    for net in nets:
        chunks.extend(W.ravel() for W in net.weights)
        chunks.extend(net.biases)
    return np.concatenate(chunks) if chunks else np.zeros(0)


def unflatten(theta, layer_sizes_list: Sequence[Sequence[int]]) -> list[Mlp]:
    theta = np.asarray(theta, dtype=np.float64)
    need = sum(mlp_param_count(sizes) for sizes in layer_sizes_list)
    if theta.size != need:
        raise DimensionError(f"parameter vector has {theta.size} entries, architecture needs {need}")
    nets, pos = [], 0
    for sizes in layer_sizes_list:
        shapes = list(zip(sizes[1:], sizes[:-1]))
        weights = []
        for m, n in shapes:
            weights.append(theta[pos:pos + m * n].reshape(m, n).copy())
            pos += m * n
        biases = []
        for m, _ in shapes:
            biases.append(theta[pos:pos + m].copy())
            pos += m
        nets.append(Mlp(list(sizes), weights, biases))
    return nets


def split_param_vars(theta: Var, layer_sizes_list: Sequence[Sequence[int]]) -> list[tuple[list[Var], list[Var]]]:
    """Slice a flat parameter Var into per-net (weights, biases) Vars."""
    out, pos = [], 0
    for sizes in layer_sizes_list:
        shapes = list(zip(sizes[1:], sizes[:-1]))
        ws, bs = [], []
        for m, n in shapes:
            ws.append(reshape(theta[pos:pos + m * n], (m, n)))
            pos += m * n
        for m, _ in shapes:
            bs.append(theta[pos:pos + m])
            pos += m
        out.append((ws, bs))
    return out


def mlp_vars(net: Mlp) -> tuple[list[Var], list[Var]]:
    return [Var(W) for W in net.weights], [Var(b) for b in net.biases]


# -- engine-level network evaluation ----------------------------------------


def mlp_forward_var(ws: Sequence[Var], bs: Sequence[Var], x) -> tuple[Var, list[Var]]:
    """Forward pass on a batch; returns the output and the hidden activations."""
    a = as_var(x)
    acts = []
    for W, b in zip(ws[:-1], bs[:-1]):
        a = tanh(matmul(a, W.T) + b)
        acts.append(a)
    return matmul(a, ws[-1].T) + bs[-1], acts


def mlp_tangents_var(ws: Sequence[Var], acts: Sequence[Var], tangents) -> Var:
    """Push input tangents of shape (N, T, d_in) through the network.

    ``acts`` are the hidden activations from :func:`mlp_forward_var`.  The
    result has shape (N, T, d_out).
    """
    t = as_var(tangents)
    for W, a in zip(ws[:-1], acts):
        deriv = 1.0 - square(a)
        t = matmul(t, W.T) * expand_dims(deriv, -2)
    return matmul(t, ws[-1].T)


def mlp_vjp_var(ws: Sequence[Var], acts: Sequence[Var], cot) -> Var:
    """Pull output cotangents (N, d_out) back to the input: rows of cot @ J."""
    u = matmul(as_var(cot), ws[-1])
    for W, a in zip(reversed(ws[:-1]), reversed(acts)):
        u = matmul(u * (1.0 - square(a)), W)
    return u


# -- numpy API ----------------------------------------------------------------


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.d_in:
        raise DimensionError(f"input has length {x.shape[-1]}, network expects {net.d_in}")
    return x


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on one input (d_in,) or a batch (N, d_in)."""
    a = _check_input(net, x)
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.tanh(a @ W.T + b)
    out = a @ net.weights[-1].T + net.biases[-1]
    check_finite(out, "network output")
    return out


def _hidden(net: Mlp, x: np.ndarray) -> list[np.ndarray]:
    acts, a = [], x
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    return acts


def mlp_input_jacobian(net: Mlp, x) -> np.ndarray:
    """d_out x d_in Jacobian (or N x d_out x d_in for a batch), forward mode.

    Column j is the tangent obtained by pushing the unit vector e_j through
    the layers with diag(1 - tanh^2) factors.
    """
    x = _check_input(net, x)
    single = x.ndim == 1
    xb = x[None] if single else x
    acts = _hidden(net, xb)
    t = np.broadcast_to(np.eye(net.d_in), (xb.shape[0], net.d_in, net.d_in))
    for W, a in zip(net.weights[:-1], acts):
        t = (t @ W.T) * (1.0 - a * a)[:, None, :]
    t = t @ net.weights[-1].T  # (N, d_in, d_out): row j = J e_j
    jac = np.swapaxes(t, -1, -2)
    check_finite(jac, "Jacobian")
    return jac[0] if single else jac


def mlp_vjp(net: Mlp, x, cot) -> np.ndarray:
    """Reverse-mode pullback ``cot @ J(x)`` for one input or a batch."""
    x = _check_input(net, x)
    single = x.ndim == 1
    xb = x[None] if single else x
    u = np.atleast_2d(np.asarray(cot, dtype=np.float64)) @ net.weights[-1]
    acts = _hidden(net, xb)
    for W, a in zip(reversed(net.weights[:-1]), reversed(acts)):
        u = (u * (1.0 - a * a)) @ W
    return u[0] if single else u


def mlp_input_jacobian_reverse(net: Mlp, x) -> np.ndarray:
    """Same Jacobian as :func:`mlp_input_jacobian`, assembled row by row from
    reverse-mode pullbacks."""
    x = _check_input(net, x)
    rows = [mlp_vjp(net, x, np.broadcast_to(e, x.shape[:-1] + (net.d_out,))) for e in np.eye(net.d_out)]
    return np.stack(rows, axis=-2)
