"""Training losses for level-set learning.

Three terms are combined as ``L1 + lambda1 * L2 + lambda2 * L3``:

* L1, pseudo-reversibility: mean squared reconstruction error of h(g(x)).
* L2, active direction fitting: gamma-weighted squared inner products of the
  inactive Jacobian columns of h with grad f.
* L3, bounded derivative: mean sigmoid penalty on the norm of the active
  components of grad f^T J_h.

For a RevNet the reconstruction is exact, so L1 is identically zero and L3
is only included when ``HyperParams.revnet_bounded_derivative`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .transforms import TransformKind


@dataclass(frozen=True)
class HyperParams:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 50.0
    sigma: float = 0.01
    k_star: int = 1
    # None means the standard (0,...,0,1,...,1) mask with k_star zeros
    omega: tuple | None = None
    revnet_bounded_derivative: bool = False

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.alpha) < 0:
            raise ValueError("lambda1, lambda2 and alpha must be nonnegative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.k_star < 1:
            raise ValueError("k_star must be at least 1")
        if self.omega is not None:
            om = tuple(float(w) for w in self.omega)
            if om != tuple([0.0] * self.k_star + [1.0] * (len(om) - self.k_star)):
                raise ValueError(f"omega {om} must be k_star={self.k_star} zeros followed by ones")
            object.__setattr__(self, "omega", om)

    def omega_for(self, d: int) -> np.ndarray:
        if self.k_star > d:
            raise ValueError(f"k_star={self.k_star} exceeds dimension {d}")
        if self.omega is not None:
            if len(self.omega) != d:
                raise ValueError(f"omega has length {len(self.omega)}, data dimension is {d}")
            return np.array(self.omega)
        return np.r_[np.zeros(self.k_star), np.ones(d - self.k_star)]


@dataclass
class Dataset:
    inputs: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.gradients = np.asarray(self.gradients, dtype=np.float64).reshape(self.inputs.shape)
        self.domain_lo = np.broadcast_to(np.asarray(self.domain_lo, dtype=np.float64), (self.d,)).copy()
        self.domain_hi = np.broadcast_to(np.asarray(self.domain_hi, dtype=np.float64), (self.d,)).copy()
        if self.values.shape[0] != self.N:
            raise ValueError("values and inputs disagree on N")
        if self.N and (np.any(self.inputs < self.domain_lo) or np.any(self.inputs > self.domain_hi)):
            raise ValueError("inputs fall outside the declared domain")

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.values[idx], self.gradients[idx],
                       self.domain_lo, self.domain_hi, self.name)


def _require_samples(data: Dataset) -> None:
    if data.N == 0:
        raise ValueError("empty dataset")


def scaling_factor(grad_norm, alpha: float):
    """gamma = 1 + alpha * exp(-|grad f|); elementwise on arrays."""
    return 1.0 + alpha * np.exp(-np.asarray(grad_norm, dtype=np.float64))


def _graph(t, pvars, data: Dataset, hp: HyperParams, jacobian_mode: str):
    _require_samples(data)
    omega = hp.omega_for(data.d)
    X, G = data.inputs, data.gradients
    xhat, s = t.trace(pvars, X, G, jacobian_mode)

    if xhat is None:
        L1 = tc.Var(0.0)
    else:
        L1 = tc.mean(tc.vsum(tc.square(xhat - X), axis=1))

    gamma = scaling_factor(np.linalg.norm(G, axis=1), hp.alpha)
    L2 = tc.mean(tc.vsum(tc.square(s * omega), axis=1) * gamma)

    use_l3 = t.kind is TransformKind.PRNN or hp.revnet_bounded_derivative
    if use_l3:
        s_active = tc.norm(s[:, :hp.k_star], axis=1)
        L3 = tc.mean(tc.sigmoid(tc.scale(s_active - 1.0, 1.0 / hp.sigma)))
    else:
        L3 = tc.Var(0.0)
    lam2 = hp.lambda2 if use_l3 else 0.0
    total = L1 + tc.scale(L2, hp.lambda1) + tc.scale(L3, lam2)
    return total, {"L1": L1, "L2": L2, "L3": L3}


def loss_total(t, data: Dataset, hp: HyperParams, jacobian_mode: str | None = None):
    """Return (total, {"L1", "L2", "L3"}) as floats."""
    mode = jacobian_mode or _default_mode(t)
    total, parts = _graph(t, t.param_vars(), data, hp, mode)
    value = float(total.value)
    tc.check_finite(value, "total loss")
    return value, {k: float(v.value) for k, v in parts.items()}


def loss_and_gradient(t, data: Dataset, hp: HyperParams, jacobian_mode: str | None = None):
    """Total loss, its parts and the exact gradient over all parameters."""
    mode = jacobian_mode or _default_mode(t)
    pvars = t.param_vars()
    total, parts = _graph(t, pvars, data, hp, mode)
    value = float(total.value)
    tc.check_finite(value, "total loss")
    grads = tc.backward(total, pvars)
    grad = np.concatenate([g.ravel() for g in grads])
    tc.check_finite(grad, "loss gradient")
    return value, {k: float(v.value) for k, v in parts.items()}, grad


def loss_gradient(t, data: Dataset, hp: HyperParams, jacobian_mode: str | None = None) -> np.ndarray:
    return loss_and_gradient(t, data, hp, jacobian_mode)[2]


def _default_mode(t) -> str:
    return "reverse" if t.kind is TransformKind.PRNN else "forward"


def loss_reversibility(p, data: Dataset) -> float:
    _require_samples(data)
    if p.kind is TransformKind.REVNET:
        return 0.0
    r = data.inputs - p.pseudo_inverse(p.forward(data.inputs))
    return float(np.mean(np.sum(r * r, axis=1)))


def loss_active_fit(t, data: Dataset, hp: HyperParams) -> float:
    _require_samples(data)
    omega = hp.omega_for(data.d)
    s = t.directional_derivatives(data.inputs, data.gradients)
    gamma = scaling_factor(np.linalg.norm(data.gradients, axis=1), hp.alpha)
    return float(np.mean(gamma * np.sum((omega * s) ** 2, axis=1)))


def loss_bounded_derivative(t, data: Dataset, hp: HyperParams) -> float:
    _require_samples(data)
    hp.omega_for(data.d)
    s = t.directional_derivatives(data.inputs, data.gradients)
    u = (np.linalg.norm(s[:, :hp.k_star], axis=1) - 1.0) / hp.sigma
    return float(np.mean(tc.sigmoid(tc.Var(u)).value))
