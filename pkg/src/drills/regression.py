"""Function prediction from learned active coordinates.

The synthesized regression picks the nearest training inputs in the
*original* space, maps them to the active coordinates and fits a local
least-squares polynomial there.  The baselines differ only in how the fit
data are chosen (neighbours in active-coordinate space, all samples) or in
the regressor (a small tanh network).  Active Subspace supplies a linear
projector that plugs into the same machinery.

Any object with ``project_active(X) -> (N, k)`` and ``k_star`` can serve as
the projector: a :class:`~drills.training.TrainedModel`, an
:class:`ActiveSubspaceModel` or :class:`IdentityProjector`.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .losses import Dataset
from .training import AdamState, adam_step


class Method(str, enum.Enum):
    SYNTHESIZED = "synthesized"
    DIRECT_LOCAL = "direct_local"
    GLOBAL = "global"
    NEURAL_NET = "neural_net"


@dataclass
class RegressionConfig:
    n_neighbors: int = 30
    degree: int = 3
    method: Method = Method.SYNTHESIZED
    # neural-network baseline
    nn_hidden: tuple = (20, 20, 20)
    nn_steps: int = 10000
    nn_lr0: float = 1e-3
    nn_decay: float = 0.7
    nn_decay_every: int = 5000
    nn_seed: int = 0

    def __post_init__(self):
        self.method = Method(self.method)
        if self.n_neighbors < 1 or self.degree < 0:
            raise ValueError("n_neighbors must be positive and degree nonnegative")


class DegenerateMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Polynomial least squares
# ---------------------------------------------------------------------------


def n_monomials(k: int, degree: int) -> int:
    return math.comb(k + degree, degree)


def monomial_exponents(k: int, degree: int) -> np.ndarray:
    """Exponent rows ordered by total degree, then lexicographically
    descending (for k=2, degree 2: 1, x1, x2, x1^2, x1 x2, x2^2)."""
    rows = []
    for total in range(degree + 1):
        block = [e for e in itertools.product(range(total, -1, -1), repeat=k) if sum(e) == total]
        rows.extend(sorted(block, reverse=True))
    return np.array(rows, dtype=int).reshape(-1, k)


def design_matrix(Z, exps: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    return np.prod(Z[..., None, :] ** exps, axis=-1)


def effective_degree(n_points: int, k: int, degree: int) -> int:
    """Largest degree <= ``degree`` whose basis fits in ``n_points`` rows."""
    while degree > 0 and n_monomials(k, degree) > n_points:
        degree -= 1
    return degree


@dataclass
class Polynomial:
    coefficients: np.ndarray
    exponents: np.ndarray

    @property
    def degree(self) -> int:
        return int(self.exponents.sum(axis=1).max(initial=0))

    def __call__(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return design_matrix(Z, self.exponents) @ self.coefficients


def polyfit_lsq(points, values, degree: int) -> Polynomial:
    """Least-squares polynomial of total degree <= ``degree``.

    The degree is lowered until the design matrix has at least as many rows
    as columns; the SVD-based solve returns the minimum-norm solution when
    the matrix is rank deficient.
    """
    Z = np.asarray(points, dtype=np.float64)
    Z = Z[:, None] if Z.ndim == 1 else Z
    y = np.asarray(values, dtype=np.float64)
    exps = monomial_exponents(Z.shape[1], effective_degree(Z.shape[0], Z.shape[1], degree))
    coef, *_ = np.linalg.lstsq(design_matrix(Z, exps), y, rcond=None)
    return Polynomial(coef, exps)


def _batched_local_fit(Zn: np.ndarray, Yn: np.ndarray, Zq: np.ndarray, degree: int) -> np.ndarray:
    """Fit one polynomial per query and evaluate it at the query.

    Zn (M, n, k) neighbour coordinates, Yn (M, n) values, Zq (M, k) queries.
    Coordinates are shifted to the query and scaled per axis before the
    fit, which leaves the least-squares polynomial unchanged but keeps the
    design matrix well conditioned; the prediction is then the constant
    coefficient.
    """
    M, n, k = Zn.shape
    U = Zn - Zq[:, None, :]
    scale = np.max(np.abs(U), axis=1, keepdims=True)
    scale[scale == 0] = 1.0
    U = U / scale
    exps = monomial_exponents(k, effective_degree(n, k, degree))
    A = design_matrix(U, exps)  # (M, n, p)
    u, sv, vt = np.linalg.svd(A, full_matrices=False)
    cutoff = np.finfo(np.float64).eps * max(n, exps.shape[0]) * sv[:, :1]
    inv = np.where(sv > cutoff, 1.0 / np.where(sv > cutoff, sv, 1.0), 0.0)
    uty = np.einsum("mnp,mn->mp", u, Yn) * inv
    # constant coefficient = first row of V applied to the scaled projections
    return np.einsum("mp,mp->m", vt[:, :, 0], uty)


# ---------------------------------------------------------------------------
# Neighbour search
# ---------------------------------------------------------------------------


def knn_select(query, points, n_neighbors: int) -> np.ndarray:
    """Indices of the ``n_neighbors`` points nearest to ``query`` (Euclidean),
    closest first, ties broken by ascending index."""
    if isinstance(points, Dataset):
        points = points.inputs
    return knn_select_batch(np.atleast_2d(query), points, n_neighbors)[0]


def knn_select_batch(queries, points, n_neighbors: int) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    points = np.asarray(points, dtype=np.float64)
    N, d = points.shape
    k = n_neighbors
    if k > N:
        raise ValueError(f"asked for {k} neighbours among {N} points")
    out = np.empty((queries.shape[0], k), dtype=np.intp)
    chunk = max(1, int(4e6 // (N * d)))
    for start in range(0, queries.shape[0], chunk):
        q = queries[start:start + chunk]
        diff = points[None, :, :] - q[:, None, :]
        dist = np.sum(diff * diff, axis=2)
        kth = np.partition(dist, k - 1, axis=1)[:, k - 1:k]
        mask = dist <= kth
        counts = mask.sum(axis=1)
        rows = np.arange(q.shape[0])
        plain = counts == k
        if plain.any():
            cand = np.nonzero(mask[plain])[1].reshape(-1, k)
            order = np.argsort(np.take_along_axis(dist[plain], cand, axis=1), axis=1, kind="stable")
            out[start + rows[plain]] = np.take_along_axis(cand, order, axis=1)
        for r in rows[~plain]:
            # ties at the k-th distance: candidates are in ascending index order
            cand = np.nonzero(mask[r])[0]
            out[start + r] = cand[np.argsort(dist[r, cand], kind="stable")[:k]]
    return out


# ---------------------------------------------------------------------------
# Projectors
# ---------------------------------------------------------------------------


class IdentityProjector:
    """Keeps the first k coordinates unchanged."""

    def __init__(self, k_star: int):
        self.k_star = k_star

    def project_active(self, x):
        return np.asarray(x, dtype=np.float64)[..., :self.k_star]


@dataclass
class ActiveSubspaceModel:
    C: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    k_star: int

    @property
    def W_A(self) -> np.ndarray:
        return self.eigenvectors[:, :self.k_star]

    def project_active(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.W_A


def fit_active_subspace(data: Dataset, k_star: int) -> ActiveSubspaceModel:
    """Leading eigenvectors of the uncentered gradient covariance."""
    if data.N < 1:
        raise ValueError("empty dataset")
    G = data.gradients
    C = G.T @ G / data.N
    C = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    # sign convention: largest-magnitude entry of each eigenvector positive
    pivots = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])]
    vecs = vecs * np.where(pivots < 0, -1.0, 1.0)
    return ActiveSubspaceModel(C, vals, vecs, k_star)


def project_active(model, x) -> np.ndarray:
    return model.project_active(x)


# ---------------------------------------------------------------------------
# Regressors
# ---------------------------------------------------------------------------


class _Local:
    def __init__(self, model, data: Dataset, cfg: RegressionConfig):
        self.model, self.data, self.cfg = model, data, cfg
        self.Z = np.atleast_2d(model.project_active(data.inputs))
        if self.Z.shape[0] != data.N:
            self.Z = self.Z.reshape(data.N, -1)
        if cfg.n_neighbors > data.N:
            raise ValueError(f"n_neighbors={cfg.n_neighbors} exceeds N={data.N}")

    def _neighbours(self, X, Zq):
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Zq = self.model.project_active(X).reshape(X.shape[0], -1)
        out = np.empty(X.shape[0])
        step = 2048
        for start in range(0, X.shape[0], step):
            sl = slice(start, start + step)
            idx = self._neighbours(X[sl], Zq[sl])
            out[sl] = _batched_local_fit(self.Z[idx], self.data.values[idx], Zq[sl], self.cfg.degree)
        return out


class SynthesizedRegressor(_Local):
    """Neighbours by distance in the original input space."""

    def _neighbours(self, X, Zq):
        return knn_select_batch(X, self.data.inputs, self.cfg.n_neighbors)


class DirectLocalRegressor(_Local):
    """Neighbours by distance between active coordinates."""

    def _neighbours(self, X, Zq):
        return knn_select_batch(Zq, self.Z, self.cfg.n_neighbors)


class GlobalRegressor:
    """One polynomial over all projected samples; fitted once."""

    def __init__(self, model, data: Dataset, cfg: RegressionConfig):
        self.model = model
        Z = model.project_active(data.inputs).reshape(data.N, -1)
        self.center = Z.mean(axis=0)
        self.scale = np.ptp(Z, axis=0) / 2
        self.scale[self.scale == 0] = 1.0
        self.poly = polyfit_lsq((Z - self.center) / self.scale, data.values, cfg.degree)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = self.model.project_active(X).reshape(X.shape[0], -1)
        return self.poly((Z - self.center) / self.scale)


class NeuralNetRegressor:
    """Tanh network regression of f on the active coordinates, trained with
    full-batch Adam under a step-decay schedule."""

    def __init__(self, model, data: Dataset, cfg: RegressionConfig):
        self.model = model
        Z = model.project_active(data.inputs).reshape(data.N, -1)
        self.z_mean, self.z_std = Z.mean(axis=0), Z.std(axis=0)
        self.z_std[self.z_std == 0] = 1.0
        self.y_mean, self.y_std = float(data.values.mean()), float(data.values.std())
        if self.y_std == 0:
            self.y_std = 1.0
        U = (Z - self.z_mean) / self.z_std
        y = ((data.values - self.y_mean) / self.y_std)[:, None]
        sizes = [Z.shape[1], *cfg.nn_hidden, 1]
        net = tc.Mlp.glorot(sizes, np.random.default_rng(cfg.nn_seed))
        theta = tc.flatten([net])
        state = AdamState.zeros(theta.size)

        def objective(th):
            (ws, bs), = tc.split_param_vars(th, [sizes])
            out, _ = tc.mlp_forward_var(ws, bs, U)
            return tc.mean(tc.square(out - y))

        for step in range(cfg.nn_steps):
            grad = tc.grad_scalar_wrt_params(objective, theta)
            lr = cfg.nn_lr0 * cfg.nn_decay ** (step // cfg.nn_decay_every)
            theta, state = adam_step(theta, grad, state, lr)
        self.net = tc.unflatten(theta, [sizes])[0]

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = self.model.project_active(X).reshape(X.shape[0], -1)
        out = tc.mlp_forward(self.net, (Z - self.z_mean) / self.z_std)[:, 0]
        return self.y_mean + self.y_std * out


_REGRESSORS = {
    Method.SYNTHESIZED: SynthesizedRegressor,
    Method.DIRECT_LOCAL: DirectLocalRegressor,
    Method.GLOBAL: GlobalRegressor,
    Method.NEURAL_NET: NeuralNetRegressor,
}


def make_regressor(model, data: Dataset, cfg: RegressionConfig | None = None):
    cfg = cfg or RegressionConfig()
    return _REGRESSORS[cfg.method](model, data, cfg)


def _predict(method, model, data, cfg, query):
    cfg = cfg or RegressionConfig()
    cfg = RegressionConfig(**{**cfg.__dict__, "method": method})
    q = np.asarray(query, dtype=np.float64)
    out = make_regressor(model, data, cfg).predict(q)
    return float(out[0]) if q.ndim == 1 else out


def predict_synthesized(model, data: Dataset, cfg: RegressionConfig | None, query):
    return _predict(Method.SYNTHESIZED, model, data, cfg, query)


def predict_direct_local(model, data: Dataset, cfg: RegressionConfig | None, query):
    return _predict(Method.DIRECT_LOCAL, model, data, cfg, query)


def predict_global(model, data: Dataset, cfg: RegressionConfig | None, query):
    return _predict(Method.GLOBAL, model, data, cfg, query)


def predict_nn(model, data: Dataset, cfg: RegressionConfig | None, query):
    return _predict(Method.NEURAL_NET, model, data, cfg, query)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class PredictionReport:
    predictions: np.ndarray
    nrmse: float
    rl1: float
    replicates: list = field(default_factory=list)


def metrics(f_true, f_pred) -> tuple[float, float]:
    """(NRMSE, RL1) of predictions against exact values."""
    f = np.asarray(f_true, dtype=np.float64)
    fh = np.asarray(f_pred, dtype=np.float64)
    if f.shape != fh.shape or f.size == 0:
        raise ValueError("f_true and f_pred must be nonempty and of equal length")
    span = f.max() - f.min()
    l1 = np.sum(np.abs(f))
    if not span > 0:
        raise DegenerateMetricError("exact values have zero range; NRMSE undefined")
    if not l1 > 0:
        raise DegenerateMetricError("exact values have zero l1 norm; RL1 undefined")
    r = f - fh
    nrmse = float(np.sqrt(np.sum(r * r)) / span / np.sqrt(f.size))
    rl1 = float(np.sum(np.abs(r)) / l1)
    return nrmse, rl1


def relative_sensitivity(model, test: Dataset) -> np.ndarray:
    """Normalised magnitude of the mean directional derivative of f along
    each transformed coordinate, averaged over the test samples."""
    if test.N == 0:
        raise ValueError("empty test set")
    t = getattr(model, "transform", model)
    s = t.directional_derivatives(test.inputs, test.gradients)
    m = np.abs(s.mean(axis=0))
    total = m.sum()
    if not total > 0:
        raise DegenerateMetricError("all mean directional derivatives vanish")
    return m / total
