"""Data generation and the Adam + L-BFGS training driver."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search

from . import losses
from .losses import Dataset, HyperParams
from .tensor_core import NonFiniteError

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss during training."""

    def __init__(self, step: int, phase: str, parts: dict | None, cause: Exception):
        self.step, self.phase, self.parts = step, phase, parts
        super().__init__(f"training aborted at {phase} step {step}: {cause} (last terms: {parts})")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def lhs_sample(N: int, d: int, lo, hi, seed) -> np.ndarray:
    """Latin hypercube sample of N points in the box [lo, hi].

    Each dimension is cut into N equal strata; every stratum receives one
    point placed uniformly inside it, and the stratum order is an
    independent random permutation per dimension.
    """
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (d,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (d,))
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    if not np.all(lo < hi):
        raise ValueError("lower bounds must be strictly below upper bounds")
    rng = np.random.default_rng(seed)
    strata = np.stack([rng.permutation(N) for _ in range(d)], axis=1)
    unit = (strata + rng.uniform(size=(N, d))) / N
    return np.clip(lo + (hi - lo) * unit, lo, hi)


def build_dataset(fn, N: int, seed) -> Dataset:
    """LHS inputs over the function's domain with exact values and gradients."""
    X = lhs_sample(N, fn.d, fn.lo, fn.hi, seed)
    values, grads = fn.value_and_grad(X)
    return Dataset(X, values, grads, fn.lo, fn.hi, name=fn.name)


def uniform_sample(M: int, lo, hi, seed) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return lo + (hi - lo) * rng.uniform(size=(M, lo.size))


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new theta, new state)."""
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(new)):
        raise NonFiniteError("non-finite Adam update")
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


@dataclass
class LbfgsResult:
    theta: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    status: str  # "threshold", "gtol", "max_steps" or "line_search_failed"
    history: list[float] = field(default_factory=list)


def lbfgs_minimize(fun_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]], theta0,
                   max_steps: int = 200, memory: int = 10, stop_threshold: float | None = None,
                   gtol: float = 1e-12, c1: float = 1e-4, c2: float = 0.9,
                   callback: Callable[[int, np.ndarray, float], None] | None = None) -> LbfgsResult:
    """Limited-memory BFGS with the two-loop recursion and a strong-Wolfe
    line search.  A failed line search ends the run and returns the best
    iterate seen."""
    cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            if len(cache) > 8:
                cache.clear()
            f, g = fun_and_grad(x)
            cache[key] = (float(f), np.asarray(g, dtype=np.float64))
        return cache[key]

    x = np.array(theta0, dtype=np.float64)
    f, g = evaluate(x)
    history = [f]
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    old_old_f = None
    status = "max_steps"
    n_iter = 0
    for n_iter in range(1, max_steps + 1):
        if stop_threshold is not None and f <= stop_threshold:
            status, n_iter = "threshold", n_iter - 1
            break
        if np.linalg.norm(g) <= gtol:
            status, n_iter = "gtol", n_iter - 1
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_list), reversed(y_list)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a))
        if y_list:
            q *= (s_list[-1] @ y_list[-1]) / (y_list[-1] @ y_list[-1])
        else:
            q *= min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        direction = -q
        if g @ direction >= 0:
            s_list.clear()
            y_list.clear()
            direction = -g

        with warnings.catch_warnings():
            # non-convergence is reported through the None step
            warnings.simplefilter("ignore")
            step, *_, f_new, _, _ = line_search(
                lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], x, direction, g, f, old_old_f,
                c1=c1, c2=c2, maxiter=30)
        if step is None or f_new is None or not np.isfinite(f_new) or f_new > f:
            status, n_iter = "line_search_failed", n_iter - 1
            log.debug("L-BFGS line search failed at iteration %d", n_iter)
            break
        x_new = x + step * direction
        f_new, g_new = evaluate(x_new)
        s_vec, y_vec = x_new - x, g_new - g
        if s_vec @ y_vec > 1e-12 * (np.linalg.norm(s_vec) * np.linalg.norm(y_vec) + 1e-300):
            s_list.append(s_vec)
            y_list.append(y_vec)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        old_old_f = f
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if callback is not None:
            callback(n_iter, x, f)
    else:
        if stop_threshold is not None and f <= stop_threshold:
            status = "threshold"
        elif np.linalg.norm(g) <= gtol:
            status = "gtol"
    return LbfgsResult(x, f, g, n_iter, status, history)


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    adam_lr0: float = 1e-3
    adam_decay: float = 0.7
    adam_decay_every: int = 5000
    adam_max_steps: int = 60000
    lbfgs_max_steps: int = 200
    lbfgs_memory: int = 10
    stop_threshold: float = 5e-5
    seed: int = 0
    # None = full batch; otherwise minibatches drawn per Adam step
    batch_size: int | None = None
    # None = every step when d == 2, every 10 steps otherwise
    history_every: int | None = None
    jacobian_mode: str | None = None

    def __post_init__(self):
        if not self.stop_threshold > 0:
            raise ValueError("stop_threshold must be positive")
        if not 0.0 < self.adam_decay <= 1.0:
            raise ValueError("adam_decay must lie in (0, 1]")

    def learning_rate(self, step: int) -> float:
        return self.adam_lr0 * self.adam_decay ** (step // self.adam_decay_every)


@dataclass
class HistoryRecord:
    step: int
    phase: str
    total: float
    L1: float
    L2: float
    L3: float


class LossHistory:
    columns = ("step", "phase", "total", "L1", "L2", "L3")

    def __init__(self):
        self.records: list[HistoryRecord] = []

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, step: int, phase: str, total: float, parts: dict) -> None:
        if self.records and step <= self.records[-1].step:
            raise ValueError("history steps must increase")
        self.records.append(HistoryRecord(step, phase, total, parts["L1"], parts["L2"], parts["L3"]))

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.records:
            w.writerow([r.step, r.phase, repr(r.total), repr(r.L1), repr(r.L2), repr(r.L3)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            fh.write(self.to_csv())


@dataclass
class TrainedModel:
    """A frozen transform with the data and settings it was trained on."""

    transform: object
    data: Dataset
    hp: HyperParams
    meta: dict = field(default_factory=dict)

    @property
    def k_star(self) -> int:
        return self.hp.k_star

    @property
    def d(self) -> int:
        return self.transform.d

    def project_active(self, x) -> np.ndarray:
        """First k* components of the forward transform."""
        z = self.transform.forward(x)
        return z[..., :self.hp.k_star]


def train(t, data: Dataset, hp: HyperParams, cfg: TrainConfig | None = None):
    """Adam with step decay, then L-BFGS; stops once the total loss reaches
    ``cfg.stop_threshold``.  Returns (TrainedModel, LossHistory)."""
    cfg = cfg or TrainConfig()
    every = cfg.history_every or (1 if data.d == 2 else 10)
    history = LossHistory()
    theta = t.params()
    rng = np.random.default_rng([cfg.seed, 0xBA7C])
    mode = cfg.jacobian_mode
    minibatch = cfg.batch_size is not None and cfg.batch_size < data.N

    last_parts: dict | None = None
    step = 0
    phase = "Adam"
    stopped = False
    final_total = math.inf

    def evaluate(theta_, batch):
        return losses.loss_and_gradient(t.with_params(theta_), batch, hp, mode)

    state = AdamState.zeros(theta.size)
    try:
        for step in range(cfg.adam_max_steps):
            batch = data.subset(np.sort(rng.choice(data.N, cfg.batch_size, replace=False))) if minibatch else data
            total, parts, grad = evaluate(theta, batch)
            last_parts = parts
            done = total <= cfg.stop_threshold
            if done or step % every == 0:
                history.append(step, phase, total, parts)
            if done:
                stopped, final_total = True, total
                break
            theta, state = adam_step(theta, grad, state, cfg.learning_rate(step))
        else:
            step = cfg.adam_max_steps

        if not stopped:
            phase = "LBFGS"
            base = step
            parts_cache: dict[bytes, dict] = {}

            def fun_and_grad(x):
                total_, parts_, grad_ = evaluate(x, data)
                parts_cache.clear()
                parts_cache[x.tobytes()] = parts_
                return total_, grad_

            def record(it, x, f):
                nonlocal last_parts
                parts_ = parts_cache.get(x.tobytes()) or evaluate(x, data)[1]
                last_parts = parts_
                if it % every == 0 or f <= cfg.stop_threshold or it == cfg.lbfgs_max_steps:
                    history.append(base + it, phase, f, parts_)

            init_total, init_parts, _ = evaluate(theta, data)
            history.append(base, phase, init_total, init_parts)
            res = lbfgs_minimize(fun_and_grad, theta, max_steps=cfg.lbfgs_max_steps, memory=cfg.lbfgs_memory,
                                 stop_threshold=cfg.stop_threshold, callback=record)
            theta, final_total = res.theta, res.fun
            step = base + res.n_iter
            stopped = res.status == "threshold"
            if res.n_iter and history.records[-1].step != step:
                history.append(step, phase, res.fun, last_parts)
    except NonFiniteError as exc:
        raise TrainingAborted(step, phase, last_parts, exc) from exc

    trained = t.with_params(theta)
    meta = {"final_loss": float(final_total), "steps": int(step), "seed": int(cfg.seed),
            "phase": phase, "reached_threshold": bool(stopped)}
    log.info("training finished: %s", meta)
    return TrainedModel(trained, data, hp, meta), history
