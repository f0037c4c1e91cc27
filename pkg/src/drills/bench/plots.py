"""Tabular data behind the quiver and regression plots (no rendering)."""

from __future__ import annotations

import csv

import numpy as np

from ..regression import RegressionConfig, make_regressor, metrics
from ..training import uniform_sample

QUIVER_COLUMNS = ("x1", "x2", "df_dx1", "df_dx2", "J2_1", "J2_2", "cos_angle")


def emit_quiver_data(model, fn, grid: int = 15) -> np.ndarray:
    """Gradient field of f and the second Jacobian column of the inverse map
    on a uniform ``grid x grid`` lattice, with the cosine between them.

    Returns an array of shape (grid**2, 7) in :data:`QUIVER_COLUMNS` order.
    """
    t = getattr(model, "transform", model)
    if t.d != 2 or fn.d != 2:
        raise ValueError("quiver data needs a two-dimensional problem")
    axis1 = np.linspace(fn.lo[0], fn.hi[0], grid)
    axis2 = np.linspace(fn.lo[1], fn.hi[1], grid)
    X = np.array([(a, b) for b in axis2 for a in axis1])
    _, G = fn.value_and_grad(X)
    J2 = t.jacobian_at_inputs(X)[:, :, 1]
    norms = np.linalg.norm(G, axis=1) * np.linalg.norm(J2, axis=1)
    dots = np.sum(G * J2, axis=1)
    cos = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return np.column_stack([X, G, J2, np.clip(cos, -1.0, 1.0)])


def mean_abs_cos(quiver_rows: np.ndarray) -> float:
    return float(np.mean(np.abs(quiver_rows[:, 6])))


def emit_regression_data(model, fn, cfg: RegressionConfig | None, n_points: int = 400, seed=0,
                         data=None) -> np.ndarray:
    """Rows (z_A..., f_exact, f_pred) for uniformly drawn domain points."""
    data = data if data is not None else model.data
    X = uniform_sample(n_points, fn.lo, fn.hi, seed)
    f_exact = fn.value(X)
    f_pred = make_regressor(model, data, cfg or RegressionConfig()).predict(X)
    Z = model.project_active(X).reshape(n_points, -1)
    return np.column_stack([Z, f_exact, f_pred])


def regression_columns(k_star: int) -> list[str]:
    return [f"z{i + 1}" for i in range(k_star)] + ["f_exact", "f_pred"]


def regression_metrics(rows: np.ndarray) -> tuple[float, float]:
    return metrics(rows[:, -2], rows[:, -1])


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
