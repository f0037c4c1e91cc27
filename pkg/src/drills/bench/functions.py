"""Benchmark target functions with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DOMAINS = {"A": (0.0, 1.0), "B": (-1.0, 1.0)}


class UnknownFunctionError(KeyError):
    pass


def _f1(X, p):
    return X[:, 0] ** 2 + X[:, 1] ** 2, 2.0 * X


def _f2(X, p):
    x1, x2 = X[:, 0], X[:, 1]
    val = 0.625 * x1 ** 2 + 0.625 * x2 ** 2 - 0.75 * x1 * x2
    return val, np.stack([1.25 * x1 - 0.75 * x2, 1.25 * x2 - 0.75 * x1], axis=1)


def _f3(X, p):
    return X[:, 0] ** 2 - X[:, 1] ** 2, np.stack([2.0 * X[:, 0], -2.0 * X[:, 1]], axis=1)


def _f4(X, p):
    return np.sum(X * X, axis=1), 2.0 * X


def _f5(X, p):
    r = np.sum(X * X, axis=1)
    return np.sin(r), 2.0 * np.cos(r)[:, None] * X


def _f6(X, p):
    q = 1.0 / (1.0 + X * X)
    val = np.prod(q, axis=1)
    return val, val[:, None] * (-2.0 * X * q)


def _f7(X, p):
    sign = np.ones(X.shape[1])
    sign[-1] = -1.0
    return X * X @ sign, 2.0 * X * sign


def _const(X, p):
    return np.full(X.shape[0], float(p.get("c", 1.0))), np.zeros_like(X)


def _ridge(X, p):
    a = np.asarray(p["a"], dtype=np.float64)
    u = X @ a
    return u * u, 2.0 * u[:, None] * a


_REGISTRY: dict[str, tuple[Callable, int | None]] = {
    "f1": (_f1, 2), "f2": (_f2, 2), "f3": (_f3, 2),
    "f4": (_f4, None), "f5": (_f5, None), "f6": (_f6, None), "f7": (_f7, None),
    "const": (_const, None), "ridge": (_ridge, None),
}

FUNCTION_NAMES = tuple(_REGISTRY)


@dataclass
class TestFunction:
    name: str
    d: int
    domain: str = "A"
    params: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.name not in _REGISTRY:
            raise UnknownFunctionError(f"unknown test function {self.name!r}; known: {', '.join(FUNCTION_NAMES)}")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {sorted(DOMAINS)}, got {self.domain!r}")
        fixed = _REGISTRY[self.name][1]
        if fixed is not None and self.d != fixed:
            raise ValueError(f"{self.name} is defined for d={fixed} only")
        if self.name == "ridge" and "a" not in self.params:
            a = np.arange(1.0, self.d + 1.0)
            self.params["a"] = a / np.linalg.norm(a)

    @property
    def lo(self) -> np.ndarray:
        return np.full(self.d, DOMAINS[self.domain][0])

    @property
    def hi(self) -> np.ndarray:
        return np.full(self.d, DOMAINS[self.domain][1])

    def value_and_grad(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        Xb = X[None] if single else X
        if Xb.shape[1] != self.d:
            raise ValueError(f"{self.name} expects inputs of length {self.d}, got {Xb.shape[1]}")
        val, grad = _REGISTRY[self.name][0](Xb, self.params)
        return (val[0], grad[0]) if single else (val, grad)

    def value(self, X):
        return self.value_and_grad(X)[0]

    def gradient(self, X):
        return self.value_and_grad(X)[1]


def eval_test_function(name: str, x, d: int | None = None, domain: str = "A", **params):
    """(value, gradient) of a registered function at a single point or batch."""
    x = np.asarray(x, dtype=np.float64)
    return TestFunction(name, d or x.shape[-1], domain, params).value_and_grad(x)
