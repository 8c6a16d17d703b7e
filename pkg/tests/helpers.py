"""Finite-difference oracles shared by the test modules."""

import numpy as np

from kcgg import autodiff as ad

H = 1e-5
ABS_TOL = 1e-6
REL_TOL = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def grad_matches(analytic, numeric, abs_tol: float = ABS_TOL, rel_tol: float = REL_TOL) -> bool:
    """Entrywise |a - n| <= max(abs_tol, rel_tol * max(|a|, |n|))."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    bound = np.maximum(abs_tol, rel_tol * np.maximum(np.abs(a), np.abs(n)))
    return bool(np.all(np.abs(a - n) <= bound))


def worst_ratio(analytic, numeric, abs_tol: float = ABS_TOL, rel_tol: float = REL_TOL) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    bound = np.maximum(abs_tol, rel_tol * np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / bound))


def check_scalar_fn(build, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(autodiff, finite-difference) gradients of ``build(node) -> scalar node`` at ``x``."""
    analytic = ad.grad_of(build, x)
    numeric = numeric_grad(lambda v: float(build(ad.constant(v)).value), x)
    return analytic, numeric


def richardson_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences at h and h/2 combined to cancel the h^2 error term."""
    coarse = numeric_grad(f, x, h)
    fine = numeric_grad(f, x, h / 2)
    return (4.0 * fine - coarse) / 3.0
