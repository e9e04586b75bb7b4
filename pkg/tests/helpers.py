"""Shared independent oracles for the test suite.

These deliberately avoid the library's own fast paths: derivatives are
cross-checked by central finite differences, matrix norms by dense SVD, and
roots by bisection, so a test never validates an implementation against
itself.
"""

from __future__ import annotations

import numpy as np

from sdaekit.expr import Expression, evaluate, free_variables


def central_fd(e: Expression, name: str, point: dict[str, float]) -> float:
    """Central finite-difference derivative of e at the given point."""
    h = 1e-6 * max(1.0, abs(point.get(name, 0.0)))
    hi = dict(point)
    lo = dict(point)
    hi[name] = point.get(name, 0.0) + h
    lo[name] = point.get(name, 0.0) - h
    return (evaluate(e, hi) - evaluate(e, lo)) / (2.0 * h)


def random_points(e_or_names, count: int, lo: float, hi: float, seed: int) -> list[dict[str, float]]:
    """Deterministic random binding dicts over [lo, hi] per variable."""
    if isinstance(e_or_names, (list, tuple, set, frozenset)):
        names = sorted(e_or_names)
    else:
        names = sorted(free_variables(e_or_names))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(count, max(len(names), 1)))
    return [{nm: float(pts[k, i]) for i, nm in enumerate(names)} for k in range(count)]


def bisect_root(fn, lo: float, hi: float, tol: float = 1e-13) -> float:
    """Plain bisection; requires a sign change on [lo, hi]."""
    flo, fhi = fn(lo), fn(hi)
    assert flo * fhi <= 0.0, "no sign change for bisection oracle"
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if abs(fm) < tol or hi - lo < tol:
            return mid
        if flo * fm <= 0.0:
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


def spectral_norm(mat: np.ndarray) -> float:
    """Largest singular value via dense SVD."""
    return float(np.linalg.svd(np.asarray(mat, dtype=float), compute_uv=False)[0])
