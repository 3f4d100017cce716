"""Distance correlation.

The pairwise pass runs in a compiled kernel when the extension is built
(``taipan._dcor_kernel``); otherwise a NumPy implementation that forms the
double-centred distance matrices is used. ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os

import numpy as np
from scipy.spatial.distance import cdist

try:  # pragma: no cover - depends on build
    from taipan import _dcor_kernel
except ImportError:  # pragma: no cover
    _dcor_kernel = None

if os.environ.get("TAIPAN_PURE_PYTHON"):
    _dcor_kernel = None

BACKEND = "cython" if _dcor_kernel is not None else "numpy"

# squared dCor below this is rounding noise of an exactly-zero covariance
DCOR2_FLOOR = 1e-12


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("distance correlation inputs must be finite")
    return np.ascontiguousarray(a)


def _double_centered(a: np.ndarray) -> np.ndarray:
    d = cdist(a, a)
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def dcov_terms_numpy(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    a = _double_centered(x)
    b = _double_centered(y)
    return float((a * b).mean()), float((a * a).mean()), float((b * b).mean())


def dcov_terms(x, y, backend: str | None = None) -> tuple[float, float, float]:
    """Squared distance covariance and the two squared distance variances."""
    x = _as_2d(x)
    y = _as_2d(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row mismatch: {x.shape[0]} vs {y.shape[0]}")
    backend = backend or BACKEND
    if backend == "cython":
        if _dcor_kernel is None:
            raise RuntimeError("compiled dCor kernel is not available")
        return _dcor_kernel.dcov_terms(x, y)
    if backend == "numpy":
        return dcov_terms_numpy(x, y)
    raise ValueError(f"unknown backend {backend!r}")


def distance_correlation(a, b, backend: str | None = None) -> float:
    """Sample distance correlation between two samples of equal size.

    Rows are observations; 1-D inputs are treated as single columns. Returns
    0 when either sample has zero distance variance (e.g. constant input) and
    when the squared value is below ``DCOR2_FLOOR``.
    """
    x = _as_2d(a)
    y = _as_2d(b)
    if x.shape[0] < 2:
        raise ValueError("distance correlation needs at least two observations")
    dcov2, dvar_x, dvar_y = dcov_terms(x, y, backend=backend)
    if dvar_x <= 0.0 or dvar_y <= 0.0:
        return 0.0
    r2 = max(dcov2, 0.0) / np.sqrt(dvar_x * dvar_y)
    if r2 < DCOR2_FLOOR:
        return 0.0
    return float(np.sqrt(min(r2, 1.0)))
