"""Small input-validation helpers shared across the package.

All helpers either return a normalized numpy value or raise ValueError with
a message naming the offending argument.
"""

import numpy as np

__all__ = [
    "as_float_vector",
    "as_float_matrix",
    "check_spd",
    "check_nonnegative_matrix",
    "check_in_range",
    "check_positive_int",
]


def as_float_vector(x, name, size=None):
    """Coerce ``x`` to a 1-D float64 array, optionally of fixed ``size``."""
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {v.shape}")
    if size is not None and v.size != size:
        raise ValueError(f"{name} must have {size} entries, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_float_matrix(m, name, shape=None):
    """Coerce ``m`` to a 2-D float64 array, optionally of fixed ``shape``."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    if shape is not None and a.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_spd(m, name, sym_tol=1e-8):
    """Validate that ``m`` is symmetric positive definite; return it symmetrized.

    Symmetry is required within ``sym_tol`` (absolute, per entry); positive
    definiteness is checked through the eigenvalues of the symmetrized matrix.
    """
    a = as_float_matrix(m, name)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if np.abs(a - a.T).max() > sym_tol:
        raise ValueError(f"{name} must be symmetric within {sym_tol}")
    a = 0.5 * (a + a.T)
    w = np.linalg.eigvalsh(a)
    if w.min() <= 0.0:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {w.min():.3e})")
    return a


def check_nonnegative_matrix(m, name):
    a = as_float_matrix(m, name)
    if (a < 0).any():
        raise ValueError(f"{name} must be entry-wise non-negative")
    return a


def check_in_range(x, name, lo=None, hi=None, lo_open=False, hi_open=False):
    """Validate a scalar against an interval; return it as float."""
    v = float(x)
    if not np.isfinite(v):
        raise ValueError(f"{name} must be finite, got {v}")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        cmp = ">" if lo_open else ">="
        raise ValueError(f"{name} must be {cmp} {lo}, got {v}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        cmp = "<" if hi_open else "<="
        raise ValueError(f"{name} must be {cmp} {hi}, got {v}")
    return v


def check_positive_int(x, name):
    v = int(x)
    if v != x or v < 1:
        raise ValueError(f"{name} must be a positive integer, got {x!r}")
    return v
