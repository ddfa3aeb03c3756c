"""Axis-aligned boxes, ellipsoids, and the set arithmetic used for
constraint tightening and sublevel-set sizing.

All tightened constraint sets are boxes.  The only non-box set supported is
an ellipsoid (a quadratic sublevel set), which shows up when a terminal set
is recycled as the invariant region.  Emptiness is a value, not an error: a
Box with ``lo > hi`` on some axis is empty and propagates through the
arithmetic.
"""

from dataclasses import dataclass

import numpy as np

from .validation import as_float_vector, check_spd

__all__ = [
    "Box",
    "Ellipsoid",
    "QuadMaxResult",
    "pontryagin_diff",
    "minkowski_sum",
    "max_sublevel_in_box",
    "max_quadratic_on_box",
    "ellipsoid_pontryagin_shrink",
]

_VERTEX_DIM_LIMIT = 20


@dataclass(frozen=True)
class Box:
    """Axis-aligned box { x : lo <= x <= hi } (component-wise).

    Parameters
    ----------
    lo, hi : array_like, shape (d,)
        Lower and upper bounds.  ``lo[i] > hi[i]`` on any axis means the
        box is empty.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = as_float_vector(self.lo, "lo")
        hi = as_float_vector(self.hi, "hi", size=lo.size)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, halfwidth):
        """Origin-symmetric box with the given per-axis half-widths."""
        h = as_float_vector(halfwidth, "halfwidth")
        if (h < 0).any():
            raise ValueError("halfwidth must be non-negative")
        return cls(-h, h)

    @property
    def dim(self):
        return self.lo.size

    @property
    def is_empty(self):
        return bool((self.lo > self.hi).any())

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def halfwidth(self):
        return 0.5 * (self.hi - self.lo)

    def contains(self, x, tol=0.0):
        """Membership test; ``x`` may be a point (d,) or stacked points (N, d)."""
        if self.is_empty:
            x = np.asarray(x, dtype=float)
            shape = x.shape[:-1]
            return np.zeros(shape, dtype=bool) if shape else False
        x = np.asarray(x, dtype=float)
        ok = (x >= self.lo - tol) & (x <= self.hi + tol)
        out = ok.all(axis=-1)
        return bool(out) if out.ndim == 0 else out

    def clip(self, x):
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def vertices(self):
        """All 2^d corner points, ordered by binary index (axis 0 fastest)."""
        if self.is_empty:
            raise ValueError("empty box has no vertices")
        d = self.dim
        if d > _VERTEX_DIM_LIMIT:
            raise ValueError(f"refusing vertex enumeration in dimension {d} > {_VERTEX_DIM_LIMIT}")
        idx = np.arange(2 ** d)
        bits = (idx[:, None] >> np.arange(d)) & 1
        return np.where(bits == 1, self.hi, self.lo)

    def sample(self, rng, n):
        """Draw ``n`` uniform points from the box."""
        if self.is_empty:
            raise ValueError("cannot sample from an empty box")
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True)
class Ellipsoid:
    """Quadratic sublevel set { x : (x-center)^T shape (x-center) <= level }."""

    center: np.ndarray
    shape: np.ndarray
    level: float

    def __post_init__(self):
        c = as_float_vector(self.center, "center")
        s = check_spd(self.shape, "shape")
        if s.shape[0] != c.size:
            raise ValueError("center and shape dimensions disagree")
        lv = float(self.level)
        if lv <= 0:
            raise ValueError(f"level must be positive, got {lv}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", s)
        object.__setattr__(self, "level", lv)

    @property
    def dim(self):
        return self.center.size

    def value(self, x):
        """Evaluate the quadratic form at a point (d,) or points (N, d)."""
        d = np.asarray(x, dtype=float) - self.center
        return np.einsum("...i,ij,...j->...", d, self.shape, d)

    def contains(self, x, tol=0.0):
        out = self.value(x) <= self.level + tol
        return bool(out) if np.ndim(out) == 0 else out

    def boundary_points(self, directions):
        """Map unit directions (N, d) onto the ellipsoid boundary."""
        dirs = np.asarray(directions, dtype=float)
        L = np.linalg.cholesky(self.shape)  # shape = L L^T
        y = np.linalg.solve(L.T, dirs.T).T  # points with y^T shape y = |dirs|^2
        nrm = np.sqrt(np.einsum("ni,ij,nj->n", y, self.shape, y))
        return self.center + np.sqrt(self.level) * y / nrm[:, None]


def pontryagin_diff(a, b):
    """Pontryagin difference a a-circled-minus b for boxes.

    Returns the box of points whose Minkowski sum with ``b`` stays inside
    ``a``.  The result may be empty (``is_empty``), which is a legitimate
    value — callers decide whether emptiness is an error.
    """
    if a.dim != b.dim:
        raise ValueError("box dimensions disagree")
    if a.is_empty:
        return a
    if b.is_empty:
        raise ValueError("Pontryagin difference with an empty subtrahend is undefined")
    return Box(a.lo - b.lo, a.hi - b.hi)


def minkowski_sum(a, b):
    """Minkowski sum of two boxes (component-wise interval sum)."""
    if a.dim != b.dim:
        raise ValueError("box dimensions disagree")
    if a.is_empty or b.is_empty:
        raise ValueError("Minkowski sum with an empty box is undefined")
    return Box(a.lo + b.lo, a.hi + b.hi)


def max_sublevel_in_box(shape, box):
    """Largest omega with { x : x^T shape x <= omega } inside ``box``.

    The sublevel set is centered at the origin, so the box must contain the
    origin strictly; otherwise 0 is returned.  For each axis the nearer face
    limits the level: omega = min_i b_i^2 / (shape^-1)_ii with b_i the
    distance from the origin to the nearer face.
    """
    p = check_spd(shape, "shape")
    if box.is_empty:
        return 0.0
    if (box.lo >= 0).any() or (box.hi <= 0).any():
        return 0.0
    b = np.minimum(-box.lo, box.hi)
    pinv_diag = np.diag(np.linalg.inv(p))
    return float(np.min(b ** 2 / pinv_diag))


@dataclass(frozen=True)
class QuadMaxResult:
    """Result of maximizing a convex quadratic over a box.

    ``exact`` is True when the value came from full vertex enumeration and
    False when the dimension forced the sampled fallback bound.
    """

    value: float
    argmax: np.ndarray
    exact: bool


def max_quadratic_on_box(shape, center, box, n_samples=200_000, seed=0):
    """Maximum of (x-center)^T shape (x-center) over a box.

    A convex function attains its maximum over a box at a vertex, so for
    dimensions up to 20 the maximum is computed exactly by enumerating the
    2^d vertices.  Above that the call falls back to a sampled lower bound
    over ``n_samples`` uniform draws plus the box corners nearest/farthest
    from ``center``, flagged as inexact in the result.
    """
    p = check_spd(shape, "shape")
    c = as_float_vector(center, "center", size=box.dim)
    if box.is_empty:
        raise ValueError("cannot maximize over an empty box")
    if box.dim <= _VERTEX_DIM_LIMIT:
        v = box.vertices() - c
        vals = np.einsum("ni,ij,nj->n", v, p, v)
        i = int(np.argmax(vals))
        return QuadMaxResult(float(vals[i]), v[i] + c, True)
    # sampled fallback: uniform draws plus the per-axis farther-face corner
    rng = np.random.default_rng(seed)
    pts = box.sample(rng, n_samples)
    far = np.where(np.abs(box.lo - c) > np.abs(box.hi - c), box.lo, box.hi)
    pts = np.vstack([pts, far])
    d = pts - c
    vals = np.einsum("ni,ij,nj->n", d, p, d)
    i = int(np.argmax(vals))
    return QuadMaxResult(float(vals[i]), pts[i], False)


def ellipsoid_pontryagin_shrink(e, b):
    """Shrunk level omega with { Gamma <= omega } + b inside { Gamma <= e.level }.

    Uses the triangle-inequality bound in the norm induced by ``e.shape``:
    omega = (sqrt(level) - rho)^2 with rho the largest shape-norm over the
    vertices of ``b``.  Returns 0 when the box is too large (rho >=
    sqrt(level)).  Conservative; pair with a sampled containment check when
    the exact margin matters.
    """
    if b.dim != e.dim:
        raise ValueError("box and ellipsoid dimensions disagree")
    if b.is_empty:
        raise ValueError("shrink by an empty box is undefined")
    if np.abs(b.center).max() > 1e-12:
        raise ValueError("shrink box must be origin-symmetric")
    v = b.vertices()
    rho = float(np.sqrt(np.einsum("ni,ij,nj->n", v, e.shape, v).max()))
    root = np.sqrt(e.level) - rho
    return float(root ** 2) if root > 0 else 0.0
