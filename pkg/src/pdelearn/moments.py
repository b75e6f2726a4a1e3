"""Moment algebra for convolution stencils.

The (p, q)-moment of an n x n filter with centered integer offsets is

    m[p, q] = 1/(p! q!) * sum_k k1^p k2^q  w[k1, k2],   0 <= p, q < n,

with k1 the x-offset and k2 the y-offset.  Collecting the scaled powers in
a Vandermonde-with-factorials matrix V (V[p, i] = (i-r)^p / p!) gives

    moments = V @ weights.T @ V.T

(the transpose appears because weight arrays are stored image-style with
y-offsets along rows).  V is invertible for any filter size since the nodes
-r..r are distinct, so moments and weights are two coordinate systems for
the same object.  Learnable filters are parameterized by their free moment
entries; the fixed entries implement the hard constraints that tie each
filter to one differential operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .fields import Field, convolve

DEFAULT_TOL = 1e-10


@lru_cache(maxsize=None)
def vandermonde(n: int) -> np.ndarray:
    r = (n - 1) // 2
    nodes = np.arange(n) - r
    V = np.empty((n, n))
    for p in range(n):
        V[p] = nodes.astype(float) ** p / math.factorial(p)
    return V


@lru_cache(maxsize=None)
def _vandermonde_inv_frac(n: int) -> tuple:
    # exact rational inverse: entries are ratios of small integers, so the
    # rounded float inverses below are correct to the last bit
    r = (n - 1) // 2
    nodes = [i - r for i in range(n)]
    A = [
        [Fraction(nodes[i] ** p, math.factorial(p)) for i in range(n)]
        + [Fraction(int(p == j)) for j in range(n)]
        for p in range(n)
    ]
    for col in range(n):
        piv = next(k for k in range(col, n) if A[k][col] != 0)
        A[col], A[piv] = A[piv], A[col]
        pv = A[col][col]
        A[col] = [x / pv for x in A[col]]
        for k in range(n):
            if k != col and A[k][col] != 0:
                f = A[k][col]
                A[k] = [x - f * y for x, y in zip(A[k], A[col])]
    return tuple(tuple(A[i][n + j] for j in range(n)) for i in range(n))


@lru_cache(maxsize=None)
def vandermonde_inv(n: int) -> np.ndarray:
    rows = _vandermonde_inv_frac(n)
    return np.array([[float(f) for f in row] for row in rows])


@lru_cache(maxsize=None)
def _vandermonde_ld(n: int) -> np.ndarray:
    r = (n - 1) // 2
    nodes = (np.arange(n) - r).astype(np.longdouble)
    V = np.empty((n, n), dtype=np.longdouble)
    for p in range(n):
        V[p] = nodes**p / math.factorial(p)
    return V


@lru_cache(maxsize=None)
def _vandermonde_inv_ld(n: int) -> np.ndarray:
    rows = _vandermonde_inv_frac(n)
    return np.array(
        [
            [np.longdouble(f.numerator) / np.longdouble(f.denominator) for f in row]
            for row in rows
        ],
        dtype=np.longdouble,
    )


def moment_matrix(weights: np.ndarray) -> np.ndarray:
    """Scaled moment matrix of a centered odd-sized filter.

    Computed in extended precision; the roundtrip with filter_from_moments
    is then limited only by the float64 storage of the moments themselves.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    if w.shape != (n, n) or n % 2 == 0:
        raise ValueError("expected a square odd-sized weight array")
    V = _vandermonde_ld(n)
    return np.asarray(V @ w.T.astype(np.longdouble) @ V.T, dtype=np.float64)


def filter_from_moments(m: np.ndarray) -> np.ndarray:
    """The unique filter whose moment matrix equals ``m``."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if m.shape != (n, n) or n % 2 == 0:
        raise ValueError("expected a square odd-sized moment matrix")
    Vinv = _vandermonde_inv_ld(n)
    return np.asarray(Vinv @ m.T.astype(np.longdouble) @ Vinv.T, dtype=np.float64)


def raw_moment(weights: np.ndarray, beta: tuple[int, int],
               center: tuple[int, int] | None = None) -> float:
    """Unscaled moment sum_k k1^b1 k2^b2 w[k] for an arbitrary origin.

    ``center`` is the (row, col) index of the zero offset; defaults to the
    middle entry, which requires an odd side length.
    """
    w = np.asarray(weights, dtype=np.float64)
    rows, cols = w.shape
    if center is None:
        if rows % 2 == 0 or cols % 2 == 0:
            raise ValueError("even-sized filters need an explicit center")
        center = (rows // 2, cols // 2)
    cy, cx = center
    k2 = (np.arange(rows) - cy).astype(float)
    k1 = (np.arange(cols) - cx).astype(float)
    b1, b2 = beta
    return float((k2**b2) @ w @ (k1**b1))


@dataclass(frozen=True)
class SumRules:
    """Detected sum-rule structure of a filter (orders follow (x, y) indexing)."""

    alpha: tuple[int, int]
    total: tuple[int, int]  # (K, J+1)
    alpha_moment: float


def sum_rule_order(weights: np.ndarray, tol: float = DEFAULT_TOL,
                   center: tuple[int, int] | None = None,
                   max_level: int | None = None) -> SumRules | None:
    """Classify which moments of a filter vanish.

    Returns the multi-index alpha of the single surviving moment at the first
    non-vanishing level, and (K, J+1) where all moments of total order < K
    vanish except the alpha one.  Returns None (with no exception) when two
    moments survive at the same level, in which case no single differential
    operator can be assigned.  K is scanned up to ``max_level`` (default 2n)
    and reported capped if every level below the cap vanishes.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    w = np.asarray(weights, dtype=np.float64)
    n = max(w.shape)
    if max_level is None:
        max_level = 2 * n
    scale = max(np.abs(w).sum(), 1.0)

    alpha = None
    for level in range(max_level + 1):
        nonzero = [
            (b1, level - b1)
            for b1 in range(level + 1)
            if abs(raw_moment(w, (b1, level - b1), center)) > tol * scale
        ]
        if alpha is None:
            if len(nonzero) == 1:
                alpha = nonzero[0]
            elif len(nonzero) > 1:
                return None
        else:
            if nonzero:
                K = level
                return SumRules(alpha, (K, alpha[0] + alpha[1] + 1),
                                raw_moment(w, alpha, center))
    if alpha is None:
        return None
    return SumRules(alpha, (max_level, alpha[0] + alpha[1] + 1),
                    raw_moment(w, alpha, center))


@dataclass(frozen=True)
class ConstraintPattern:
    """Per-entry freeze pattern of a moment matrix.

    ``fixed`` marks constrained entries and ``values`` holds their target
    moments; everything else is free.
    """

    fixed: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fixed, dtype=bool)
        v = np.asarray(self.values, dtype=np.float64)
        if f.shape != v.shape or f.shape[0] != f.shape[1]:
            raise ValueError("pattern arrays must be square and congruent")
        f.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "fixed", f)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.fixed.shape[0]

    @property
    def n_free(self) -> int:
        return int((~self.fixed).sum())

    def free_indices(self) -> np.ndarray:
        """(T, 2) array of free entry positions in row-major order."""
        return np.argwhere(~self.fixed)


def derivative_pattern(order: tuple[int, int], n: int) -> ConstraintPattern:
    """Constraints tying an n x n filter to the (i, j) derivative.

    Every moment entry with 1-based position k1 + k2 <= i + j + 2 is fixed to
    zero except the (i+1, j+1) entry which is fixed to one.
    """
    i, j = order
    if n % 2 == 0:
        raise ValueError("learned filters have odd side length")
    if i < 0 or j < 0:
        raise ValueError("derivative orders must be non-negative")
    if i + j >= n:
        raise ValueError(f"({i},{j}) derivative is not representable by an "
                         f"{n}x{n} filter")
    fixed = np.zeros((n, n), dtype=bool)
    values = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if (a + 1) + (b + 1) <= i + j + 2:
                fixed[a, b] = True
    fixed[i, j] = True
    values[i, j] = 1.0
    return ConstraintPattern(fixed, values)


def averaging_pattern(n: int) -> ConstraintPattern:
    """Averaging filters only pin the (0, 0)-moment to one."""
    if n % 2 == 0:
        raise ValueError("learned filters have odd side length")
    fixed = np.zeros((n, n), dtype=bool)
    values = np.zeros((n, n))
    fixed[0, 0] = True
    values[0, 0] = 1.0
    return ConstraintPattern(fixed, values)


def frozen_pattern(order: tuple[int, int], n: int) -> ConstraintPattern:
    """Fully determined pattern: single unit moment, all else fixed to zero."""
    i, j = order
    if i + j >= n:
        raise ValueError(f"({i},{j}) derivative is not representable by an "
                         f"{n}x{n} filter")
    fixed = np.ones((n, n), dtype=bool)
    values = np.zeros((n, n))
    values[i, j] = 1.0
    return ConstraintPattern(fixed, values)


def frozen_filter(order: tuple[int, int], n: int) -> np.ndarray:
    """Classical finite-difference stencil for the (i, j) derivative."""
    p = frozen_pattern(order, n)
    return filter_from_moments(p.values)


def constrained_parameterization(pattern: ConstraintPattern,
                                 free_values: np.ndarray) -> np.ndarray:
    """Weights of the filter whose moment matrix realizes the pattern.

    Free entries are filled row-major from ``free_values``; the map from
    free values to weights is a constant linear bijection onto the
    constraint-satisfying affine subspace.
    """
    free_values = np.asarray(free_values, dtype=np.float64)
    if free_values.shape != (pattern.n_free,):
        raise ValueError(
            f"expected {pattern.n_free} free values, got {free_values.shape}"
        )
    m = np.array(pattern.values)
    if pattern.n_free:
        m[~pattern.fixed] = free_values
    return filter_from_moments(m)


def moment_gradient(pattern: ConstraintPattern,
                    weight_grad: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. filter weights back to the free moment entries."""
    n = pattern.n
    Vinv = vandermonde_inv(n)
    g_m = Vinv.T @ np.asarray(weight_grad).T @ Vinv
    return g_m[~pattern.fixed]


def check_pattern(weights: np.ndarray, pattern: ConstraintPattern,
                  tol: float = DEFAULT_TOL) -> list[str]:
    """List of violated fixed moments (empty when the pattern is satisfied)."""
    m = moment_matrix(weights)
    bad = []
    for a, b in np.argwhere(pattern.fixed):
        err = abs(m[a, b] - pattern.values[a, b])
        if err > tol:
            bad.append(f"moment ({a},{b}) = {m[a, b]:.3e}, "
                       f"expected {pattern.values[a, b]:g} (err {err:.1e})")
    return bad


def save_filter(path, weights: np.ndarray) -> None:
    """Serialize a filter as a PDF1 field with nx = ny = n (unit spacing)."""
    from .fields import Grid2D, write_pdf1

    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    grid = Grid2D(n, n, lx=float(n), ly=float(n))
    write_pdf1(path, Field(grid, w))


def load_filter(path) -> np.ndarray:
    from .fields import read_pdf1

    f = read_pdf1(path)
    if f.grid.nx != f.grid.ny:
        raise ValueError(f"{path}: filter files must be square")
    return np.array(f.values)


def format_filter(weights: np.ndarray, name: str = "filter") -> str:
    """Text dump of a filter's weights next to its moment matrix."""
    w = np.asarray(weights, dtype=np.float64)
    lines = [f"{name} ({w.shape[0]}x{w.shape[1]})", "weights:"]
    for row in w:
        lines.append("  " + " ".join(f"{v:+12.6e}" for v in row))
    lines.append("moment matrix:")
    for row in moment_matrix(w):
        lines.append("  " + " ".join(f"{v:+12.6e}" for v in row))
    return "\n".join(lines)


def apply_derivative(u: Field, weights: np.ndarray, order: tuple[int, int],
                     check: bool = True, tol: float = DEFAULT_TOL) -> Field:
    """Approximate the (i, j) partial derivative of a field.

    The filter is applied index-reversed (a correlation), which is what makes
    a unit (i, j)-moment produce +d^{i+j}u/dx^i dy^j, and the result is scaled
    by 1/(dx^i dy^j).
    """
    i, j = order
    w = np.asarray(weights, dtype=np.float64)
    if check:
        bad = check_pattern(w, derivative_pattern(order, w.shape[0]), tol)
        if bad:
            raise ValueError(
                f"filter does not satisfy the ({i},{j}) derivative "
                "constraints: " + "; ".join(bad)
            )
    out = convolve(u, w[::-1, ::-1])
    scale = u.grid.dx**i * u.grid.dy**j
    return u.with_values(out.values / scale)
