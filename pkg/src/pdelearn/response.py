"""Response-model building blocks: variable coefficients and the source term.

Coefficient fields are piecewise-quadratic interpolants of a coarse control
grid.  On each cell the two local parabolas through neighboring control
triples are blended linearly, which keeps the surface C1, reproduces any
global quadratic sampled at the control nodes, and stays linear in the
control values.  The source model is a value-continuous piecewise-quartic
on a fixed regular grid of the scalar u axis, also linear in its
parameters.
"""

from __future__ import annotations

import logging

import numpy as np

from .fields import Field, Grid2D

log = logging.getLogger(__name__)


def interp_matrix_1d(xs: np.ndarray, m: int, length: float) -> np.ndarray:
    """Rows of blended-parabola weights over m control nodes spanning [0, length]."""
    if m < 3:
        raise ValueError("need at least 3 control nodes per axis")
    xs = np.asarray(xs, dtype=np.float64)
    h = length / (m - 1)
    E = np.zeros((xs.size, m))
    cell = np.clip((xs // h).astype(int), 0, m - 2)
    frac = xs / h - cell
    for row, (c, w) in enumerate(zip(cell, frac)):
        for anchor, blend in ((min(max(c, 1), m - 2), 1.0 - w),
                              (min(max(c + 1, 1), m - 2), w)):
            if blend == 0.0:
                continue
            s = xs[row] / h - anchor
            E[row, anchor - 1] += blend * 0.5 * s * (s - 1.0)
            E[row, anchor] += blend * (1.0 - s * s)
            E[row, anchor + 1] += blend * 0.5 * s * (s + 1.0)
    return E


class CoefficientInterp:
    """Maps (m x m) control values to a full grid field, linearly."""

    def __init__(self, grid: Grid2D, m: int):
        self.grid = grid
        self.m = m
        x = np.arange(grid.nx) * grid.dx
        y = np.arange(grid.ny) * grid.dy
        self.ex = interp_matrix_1d(x, m, grid.lx)  # (nx, m)
        self.ey = interp_matrix_1d(y, m, grid.ly)  # (ny, m)

    def evaluate(self, control: np.ndarray) -> np.ndarray:
        """Field values (ny, nx); control is (m, m) with y along rows."""
        return self.ey @ control @ self.ex.T

    def adjoint(self, grad_field: np.ndarray) -> np.ndarray:
        """Pull a gradient on the grid back to the control values."""
        return self.ey.T @ grad_field @ self.ex

    def fit(self, values: np.ndarray) -> np.ndarray:
        """Least-squares control values reproducing a grid field."""
        k = np.kron(self.ey, self.ex)  # acts on control.flatten() ordered (y, x)
        sol, *_ = np.linalg.lstsq(k, values.reshape(-1), rcond=None)
        return sol.reshape(self.m, self.m)


def eval_coefficient(control: np.ndarray, grid: Grid2D, m: int | None = None) -> Field:
    control = np.asarray(control, dtype=np.float64)
    if m is None:
        m = control.shape[0]
    return Field(grid, CoefficientInterp(grid, m).evaluate(control))


class SourceModel:
    """Piecewise-quartic scalar response on a regular grid of the u axis.

    Parameters are the node values (continuity is built in) plus three free
    shape coefficients per piece:

        f(u) = v_p (1-t) + v_{p+1} t + c2 (t^2-t) + c3 (t^3-t) + c4 (t^4-t)

    with t the local coordinate in piece p.  Inputs outside the grid use the
    boundary piece's polynomial (logged extrapolation).
    """

    def __init__(self, points: int = 40, lo: float = -30.0, hi: float = 30.0):
        if points < 2:
            raise ValueError("need at least 2 breakpoints")
        self.points = points
        self.lo = float(lo)
        self.hi = float(hi)
        self.h = (self.hi - self.lo) / (points - 1)
        self.n_params = points + 3 * (points - 1)
        self._warned = False

    def _locate(self, u: np.ndarray):
        p = np.clip(((u - self.lo) // self.h).astype(int), 0, self.points - 2)
        t = (u - self.lo) / self.h - p
        outside = (u < self.lo) | (u > self.hi)
        if outside.any() and not self._warned:
            log.warning(
                "source model evaluated outside [%g, %g] (extrapolating)",
                self.lo, self.hi,
            )
            self._warned = True
        return p, t

    def _unpack(self, params: np.ndarray):
        k = self.points
        v = params[:k]
        c = params[k:].reshape(k - 1, 3)
        return v, c

    def evaluate(self, params: np.ndarray, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v, c = self._unpack(params)
        p, t = self._locate(u)
        c2, c3, c4 = c[p, 0], c[p, 1], c[p, 2]
        return (v[p] * (1.0 - t) + v[p + 1] * t
                + c2 * (t**2 - t) + c3 * (t**3 - t) + c4 * (t**4 - t))

    def derivative_u(self, params: np.ndarray, u: np.ndarray) -> np.ndarray:
        """df/du, defined piecewise (one-sided at the nodes)."""
        u = np.asarray(u, dtype=np.float64)
        v, c = self._unpack(params)
        p, t = self._locate(u)
        c2, c3, c4 = c[p, 0], c[p, 1], c[p, 2]
        return (v[p + 1] - v[p]
                + c2 * (2.0 * t - 1.0) + c3 * (3.0 * t**2 - 1.0)
                + c4 * (4.0 * t**3 - 1.0)) / self.h

    def param_gradient(self, u: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Accumulate dL/dparams given dL/df values at the inputs u."""
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        g = np.asarray(cotangent, dtype=np.float64).reshape(-1)
        p, t = self._locate(u)
        out = np.zeros(self.n_params)
        k = self.points
        np.add.at(out, p, g * (1.0 - t))
        np.add.at(out, p + 1, g * t)
        base = k + 3 * p
        np.add.at(out, base, g * (t**2 - t))
        np.add.at(out, base + 1, g * (t**3 - t))
        np.add.at(out, base + 2, g * (t**4 - t))
        return out

    def design_matrix(self, u: np.ndarray) -> np.ndarray:
        """Rows of df/dparams, for direct least-squares fits."""
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        rows = np.zeros((u.size, self.n_params))
        p, t = self._locate(u)
        k = self.points
        idx = np.arange(u.size)
        rows[idx, p] = 1.0 - t
        rows[idx, p + 1] = t
        rows[idx, k + 3 * p] = t**2 - t
        rows[idx, k + 3 * p + 1] = t**3 - t
        rows[idx, k + 3 * p + 2] = t**4 - t
        return rows

    def fit(self, u: np.ndarray, f: np.ndarray, ridge: float = 1e-9) -> np.ndarray:
        """Regularized least-squares fit of the response to samples."""
        A = self.design_matrix(u)
        k = A.shape[1]
        lhs = A.T @ A + ridge * np.eye(k)
        return np.linalg.solve(lhs, A.T @ np.asarray(f, dtype=np.float64).reshape(-1))
