"""Limited-memory BFGS with a strong-Wolfe line search.

Two-loop recursion over the last ``memory`` curvature pairs; the line search
follows the classic bracket-and-zoom scheme with quadratic interpolation and
bisection safeguards.  The gradient callable is only invoked at points that
already satisfy the sufficient-decrease test, which keeps rejected
(penalized) trial points cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 500
    gtol: float = 1e-8
    ftol: float = 1e-12
    c1: float = 1e-4
    c2: float = 0.9
    ls_max: int = 30
    max_step_growth: float = 2.0


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    gnorm: float
    iters: int
    n_evals: int
    status: str  # "gtol" | "ftol" | "maxiter" | "line_search"
    history: list = field(default_factory=list)  # (iter, f, gnorm)


def _interpolate(a_lo, f_lo, g_lo, a_hi, f_hi):
    # quadratic through (a_lo, f_lo, g_lo) and (a_hi, f_hi); bisection fallback
    denom = 2.0 * (f_hi - f_lo - g_lo * (a_hi - a_lo))
    if denom != 0.0:
        a = a_lo - g_lo * (a_hi - a_lo) ** 2 / denom
        lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
        width = hi - lo
        if np.isfinite(a) and lo + 0.05 * width <= a <= hi - 0.05 * width:
            return a
    return 0.5 * (a_lo + a_hi)


def lbfgs_minimize(f, g, x0, config: LbfgsConfig | None = None,
                   callback=None) -> LbfgsResult:
    """Minimize f with gradient g from x0; returns best-so-far on failure."""
    cfg = config or LbfgsConfig()
    x = np.asarray(x0, dtype=np.float64).copy()
    evals = [0]

    def fval(z):
        evals[0] += 1
        return float(f(z))

    fx = fval(x)
    gx = np.asarray(g(x), dtype=np.float64)
    if not np.isfinite(fx):
        raise ValueError("objective not finite at the initial point")
    best_x, best_f, best_g = x.copy(), fx, gx.copy()

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    history = []
    status = "maxiter"
    it = 0

    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(gx))
        history.append((it - 1, fx, gnorm))
        if callback is not None:
            callback(it - 1, fx, gnorm)
        if gnorm < cfg.gtol:
            status = "gtol"
            break

        # two-loop recursion
        q = gx.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        dg0 = float(d @ gx)
        if dg0 >= 0.0:  # fall back to steepest descent if curvature went bad
            d = -gx
            dg0 = float(d @ gx)

        # strong-Wolfe line search (bracket then zoom)
        accepted = None

        def zoom(a_lo, f_lo, g_lo, a_hi, f_hi):
            for _ in range(cfg.ls_max):
                a_j = _interpolate(a_lo, f_lo, g_lo, a_hi, f_hi)
                x_j = x + a_j * d
                f_j = fval(x_j)
                if f_j > fx + cfg.c1 * a_j * dg0 or f_j >= f_lo:
                    a_hi, f_hi = a_j, f_j
                else:
                    g_j = np.asarray(g(x_j), dtype=np.float64)
                    dg_j = float(d @ g_j)
                    if abs(dg_j) <= -cfg.c2 * dg0:
                        return a_j, f_j, g_j
                    if dg_j * (a_hi - a_lo) >= 0.0:
                        a_hi, f_hi = a_lo, f_lo
                    a_lo, f_lo, g_lo = a_j, f_j, dg_j
                if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
                    break
            return None

        a_prev, f_prev, dg_prev = 0.0, fx, dg0
        a_cur = 1.0
        for ls_iter in range(1, cfg.ls_max + 1):
            f_cur = fval(x + a_cur * d)
            if f_cur > fx + cfg.c1 * a_cur * dg0 or (ls_iter > 1 and f_cur >= f_prev):
                accepted = zoom(a_prev, f_prev, dg_prev, a_cur, f_cur)
                break
            g_cur = np.asarray(g(x + a_cur * d), dtype=np.float64)
            dg_cur = float(d @ g_cur)
            if abs(dg_cur) <= -cfg.c2 * dg0:
                accepted = (a_cur, f_cur, g_cur)
                break
            if dg_cur >= 0.0:
                accepted = zoom(a_cur, f_cur, dg_cur, a_prev, f_prev)
                break
            a_prev, f_prev, dg_prev = a_cur, f_cur, dg_cur
            a_cur = cfg.max_step_growth * a_cur

        if accepted is None:
            status = "line_search"
            break

        a_new, f_new, g_new = accepted
        x_new = x + a_new * d
        s_vec = x_new - x
        y_vec = g_new - gx
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * float(np.linalg.norm(s_vec)) * float(np.linalg.norm(y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        f_old = fx
        x, fx, gx = x_new, f_new, g_new
        if fx < best_f:
            best_x, best_f, best_g = x.copy(), fx, gx.copy()
        if abs(f_old - fx) <= cfg.ftol * max(abs(f_old), abs(fx), 1.0):
            status = "ftol"
            break

    gnorm = float(np.linalg.norm(gx))
    if fx <= best_f:
        best_x, best_f, best_g = x, fx, gx
    return LbfgsResult(
        x=best_x,
        f=best_f,
        gnorm=float(np.linalg.norm(best_g)),
        iters=it,
        n_evals=evals[0],
        status=status,
        history=history,
    )
