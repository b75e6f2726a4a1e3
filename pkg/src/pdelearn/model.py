"""The learned time-stepper.

One step block computes

    u_next = (q0 * u) + dt * [ sum_ij c_ij(x,y) . (q_ij * u) / (dx^i dy^j)
                               + f_source(u) ]

where every filter is applied index-reversed (correlation) so a unit
(i, j)-moment yields +d^{i+j}/dx^i dy^j, coefficients c_ij are interpolated
from coarse control grids, and the optional source is the piecewise-quartic
scalar model.  A network is this single block composed n times with shared
parameters.  Filters are parameterized per the training mode:

* constrained -- free moment-matrix entries (constraints hold exactly),
* frozen      -- no filter parameters, classical stencils,
* freed       -- all weights free (no moment constraints).

The reverse pass is hand-written; every map from parameters to weights or
coefficient fields is linear, so its adjoint is the transposed matrix.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .fields import Field, Grid2D, grid_from_dict, grid_to_dict
from .moments import (
    ConstraintPattern,
    averaging_pattern,
    check_pattern,
    derivative_pattern,
    filter_from_moments,
    frozen_pattern,
    vandermonde_inv,
)
from .response import CoefficientInterp, SourceModel


class FilterMode(enum.Enum):
    CONSTRAINED = "constrained"
    FROZEN = "frozen"
    FREED = "freed"


class BlowUpError(RuntimeError):
    def __init__(self, block: int, detail: str = ""):
        msg = f"forward pass blew up in block {block}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.block = block


def derivative_orders(max_order: int) -> list[tuple[int, int]]:
    """(i, j) with 0 < i+j <= max_order, ordered by level then descending i."""
    out = []
    for level in range(1, max_order + 1):
        for i in range(level, -1, -1):
            out.append((i, level - i))
    return out


@dataclass(frozen=True)
class ModelConfig:
    kind: str  # "linear" | "nonlinear"
    grid: Grid2D
    filter_size: int = 7
    max_order: int = 4
    mode: FilterMode = FilterMode.CONSTRAINED
    dt: float = 0.01
    coef_points: int = 7
    source_points: int = 40
    source_lo: float = -30.0
    source_hi: float = 30.0

    def __post_init__(self):
        if self.kind not in ("linear", "nonlinear"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.filter_size % 2 == 0:
            raise ValueError("filter size must be odd")
        if self.max_order >= self.filter_size:
            raise ValueError("max_order must be below the filter size")
        if self.kind == "nonlinear" and self.max_order != 2:
            raise ValueError("the nonlinear family uses a second-order prior")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "grid": grid_to_dict(self.grid),
            "filter_size": self.filter_size,
            "max_order": self.max_order,
            "mode": self.mode.value,
            "dt": self.dt,
            "coef_points": self.coef_points,
            "source_points": self.source_points,
            "source_lo": self.source_lo,
            "source_hi": self.source_hi,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        return ModelConfig(
            kind=doc["kind"],
            grid=grid_from_dict(doc["grid"]),
            filter_size=int(doc["filter_size"]),
            max_order=int(doc["max_order"]),
            mode=FilterMode(doc["mode"]),
            dt=float(doc["dt"]),
            coef_points=int(doc["coef_points"]),
            source_points=int(doc["source_points"]),
            source_lo=float(doc["source_lo"]),
            source_hi=float(doc["source_hi"]),
        )


class _Slot:
    """One filter's parameterization: how theta entries become weights."""

    def __init__(self, name: str, order: tuple[int, int] | None,
                 n: int, mode: FilterMode):
        self.name = name
        self.order = order  # None for averaging filters
        self.n = n
        self.mode = mode
        if order is None:
            self.pattern = averaging_pattern(n)
            self.frozen_weights = filter_from_moments(frozen_pattern((0, 0), n).values)
        else:
            self.pattern = derivative_pattern(order, n)
            self.frozen_weights = filter_from_moments(frozen_pattern(order, n).values)
        if mode is FilterMode.FROZEN:
            self.n_params = 0
            self.basis = None
        elif mode is FilterMode.CONSTRAINED:
            self.n_params = self.pattern.n_free
            Vinv = vandermonde_inv(n)
            cols = [
                np.outer(Vinv[:, q], Vinv[:, p]).reshape(-1)
                for p, q in self.pattern.free_indices()
            ]
            self.basis = np.stack(cols, axis=1) if cols else np.zeros((n * n, 0))
            self.base = filter_from_moments(self.pattern.values)
        else:  # FREED
            self.n_params = n * n
            self.basis = None

    def weights(self, theta: np.ndarray) -> np.ndarray:
        if self.mode is FilterMode.FROZEN:
            return self.frozen_weights
        if self.mode is FilterMode.CONSTRAINED:
            return self.base + (self.basis @ theta).reshape(self.n, self.n)
        return theta.reshape(self.n, self.n)

    def weight_grad_to_theta(self, wgrad: np.ndarray) -> np.ndarray:
        if self.mode is FilterMode.FROZEN:
            return np.zeros(0)
        if self.mode is FilterMode.CONSTRAINED:
            return self.basis.T @ wgrad.reshape(-1)
        return wgrad.reshape(-1)

    def default_params(self) -> np.ndarray:
        if self.mode is FilterMode.FREED:
            return self.frozen_weights.reshape(-1).copy()
        return np.zeros(self.n_params)


class StepModel:
    """Shared-parameter step block plus its composition and adjoint."""

    def __init__(self, config: ModelConfig):
        self.config = config
        g = config.grid
        n = config.filter_size
        mode = config.mode
        self.wrap = g.boundary.name == "PERIODIC"

        if config.kind == "linear":
            term_orders = [(0, 0)] + derivative_orders(config.max_order)
        else:
            term_orders = derivative_orders(config.max_order)
        self.term_orders = term_orders

        self.slots = [_Slot("q0", None, n, mode)]
        for (i, j) in term_orders:
            if (i, j) == (0, 0):
                self.slots.append(_Slot("q00", None, n, mode))
            else:
                self.slots.append(_Slot(f"q{i}{j}", (i, j), n, mode))
        # term t is applied with slot t+1 (slot 0 is the outer average q0)
        self.scales = np.array(
            [1.0 / (g.dx**i * g.dy**j) for (i, j) in term_orders]
        )

        self.interp = CoefficientInterp(g, config.coef_points)
        self.n_coef = config.coef_points**2
        self.source = (
            SourceModel(config.source_points, config.source_lo, config.source_hi)
            if config.kind == "nonlinear"
            else None
        )

        self.layout = {}
        pos = 0
        for s in self.slots:
            self.layout[s.name] = slice(pos, pos + s.n_params)
            pos += s.n_params
        for (i, j) in term_orders:
            self.layout[f"c{i}{j}"] = slice(pos, pos + self.n_coef)
            pos += self.n_coef
        if self.source is not None:
            self.layout["source"] = slice(pos, pos + self.source.n_params)
            pos += self.source.n_params
        self.n_params = pos

    # -- parameter plumbing -------------------------------------------------

    def default_params(self) -> np.ndarray:
        """Frozen-equivalent dynamics: classical stencils, zero response."""
        theta = np.zeros(self.n_params)
        for s in self.slots:
            theta[self.layout[s.name]] = s.default_params()
        return theta

    def param_groups(self) -> dict[str, np.ndarray]:
        """Index arrays for the three parameter groups."""
        idx = np.arange(self.n_params)
        filt = np.concatenate([idx[self.layout[s.name]] for s in self.slots])
        coef = np.concatenate(
            [idx[self.layout[f"c{i}{j}"]] for (i, j) in self.term_orders]
        )
        src = (
            idx[self.layout["source"]]
            if self.source is not None
            else np.zeros(0, dtype=int)
        )
        return {"filters": filt, "coefficients": coef, "source": src}

    def param_count_breakdown(self) -> dict[str, int]:
        groups = self.param_groups()
        return {k: int(v.size) for k, v in groups.items()} | {
            "total": self.n_params
        }

    def filters(self, theta: np.ndarray) -> np.ndarray:
        return np.stack(
            [s.weights(theta[self.layout[s.name]]) for s in self.slots]
        )

    def coefficient_controls(self, theta: np.ndarray) -> list[np.ndarray]:
        m = self.config.coef_points
        return [
            theta[self.layout[f"c{i}{j}"]].reshape(m, m)
            for (i, j) in self.term_orders
        ]

    def coefficient_fields(self, theta: np.ndarray) -> np.ndarray:
        return np.stack(
            [self.interp.evaluate(c) for c in self.coefficient_controls(theta)]
        )

    def set_coefficients_from_functions(self, theta: np.ndarray, fns: dict) -> np.ndarray:
        """Control values sampled from closed-form coefficients (for baselines)."""
        theta = theta.copy()
        m = self.config.coef_points
        g = self.config.grid
        tx = np.arange(m) * (g.lx / (m - 1))
        ty = np.arange(m) * (g.ly / (m - 1))
        TX, TY = np.meshgrid(tx, ty)
        for (i, j) in self.term_orders:
            fn = fns.get((i, j))
            vals = np.zeros((m, m)) if fn is None else np.asarray(fn(TX, TY), dtype=float) * np.ones((m, m))
            theta[self.layout[f"c{i}{j}"]] = vals.reshape(-1)
        return theta

    def param_sensitivities(self, theta: np.ndarray,
                            sample_inputs: np.ndarray) -> np.ndarray:
        """Estimated Jacobian column norms, for preconditioning the optimizer.

        The 1/(dx^i dy^j) factors make raw sensitivities span several orders
        of magnitude between low- and high-order terms; optimizing in the
        rescaled parameters removes that systematic anisotropy.  Estimates:
        coefficient controls get their exact per-pixel column norms, filter
        and source parameters a same-order structural estimate.
        """
        u = np.asarray(sample_inputs, dtype=np.float64)
        if u.ndim == 2:
            u = u[None]
        W = self.filters(theta)
        C = self.coefficient_fields(theta)
        D = kernels.corr_many(u, W, self.wrap)
        dt = self.config.dt
        u_rms = float(np.sqrt((u**2).mean()))
        c_rms = np.sqrt((C**2).mean(axis=(1, 2)))
        c_floor = 0.05 * max(1.0, float(c_rms.max()))
        ey2 = self.interp.ey**2
        ex2 = self.interp.ex**2

        sens = np.ones(self.n_params)
        for s_idx, s in enumerate(self.slots):
            if s.n_params == 0:
                continue
            if s.mode is FilterMode.CONSTRAINED:
                col_norms = np.linalg.norm(s.basis, axis=0)
            else:
                col_norms = np.ones(s.n_params)
            if s_idx == 0:
                factor = u_rms
            else:
                t = s_idx - 1
                factor = dt * self.scales[t] * max(c_rms[t], c_floor) * u_rms
            sens[self.layout[s.name]] = factor * col_norms
        for t, (i, j) in enumerate(self.term_orders):
            mean_d2 = (D[:, t + 1] ** 2).mean(axis=0)
            col2 = ey2.T @ mean_d2 @ ex2  # (m, m) exact column norms squared
            sens[self.layout[f"c{i}{j}"]] = (
                dt * self.scales[t] * np.sqrt(col2).reshape(-1)
            )
        if self.source is not None:
            A = self.source.design_matrix(u.reshape(-1))
            sens[self.layout["source"]] = dt * np.sqrt((A**2).mean(axis=0))
        return np.maximum(sens, 1e-4 * sens.max())

    def verify_constraints(self, theta: np.ndarray, tol: float = 1e-10) -> dict:
        """Violated fixed moments per filter (empty dict when all satisfied)."""
        W = self.filters(theta)
        out = {}
        for s, w in zip(self.slots, W):
            bad = check_pattern(w, s.pattern, tol)
            if bad:
                out[s.name] = bad
        return out

    # -- forward / adjoint --------------------------------------------------

    def _workspace(self, theta: np.ndarray):
        W = self.filters(theta)
        C = self.coefficient_fields(theta)
        CS = C * self.scales[:, None, None]
        src = theta[self.layout["source"]] if self.source is not None else None
        return W, W[:, ::-1, ::-1].copy(), CS, src

    def step_batch(self, u: np.ndarray, ws) -> np.ndarray:
        W, _, CS, src = ws
        D = kernels.corr_many(u, W, self.wrap)
        F = np.einsum("tyx,btyx->byx", CS, D[:, 1:])
        if self.source is not None:
            F = F + self.source.evaluate(src, u)
        return D[:, 0] + self.config.dt * F

    def forward_batch(self, u0: np.ndarray, theta: np.ndarray, n_blocks: int,
                      keep_states: bool = False):
        """Compose the shared block; returns (final, states or None)."""
        ws = self._workspace(theta)
        u = u0
        states = [u0] if keep_states else None
        with np.errstate(over="ignore", invalid="ignore"):
            for b in range(n_blocks):
                u_prev = u
                u = self.step_batch(u, ws)
                if not np.all(np.isfinite(u)):
                    raise BlowUpError(b + 1, self._diagnose(u_prev, ws))
                if keep_states:
                    states.append(u)
        return u, states

    def _diagnose(self, u: np.ndarray, ws) -> str:
        W, _, CS, src = ws
        try:
            D = kernels.corr_many(u, W, self.wrap)
            worst, worst_name = 0.0, "q0"
            for t, (i, j) in enumerate(self.term_orders):
                mag = float(np.abs(CS[t] * D[:, t + 1]).max())
                if not np.isfinite(mag) or mag > worst:
                    worst, worst_name = mag, f"c{i}{j}*D{i}{j}u"
            return f"largest term {worst_name} ~ {worst:.3e}"
        except Exception:  # diagnosis must never mask the original failure
            return "diagnosis unavailable"

    def backward_batch(self, states: list, theta: np.ndarray,
                       gbar: np.ndarray, filter_grads: bool = True) -> np.ndarray:
        """Gradient of sum-loss wrt theta given d(loss)/d(final state).

        ``states`` is the list produced by forward_batch(keep_states=True).
        ``filter_grads=False`` skips the weight-gradient kernels (warm-up and
        frozen filters have no trainable weights).
        """
        ws = self._workspace(theta)
        W, Wflip, CS, src = ws
        S = len(self.slots)
        B, H, Wd = gbar.shape
        n = self.config.filter_size
        dt = self.config.dt
        need_wgrad = filter_grads and any(s.n_params for s in self.slots)

        wgrad = np.zeros((S, n, n))
        cgrad_field = np.zeros((len(self.term_orders), H, Wd))
        sgrad = np.zeros(self.source.n_params) if self.source is not None else None

        g = gbar
        for u_in in reversed(states[:-1]):
            D = kernels.corr_many(u_in, W, self.wrap)
            gF = dt * g
            G = np.empty((B, S, H, Wd))
            G[:, 0] = g
            for t in range(len(self.term_orders)):
                G[:, t + 1] = gF * CS[t]
            if need_wgrad:
                wgrad += kernels.corr_wgrad(G, u_in, n, self.wrap)
            du = kernels.corr_accum(G, Wflip, self.wrap)
            cgrad_field += np.einsum("byx,btyx->tyx", gF, D[:, 1:])
            if self.source is not None:
                du = du + gF * self.source.derivative_u(src, u_in)
                sgrad += self.source.param_gradient(u_in, gF)
            g = du

        grad = np.zeros(self.n_params)
        if need_wgrad:
            for s_idx, s in enumerate(self.slots):
                grad[self.layout[s.name]] = s.weight_grad_to_theta(wgrad[s_idx])
        for t, (i, j) in enumerate(self.term_orders):
            gc = self.interp.adjoint(cgrad_field[t] * self.scales[t])
            grad[self.layout[f"c{i}{j}"]] = gc.reshape(-1)
        if self.source is not None:
            grad[self.layout["source"]] = sgrad
        return grad

    # -- field-level conveniences --------------------------------------------

    def block_forward(self, u: Field, theta: np.ndarray) -> Field:
        out, _ = self.forward_batch(u.values[None], theta, 1)
        return u.with_values(out[0])

    def net_forward(self, u0: Field, theta: np.ndarray, n_blocks: int,
                    return_states: bool = False):
        out, states = self.forward_batch(
            u0.values[None], theta, n_blocks, keep_states=return_states
        )
        final = u0.with_values(out[0])
        if return_states:
            return final, [u0.with_values(s[0]) for s in states]
        return final

    def rollout(self, u0: Field, theta: np.ndarray, steps: int):
        """Repeated application of the shared block; returns (fields, blown).

        ``blown`` is None for a clean rollout, else the 1-based step index
        at which the state stopped being finite (trajectory truncated).
        """
        from .datagen import Trajectory

        ws = self._workspace(theta)
        u = u0.values[None]
        fields = [u0]
        blown = None
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(steps):
                u = self.step_batch(u, ws)
                if not np.all(np.isfinite(u)):
                    blown = k + 1
                    break
                fields.append(u0.with_values(u[0]))
        return Trajectory(fields, self.config.dt), blown


CHECKPOINT_FORMAT = "pdelearn-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: StepModel, theta: np.ndarray,
                    n_blocks: int, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "n_blocks": int(n_blocks),
        "params": {
            name: theta[sl].tolist() for name, sl in model.layout.items()
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[StepModel, np.ndarray, int, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    model = StepModel(ModelConfig.from_dict(doc["config"]))
    theta = np.zeros(model.n_params)
    for name, sl in model.layout.items():
        vals = np.asarray(doc["params"][name], dtype=np.float64)
        if vals.size != sl.stop - sl.start:
            raise ValueError(f"{path}: parameter block {name} has wrong size")
        theta[sl] = vals
    return model, theta, int(doc["n_blocks"]), doc.get("extra", {})
