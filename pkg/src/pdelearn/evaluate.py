"""Quantitative evaluation protocols: normalized prediction error with
percentile bands, coefficient-recovery errors, source-function comparison,
and out-of-distribution generalization."""

from __future__ import annotations

import concurrent.futures
import csv
import os
from dataclasses import dataclass

import numpy as np

from .datagen import (
    InitSpec,
    add_noise,
    sample_initial_condition,
    solve_linear_convdiff,
    solve_nonlinear_diffusion,
    Trajectory,
    default_convection_x,
    default_convection_y,
    DEFAULT_DIFFUSION,
    LINEAR_DEFAULTS,
    NONLINEAR_DEFAULTS,
)
from .fields import Boundary, Field, Grid2D, restrict
from .model import StepModel


def normalized_error(u: Field, u_pred: Field) -> float:
    """Squared l2 mismatch over squared l2 deviation of u from its mean."""
    if u.grid != u_pred.grid:
        raise ValueError("fields must share a grid")
    diff = u_pred.values - u.values
    dev = u.values - u.values.mean()
    den = float((dev**2).sum())
    if den == 0.0:
        raise ValueError("normalized error undefined for a constant field")
    return float((diff**2).sum()) / den


@dataclass
class ErrorCurve:
    times: np.ndarray
    errors: np.ndarray  # (samples, times); +inf after a blow-up

    def percentiles(self):
        p25, p50, p75 = np.percentile(self.errors, [25.0, 50.0, 75.0], axis=0)
        return p25, p50, p75

    @property
    def median(self) -> np.ndarray:
        return self.percentiles()[1]

    def write_csv(self, path) -> None:
        p25, p50, p75 = self.percentiles()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "p25", "median", "p75"])
            for row in zip(self.times, p25, p50, p75):
                w.writerow([f"{v:.10g}" for v in row])


def _reference_trajectory(kind: str, u0_coarse: Field, u0_fine: Field | None,
                          steps: int, dt: float) -> Trajectory:
    if kind == "linear":
        return solve_linear_convdiff(u0_coarse, steps * dt, dt=dt)
    traj = solve_nonlinear_diffusion(
        u0_fine, steps * dt, frame_dt=dt,
        restrict_factor=u0_fine.grid.nx // u0_coarse.grid.nx,
    )
    return traj


def _one_sample(model: StepModel, theta, kind: str, spec: InitSpec,
                steps: int, noise_level: float, rng) -> np.ndarray:
    """Normalized error at times dt..steps*dt for one random initial field."""
    dt = model.config.dt
    if kind == "linear":
        grid = model.config.grid
        u0 = sample_initial_condition(grid, spec, rng)
        u0 = add_noise(Trajectory([u0], dt), noise_level, rng).fields[0]
        ref = _reference_trajectory(kind, u0, None, steps, dt)
        start = u0
    else:
        g = model.config.grid
        fine = Grid2D(2 * g.nx, 2 * g.ny, g.lx, g.ly, Boundary.DIRICHLET)
        u0f = sample_initial_condition(fine, spec, rng)
        u0f = add_noise(Trajectory([u0f], dt), noise_level, rng).fields[0]
        ref = _reference_trajectory(kind, restrict(u0f, 2), u0f, steps, dt)
        start = ref.fields[0]
    pred, blown = model.rollout(start, theta, steps)
    errs = np.full(steps, np.inf)
    for k in range(1, min(len(pred.fields), steps + 1)):
        errs[k - 1] = normalized_error(ref.fields[k], pred.fields[k])
    return errs


def prediction_error_study(model: StepModel, theta, n_test: int,
                           horizon_steps: int, spec: InitSpec | None = None,
                           noise_level: float = 0.01, seed: int = 0,
                           threads: int = 1) -> ErrorCurve:
    """Roll the net and the reference solver from noisy initials.

    Noise is applied to the initial field only; both the network and the
    reference solver start from the same noisy state.  Blow-ups are kept as
    infinite errors so the percentile bands reflect instability.
    """
    kind = model.config.kind
    if spec is None:
        spec = (InitSpec(n_max=LINEAR_DEFAULTS["n_max"]) if kind == "linear"
                else InitSpec(n_max=NONLINEAR_DEFAULTS["n_max"], envelope=True))
    rng = np.random.default_rng(seed)
    streams = rng.spawn(n_test)

    def run(i):
        return _one_sample(model, theta, kind, spec, horizon_steps,
                           noise_level, streams[i])

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(run, range(n_test)))
    else:
        rows = [run(i) for i in range(n_test)]
    times = model.config.dt * np.arange(1, horizon_steps + 1)
    return ErrorCurve(times, np.stack(rows))


def generalization_study(model: StepModel, theta, n_test: int,
                         horizon_steps: int, n_max: int | None = None,
                         noise_level: float = 0.01, seed: int = 0,
                         threads: int = 1) -> ErrorCurve:
    """Prediction study with out-of-distribution initial frequencies."""
    kind = model.config.kind
    if n_max is None:
        n_max = 12 if kind == "linear" else 10
    spec = InitSpec(n_max=n_max, envelope=(kind == "nonlinear"))
    return prediction_error_study(model, theta, n_test, horizon_steps,
                                  spec=spec, noise_level=noise_level,
                                  seed=seed, threads=threads)


def linear_truth_fields(grid: Grid2D) -> dict:
    X, Y = grid.coords()
    zero = np.zeros_like(X)
    truth = {(i, j): zero for i, j in
             [(0, 0), (1, 1), (3, 0), (2, 1), (1, 2), (0, 3),
              (4, 0), (3, 1), (2, 2), (1, 3), (0, 4)]}
    truth[(1, 0)] = default_convection_x(X, Y)
    truth[(0, 1)] = default_convection_y(X, Y)
    truth[(2, 0)] = DEFAULT_DIFFUSION[0] * np.ones_like(X)
    truth[(0, 2)] = DEFAULT_DIFFUSION[1] * np.ones_like(X)
    return truth


@dataclass
class CoefficientReport:
    orders: list
    rel_errors: dict      # (i,j) -> relative l2 error (present terms only)
    mean_abs: dict        # (i,j) -> mean |c| on the grid
    spatial_mean: dict    # (i,j) -> mean value
    aggregate: float      # mean relative error over present terms

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["term", "rel_l2_error", "mean_abs", "spatial_mean"])
            for o in self.orders:
                w.writerow([
                    f"c{o[0]}{o[1]}",
                    "" if o not in self.rel_errors else f"{self.rel_errors[o]:.8g}",
                    f"{self.mean_abs[o]:.8g}",
                    f"{self.spatial_mean[o]:.8g}",
                ])


def coefficient_error(model: StepModel, theta,
                      truth: dict | None = None) -> CoefficientReport:
    """Compare learned coefficient fields with the closed-form truth."""
    if truth is None:
        truth = linear_truth_fields(model.config.grid)
    C = model.coefficient_fields(theta)
    rel, mabs, mean = {}, {}, {}
    present = []
    for t, o in enumerate(model.term_orders):
        mabs[o] = float(np.abs(C[t]).mean())
        mean[o] = float(C[t].mean())
        tr = truth.get(o)
        if tr is not None and np.linalg.norm(tr) > 0:
            rel[o] = float(np.linalg.norm(C[t] - tr) / np.linalg.norm(tr))
            present.append(rel[o])
    agg = float(np.mean(present)) if present else float("nan")
    return CoefficientReport(list(model.term_orders), rel, mabs, mean, agg)


@dataclass
class SourceComparison:
    u_grid: np.ndarray
    true_values: np.ndarray
    learned_values: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray

    def max_error_on(self, lo: float, hi: float) -> float:
        m = (self.u_grid >= lo) & (self.u_grid <= hi)
        return float(np.abs(self.learned_values[m] - self.true_values[m]).max())

    def training_percentiles(self, lo_pct: float = 5.0, hi_pct: float = 95.0):
        centers = 0.5 * (self.hist_edges[:-1] + self.hist_edges[1:])
        cdf = np.cumsum(self.hist_counts) / self.hist_counts.sum()
        lo = centers[np.searchsorted(cdf, lo_pct / 100.0)]
        hi = centers[min(np.searchsorted(cdf, hi_pct / 100.0), len(centers) - 1)]
        return float(lo), float(hi)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "true_source", "learned_source"])
            for row in zip(self.u_grid, self.true_values, self.learned_values):
                w.writerow([f"{v:.10g}" for v in row])


def source_comparison(model: StepModel, theta, training_values: np.ndarray,
                      true_fn=lambda u: 15.0 * np.sin(u),
                      n_points: int = 601) -> SourceComparison:
    """Dense tabulation of true vs learned source plus the training-u histogram."""
    if model.source is None:
        raise ValueError("model has no source component")
    lo, hi = model.source.lo, model.source.hi
    ug = np.linspace(lo, hi, n_points)
    learned = model.source.evaluate(theta[model.layout["source"]], ug)
    counts, edges = np.histogram(np.asarray(training_values).reshape(-1),
                                 bins=121, range=(lo, hi))
    return SourceComparison(ug, true_fn(ug), learned, edges, counts)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit grayscale PGM of a field (min-max normalized)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((v - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_coefficient_images(dirpath, model: StepModel, theta) -> list:
    os.makedirs(dirpath, exist_ok=True)
    C = model.coefficient_fields(theta)
    written = []
    for t, (i, j) in enumerate(model.term_orders):
        p = os.path.join(dirpath, f"c{i}{j}.pgm")
        write_pgm(p, C[t])
        written.append(p)
    return written
