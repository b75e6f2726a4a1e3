"""Loss, gradients over the unrolled composition, and layer-wise training.

Training follows the freeze-then-release schedule: a warm-up pass fits the
response parameters (coefficients, source) at depth 1 with classical frozen
stencils, then depths 1..n are optimized in turn, each initialized from the
previous result.  In freed mode both the warm-up and the stencil
initialization are skipped and every parameter starts from small Gaussian
noise.  Each depth draws its own batch of trajectories and minimizes the
summed squared l2 mismatch of n-step predictions with L-BFGS.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import Trajectory, make_dataset
from .lbfgs import LbfgsConfig, LbfgsResult, lbfgs_minimize
from .model import BlowUpError, FilterMode, StepModel

log = logging.getLogger(__name__)

BLOWUP_PENALTY = 1e10


@dataclass
class TrainConfig:
    depth: int = 6
    batch_size: int = 28
    warmup_iters: int = 150
    iters_per_depth: int = 100
    init_std: float = 0.01
    noise_level: float = 0.01
    n_max: int | None = None
    t_end: float = 0.2
    frame_dt: float = 0.01
    pairs_per_traj: int | None = None
    seed: int = 0
    lbfgs: LbfgsConfig = field(default_factory=lambda: LbfgsConfig(
        gtol=1e-7, ftol=1e-10))

    def __post_init__(self):
        if self.depth < 1 or self.batch_size < 1:
            raise ValueError("depth and batch_size must be >= 1")


def pairs_from_trajectories(trajs: list[Trajectory], depth: int,
                            cap: int | None = None):
    """Stack (u(t_i), u(t_{i+depth})) pairs from every trajectory.

    All offsets i are used unless ``cap`` limits them (evenly spaced,
    deterministic).
    """
    inputs, labels = [], []
    for traj in trajs:
        n_frames = len(traj.fields)
        offsets = np.arange(n_frames - depth)
        if cap is not None and offsets.size > cap:
            offsets = offsets[np.linspace(0, offsets.size - 1, cap).round().astype(int)]
        for i in offsets:
            inputs.append(traj.fields[i].values)
            labels.append(traj.fields[i + depth].values)
    return np.stack(inputs), np.stack(labels)


class LossEvaluator:
    """Paired loss/gradient evaluation with a one-point forward cache.

    The gradient reuses the forward states of the most recent loss call at
    the same parameters, so a Wolfe line search pays for one forward pass on
    rejected points and one forward+reverse on accepted ones.
    """

    def __init__(self, model: StepModel, inputs: np.ndarray, labels: np.ndarray,
                 depth: int, filter_grads: bool = True):
        self.model = model
        self.inputs = inputs
        self.labels = labels
        self.depth = depth
        self.filter_grads = filter_grads
        self._key = None
        self._states = None
        self._out = None
        self._f = None

    def _forward(self, theta: np.ndarray) -> float:
        key = theta.tobytes()
        if key == self._key:
            return self._f
        try:
            out, states = self.model.forward_batch(
                self.inputs, theta, self.depth, keep_states=True
            )
        except BlowUpError as exc:
            log.debug("loss blow-up: %s", exc)
            self._key = None
            self._f = BLOWUP_PENALTY
            self._states = None
            return self._f
        self._key = key
        self._states = states
        self._out = out
        self._f = float(((out - self.labels) ** 2).sum())
        if not np.isfinite(self._f):
            self._f = BLOWUP_PENALTY
            self._states = None
        return self._f

    def loss(self, theta: np.ndarray) -> float:
        return self._forward(theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        f = self._forward(theta)
        if self._states is None or f >= BLOWUP_PENALTY:
            return np.zeros(self.model.n_params)
        gbar = 2.0 * (self._out - self.labels)
        return self.model.backward_batch(self._states, theta, gbar,
                                         filter_grads=self.filter_grads)


def loss(model: StepModel, theta: np.ndarray, batch, depth: int) -> float:
    """Sum of squared l2 distances between depth-step predictions and labels."""
    inputs, labels = batch
    return LossEvaluator(model, inputs, labels, depth).loss(theta)


def grad(model: StepModel, theta: np.ndarray, batch, depth: int) -> np.ndarray:
    inputs, labels = batch
    return LossEvaluator(model, inputs, labels, depth).grad(theta)


def _optimize_subset(model, theta0, active, evaluator, lbfgs_cfg, max_iters,
                     scales=None, callback=None) -> tuple[np.ndarray, LbfgsResult]:
    """Run L-BFGS on theta[active], holding the rest fixed.

    ``scales`` (estimated Jacobian column norms) precondition the search:
    the optimizer works on z = theta * scales, which equalizes parameter
    sensitivities.
    """
    theta_full = theta0.copy()
    s = np.ones(active.size) if scales is None else scales[active]

    def embed(z):
        t = theta_full.copy()
        t[active] = z / s
        return t

    cfg = LbfgsConfig(**{**lbfgs_cfg.__dict__, "max_iters": max_iters})
    res = lbfgs_minimize(
        lambda z: evaluator.loss(embed(z)),
        lambda z: evaluator.grad(embed(z))[active] / s,
        theta0[active] * s,
        cfg,
        callback=callback,
    )
    theta_full[active] = res.x / s
    return theta_full, res


@dataclass
class DepthResult:
    depth: int
    theta: np.ndarray
    loss: float
    gnorm: float
    status: str
    n_evals: int
    seconds: float


def default_data_source(kind: str, config: TrainConfig, grid=None):
    """On-the-fly generation: a fresh batch of trajectories per phase."""

    def source(depth: int, rng) -> list[Trajectory]:
        return make_dataset(
            kind,
            config.batch_size,
            rng,
            n_max=config.n_max,
            noise_level=config.noise_level,
            t_end=config.t_end,
            frame_dt=config.frame_dt,
            grid=grid,
        )

    return source


def train_layerwise(model: StepModel, config: TrainConfig, data_source=None,
                    metrics=None) -> list[DepthResult]:
    """Warm-up then depth 1..n optimization; one DepthResult per depth.

    ``data_source(phase, rng)`` returns the trajectories for a phase (0 is
    the warm-up, d >= 1 the depth-d pass); the rng children are spawned per
    phase index, so all modes see the same data for the same seed.
    ``metrics(row)`` receives one dict per optimizer iteration.  Optimizer
    failures are recorded and training continues from best-so-far.
    """
    if data_source is None:
        data_source = default_data_source(model.config.kind, config,
                                          grid=model.config.grid)
    rng = np.random.default_rng(config.seed)
    streams = rng.spawn(config.depth + 1)
    groups = model.param_groups()
    freed = model.config.mode is FilterMode.FREED

    theta = model.default_params()
    non_filter = np.concatenate([groups["coefficients"], groups["source"]])
    if freed:
        theta = config.init_std * rng.standard_normal(model.n_params)
    else:
        theta[non_filter] = config.init_std * rng.standard_normal(non_filter.size)

    def phase_callback(phase):
        if metrics is None:
            return None
        t0 = time.time()

        def cb(it, f, gn):
            metrics({"depth": phase, "iteration": it, "loss": f,
                     "grad_norm": gn, "wall_time": time.time() - t0})

        return cb

    if not freed and config.warmup_iters > 0:
        trajs = data_source(0, streams[0])
        inputs, labels = pairs_from_trajectories(trajs, 1, config.pairs_per_traj)
        ev = LossEvaluator(model, inputs, labels, 1, filter_grads=False)
        scales = model.param_sensitivities(theta, inputs[:64])
        t0 = time.time()
        theta, res = _optimize_subset(
            model, theta, non_filter, ev, config.lbfgs, config.warmup_iters,
            scales=scales, callback=phase_callback(0),
        )
        log.info("warm-up: loss %.6g (%s, %d evals, %.1fs)",
                 res.f, res.status, res.n_evals, time.time() - t0)

    all_params = np.arange(model.n_params)
    results = []
    for depth in range(1, config.depth + 1):
        trajs = data_source(depth, streams[depth])
        inputs, labels = pairs_from_trajectories(trajs, depth,
                                                 config.pairs_per_traj)
        ev = LossEvaluator(model, inputs, labels, depth)
        scales = model.param_sensitivities(theta, inputs[:64])
        t0 = time.time()
        theta, res = _optimize_subset(
            model, theta, all_params, ev, config.lbfgs,
            config.iters_per_depth, scales=scales, callback=phase_callback(depth),
        )
        seconds = time.time() - t0
        log.info("depth %d: loss %.6g (%s, %d evals, %.1fs)",
                 depth, res.f, res.status, res.n_evals, seconds)
        results.append(DepthResult(depth, theta.copy(), res.f, res.gnorm,
                                   res.status, res.n_evals, seconds))
    return results
