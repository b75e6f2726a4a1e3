"""Reference solvers and samplers for the simulated training/test data.

Two problem families are supported: a variable-coefficient linear
convection-diffusion equation on a periodic 50x50 grid (pseudo-spectral in
space, classical RK4 in time) and a diffusion equation with a nonlinear
source on a Dirichlet grid (5-point Laplacian, forward Euler on a fine mesh,
restricted for storage).  Initial conditions are random low-frequency
trigonometric sums; stored sequences can carry multiplicative-scale Gaussian
noise while keeping the clean frames alongside.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .fields import (Boundary, Field, Grid2D, grid_to_dict, read_pdf1,
                     restrict, write_pdf1)

AMPLITUDE_STD = math.sqrt(1.0 / 50.0)


class IntegrationError(RuntimeError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"integration failed at step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class InitSpec:
    n_max: int = 9
    amplitude_std: float = AMPLITUDE_STD
    envelope: bool = False

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


@dataclass
class Trajectory:
    fields: list
    dt: float
    noisy: bool = False
    clean: list | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        grids = {f.grid for f in self.fields}
        if len(grids) > 1:
            raise ValueError("all frames must share one grid")

    def __len__(self):
        return len(self.fields)

    @property
    def grid(self) -> Grid2D:
        return self.fields[0].grid


def sample_initial_condition(grid: Grid2D, spec: InitSpec, rng) -> Field:
    """Random trigonometric sum with N(0, std^2) mode amplitudes.

    All modes with |k|, |l| <= n_max enter with independent cosine and sine
    amplitudes.  With the envelope on, the sum is damped by the polynomial
    x(lx-x) y(ly-y) / (lx*ly)^2, which vanishes on the domain boundary (the
    stored x=0 / y=0 edges, and the virtual far edges of a Dirichlet grid).
    """
    N = spec.n_max
    X, Y = grid.coords()
    amps = rng.normal(0.0, spec.amplitude_std, size=(2 * N + 1, 2 * N + 1, 2))
    u = np.zeros_like(X)
    for ki, k in enumerate(range(-N, N + 1)):
        for li, l in enumerate(range(-N, N + 1)):
            phase = k * X + l * Y
            lam, gam = amps[ki, li]
            u += lam * np.cos(phase) + gam * np.sin(phase)
    if spec.envelope:
        env = (X * (grid.lx - X) * Y * (grid.ly - Y)) / (grid.lx * grid.ly) ** 2
        u = u * env
    return Field(grid, u)


def add_noise(traj: Trajectory, level: float, rng) -> Trajectory:
    """Additive Gaussian noise scaled by level * max(u) over the sequence."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return Trajectory(list(traj.fields), traj.dt, noisy=traj.noisy,
                          clean=traj.clean)
    M = max(f.values.max() for f in traj.fields)
    noisy = [
        f.with_values(f.values + level * M * rng.standard_normal(f.values.shape))
        for f in traj.fields
    ]
    return Trajectory(noisy, traj.dt, noisy=True, clean=list(traj.fields))


def default_convection_x(X, Y):
    return 0.5 * (np.cos(Y) + X * (2.0 * np.pi - X) * np.sin(X)) + 0.6


def default_convection_y(X, Y):
    return 2.0 * (np.cos(Y) + np.sin(X)) + 0.8


DEFAULT_DIFFUSION = (0.2, 0.3)


def solve_linear_convdiff(
    u0: Field,
    t_end: float,
    dt: float = 0.01,
    a_fn=default_convection_x,
    b_fn=default_convection_y,
    c: float = DEFAULT_DIFFUSION[0],
    d: float = DEFAULT_DIFFUSION[1],
) -> Trajectory:
    """u_t = a(x,y) u_x + b(x,y) u_y + c u_xx + d u_yy, pseudo-spectral + RK4.

    Spatial derivatives use the standard FFT wavenumbers with the Nyquist
    mode zeroed for first derivatives; variable-coefficient products are
    taken pointwise in physical space.  The state is recorded every step.
    """
    grid = u0.grid
    if grid.boundary is not Boundary.PERIODIC:
        raise ValueError("spectral solver requires a periodic grid")
    X, Y = grid.coords()
    a = a_fn(X, Y) if callable(a_fn) else float(a_fn) * np.ones_like(X)
    b = b_fn(X, Y) if callable(b_fn) else float(b_fn) * np.ones_like(X)

    kx = 2.0 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
    ky = 2.0 * np.pi * np.fft.fftfreq(grid.ny, d=grid.dy)
    kx1 = kx.copy()
    ky1 = ky.copy()
    if grid.nx % 2 == 0:
        kx1[grid.nx // 2] = 0.0  # odd-derivative Nyquist asymmetry
    if grid.ny % 2 == 0:
        ky1[grid.ny // 2] = 0.0
    KX1, KY1 = np.meshgrid(kx1, ky1)
    KX, KY = np.meshgrid(kx, ky)
    lap_mult = -(c * KX**2 + d * KY**2)
    # 2/3-rule dealiasing: variable-coefficient products alias, and the
    # cut keeps c k^2 dt inside the RK4 stability region for every retained
    # mode (the raw Nyquist corners are unstable at dt = 0.01 on 50x50)
    fx = np.fft.fftfreq(grid.nx) * grid.nx
    fy = np.fft.fftfreq(grid.ny) * grid.ny
    FX, FY = np.meshgrid(fx, fy)
    dealias = (np.abs(FX) <= grid.nx / 3.0) & (np.abs(FY) <= grid.ny / 3.0)

    def project(u):
        return np.fft.ifft2(np.fft.fft2(u) * dealias).real

    def rhs(u):
        # the mask is applied to the right-hand side itself, so the
        # integrated system is exactly the band-limited dynamics and RK4
        # keeps its full temporal order
        uh = np.fft.fft2(u)
        ux = np.fft.ifft2(1j * KX1 * uh).real
        uy = np.fft.ifft2(1j * KY1 * uh).real
        diff = np.fft.ifft2(lap_mult * uh).real
        return project(a * ux + b * uy + diff)

    n_steps = int(round(t_end / dt))
    u = project(u0.values)
    frames = [u0]
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n_steps):
            k1 = rhs(u)
            k2 = rhs(u + 0.5 * dt * k1)
            k3 = rhs(u + 0.5 * dt * k2)
            k4 = rhs(u + dt * k3)
            u = project(u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
            if not np.all(np.isfinite(u)):
                raise IntegrationError(step + 1)
            frames.append(Field(grid, u.copy()))
    return Trajectory(frames, dt)


def solve_nonlinear_diffusion(
    u0: Field,
    t_end: float,
    dt: float = 9e-4,
    frame_dt: float = 0.01,
    c: float = 0.3,
    source=lambda u: 15.0 * np.sin(u),
    restrict_factor: int = 2,
) -> Trajectory:
    """u_t = c Lap(u) + f(u) with zero boundary, forward Euler + 5-point stencil.

    Integrates on the grid of ``u0`` (the paper's fine mesh) and stores
    restricted frames every ``frame_dt``.  The substep is frame_dt/ceil(
    frame_dt/dt) so that frame times are exact.
    """
    grid = u0.grid
    if grid.boundary is not Boundary.DIRICHLET:
        raise ValueError("nonlinear solver requires a Dirichlet grid")
    n_sub = max(1, math.ceil(frame_dt / dt - 1e-12))
    sub = frame_dt / n_sub
    inv_dx2 = 1.0 / grid.dx**2
    inv_dy2 = 1.0 / grid.dy**2

    def lap(v):
        p = np.pad(v, 1)
        return ((p[1:-1, :-2] + p[1:-1, 2:] - 2.0 * v) * inv_dx2
                + (p[:-2, 1:-1] + p[2:, 1:-1] - 2.0 * v) * inv_dy2)

    u = u0.values.copy()
    u[0, :] = 0.0
    u[:, 0] = 0.0
    n_frames = int(round(t_end / frame_dt))

    def snapshot(v):
        f = Field(grid, v.copy())
        return restrict(f, restrict_factor) if restrict_factor > 1 else f

    frames = [snapshot(u)]
    step = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_frames):
            for _ in range(n_sub):
                u = u + sub * (c * lap(u) + source(u))
                u[0, :] = 0.0
                u[:, 0] = 0.0
                step += 1
                if not np.all(np.isfinite(u)):
                    raise IntegrationError(step)
            frames.append(snapshot(u))
    return Trajectory(frames, frame_dt)


LINEAR_DEFAULTS = dict(n_max=9, nx=50, ny=50)
NONLINEAR_DEFAULTS = dict(n_max=6, nx=100, ny=100, restrict_factor=2)


def make_trajectory(kind: str, rng, n_max: int | None = None,
                    t_end: float = 0.2, frame_dt: float = 0.01,
                    noise_level: float = 0.01,
                    grid: Grid2D | None = None) -> Trajectory:
    """One noisy trajectory of the requested experiment family.

    ``grid`` is the grid of the stored frames; the nonlinear family solves
    on the twice-refined mesh and restricts.
    """
    if kind == "linear":
        n_max = LINEAR_DEFAULTS["n_max"] if n_max is None else n_max
        if grid is None:
            grid = Grid2D(LINEAR_DEFAULTS["nx"], LINEAR_DEFAULTS["ny"])
        u0 = sample_initial_condition(grid, InitSpec(n_max=n_max), rng)
        traj = solve_linear_convdiff(u0, t_end, dt=frame_dt)
    elif kind == "nonlinear":
        n_max = NONLINEAR_DEFAULTS["n_max"] if n_max is None else n_max
        factor = NONLINEAR_DEFAULTS["restrict_factor"]
        if grid is None:
            fine = Grid2D(NONLINEAR_DEFAULTS["nx"], NONLINEAR_DEFAULTS["ny"],
                          boundary=Boundary.DIRICHLET)
        else:
            fine = Grid2D(grid.nx * factor, grid.ny * factor, grid.lx, grid.ly,
                          Boundary.DIRICHLET)
        u0 = sample_initial_condition(fine, InitSpec(n_max=n_max, envelope=True), rng)
        traj = solve_nonlinear_diffusion(u0, t_end, frame_dt=frame_dt,
                                         restrict_factor=factor)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return add_noise(traj, noise_level, rng)


def make_dataset(kind: str, count: int, rng, n_max: int | None = None,
                 noise_level: float = 0.01, t_end: float = 0.2,
                 frame_dt: float = 0.01, grid: Grid2D | None = None) -> list[Trajectory]:
    if count < 1:
        raise ValueError("count must be >= 1")
    streams = rng.spawn(count)
    return [
        make_trajectory(kind, streams[i], n_max=n_max, t_end=t_end,
                        frame_dt=frame_dt, noise_level=noise_level, grid=grid)
        for i in range(count)
    ]


def write_trajectory(directory, traj: Trajectory, meta: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    g = traj.grid
    doc = {
        "format": "pdelearn-trajectory",
        "frames": len(traj.fields),
        "dt": traj.dt,
        "noisy": traj.noisy,
        "grid": grid_to_dict(g),
    }
    if meta:
        doc.update(meta)
    for i, f in enumerate(traj.fields):
        write_pdf1(os.path.join(directory, f"t{i}.pdf1"), f)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trajectory(directory) -> Trajectory:
    with open(os.path.join(directory, "meta.json")) as fh:
        doc = json.load(fh)
    g = doc["grid"]
    fields = [
        read_pdf1(os.path.join(directory, f"t{i}.pdf1"), lx=g["lx"], ly=g["ly"])
        for i in range(doc["frames"])
    ]
    return Trajectory(fields, doc["dt"], noisy=doc.get("noisy", False))
