"""Grid-sampled 2D fields and the convolution/restriction primitives.

Conventions fixed here and used everywhere else:

* ``Field.values`` has shape ``(ny, nx)`` with x as the fast (last) axis;
  node (i, j) sits at ``(i*dx, j*dy)`` with ``dx = lx/nx``.
* Filter weights are small arrays in the same layout: ``weights[a, b]`` is
  the tap at y-offset ``a-r`` and x-offset ``b-r``.
* ``circular_convolve(u, q)[x] = sum_k q[k] u[x-k]`` (true convolution);
  correlation is obtained by index-reversing the filter.
* Dirichlet grids store the x=0 / y=0 boundary nodes; the far boundary at
  x=lx / y=ly falls on the first *virtual* node beyond the grid, which the
  zero padding of ``dirichlet_convolve`` supplies exactly.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

PDF1_MAGIC = b"PDENETF1"


class Boundary(enum.Enum):
    PERIODIC = 0
    DIRICHLET = 1


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float = 2.0 * np.pi
    ly: float = 2.0 * np.pi
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("physical extents must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    def coords(self):
        """Meshgrid (X, Y) of node coordinates, each shaped (ny, nx)."""
        x = np.arange(self.nx) * self.dx
        y = np.arange(self.ny) * self.dy
        return np.meshgrid(x, y)


@dataclass(frozen=True)
class Field:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(
                f"values shape {v.shape} does not match grid "
                f"({self.grid.ny}, {self.grid.nx})"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def wrap(self) -> bool:
        return self.grid.boundary is Boundary.PERIODIC

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values)


def field_from_function(grid: Grid2D, fn) -> Field:
    X, Y = grid.coords()
    return Field(grid, fn(X, Y))


def circular_convolve(u: Field, weights: np.ndarray) -> Field:
    """Periodic convolution sum_k q[k] u[x-k] with a centered odd filter."""
    if u.grid.boundary is not Boundary.PERIODIC:
        raise ValueError("circular_convolve requires a periodic grid")
    w = np.asarray(weights, dtype=np.float64)
    out = kernels.correlate2d(u.values, w[::-1, ::-1], wrap=True)
    return u.with_values(out)


def dirichlet_convolve(u: Field, weights: np.ndarray) -> Field:
    """Same stencil application with out-of-domain samples treated as zero."""
    if u.grid.boundary is not Boundary.DIRICHLET:
        raise ValueError("dirichlet_convolve requires a Dirichlet grid")
    w = np.asarray(weights, dtype=np.float64)
    out = kernels.correlate2d(u.values, w[::-1, ::-1], wrap=False)
    return u.with_values(out)


def convolve(u: Field, weights: np.ndarray) -> Field:
    return circular_convolve(u, weights) if u.wrap else dirichlet_convolve(u, weights)


def restrict(u: Field, factor: int) -> Field:
    """Injection: keep every factor-th node in each direction."""
    if factor < 1:
        raise ValueError("restriction factor must be >= 1")
    if factor == 1:
        return u
    g = u.grid
    if g.nx % factor or g.ny % factor:
        raise ValueError(
            f"grid {g.nx}x{g.ny} not divisible by restriction factor {factor}"
        )
    coarse = Grid2D(g.nx // factor, g.ny // factor, g.lx, g.ly, g.boundary)
    return Field(coarse, u.values[::factor, ::factor].copy())


def zero_boundary_ring(values: np.ndarray) -> np.ndarray:
    """Zero the stored boundary nodes (x=0 and y=0 edges) of a Dirichlet field."""
    v = np.array(values, dtype=np.float64)
    v[0, :] = 0.0
    v[:, 0] = 0.0
    return v


def grid_to_dict(grid: Grid2D) -> dict:
    return {
        "nx": grid.nx,
        "ny": grid.ny,
        "lx": grid.lx,
        "ly": grid.ly,
        "boundary": grid.boundary.name.lower(),
    }


def grid_from_dict(doc: dict) -> Grid2D:
    return Grid2D(
        int(doc["nx"]),
        int(doc["ny"]),
        float(doc.get("lx", 2.0 * np.pi)),
        float(doc.get("ly", 2.0 * np.pi)),
        Boundary[doc.get("boundary", "periodic").upper()],
    )


def write_pdf1(path, field: Field) -> None:
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(PDF1_MAGIC)
        fh.write(struct.pack("<IIB", g.nx, g.ny, g.boundary.value))
        fh.write(field.values.astype("<f8").tobytes())


def read_pdf1(path, lx: float = 2.0 * np.pi, ly: float = 2.0 * np.pi) -> Field:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != PDF1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        nx, ny, bflag = struct.unpack("<IIB", fh.read(9))
        raw = fh.read(nx * ny * 8)
    if len(raw) != nx * ny * 8:
        raise ValueError(f"{path}: truncated payload")
    values = np.frombuffer(raw, dtype="<f8").reshape(ny, nx)
    return Field(Grid2D(nx, ny, lx, ly, Boundary(bflag)), values)
