"""Regular node grids, node fields and the masked stencil solver."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .box import Box
from .errors import ConvergenceError, GridMismatchError

INTERIOR, HOLE, BOUNDARY, EXTERIOR = 0, 1, 2, 3


@dataclass(frozen=True)
class GridSpec:
    """Nodes ``origin + h * i`` for ``0 <= i < shape`` along each axis."""

    origin: tuple[float, ...]
    h: float
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def covering(cls, domain: Box, h: float) -> "GridSpec":
        """Grid whose outermost nodes lie on the faces of ``domain``."""
        cells = domain.lengths / h
        n = np.rint(cells).astype(int)
        if np.any(n < 2) or np.any(np.abs(cells - n) > 1e-9 * np.maximum(cells, 1.0)):
            raise GridMismatchError(f"spacing {h} does not divide the domain {domain}")
        return cls(domain.lo, h, tuple(n + 1))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axes(self) -> list[np.ndarray]:
        return [o + self.h * np.arange(n) for o, n in zip(self.origin, self.shape)]

    def strides(self) -> np.ndarray:
        """Flat-index offsets of a unit step along each axis (C order)."""
        s = np.cumprod((1,) + self.shape[:0:-1])[::-1]
        return np.ascontiguousarray(s, dtype=np.int64)

    def index_box(self, lo, hi) -> tuple[slice, ...]:
        """Slices selecting the nodes with lo <= x <= hi (clipped to the grid)."""
        out = []
        for o, n, a, b in zip(self.origin, self.shape, lo, hi):
            i0 = max(0, int(math.ceil((a - o) / self.h - 1e-9)))
            i1 = min(n - 1, int(math.floor((b - o) / self.h + 1e-9)))
            out.append(slice(i0, max(i0, i1 + 1)))
        return tuple(out)

    def coords(self, sl: tuple[slice, ...]) -> list[np.ndarray]:
        """Broadcastable coordinate arrays for a block of nodes."""
        d = self.dim
        out = []
        for k, (o, s) in enumerate(zip(self.origin, sl)):
            shape = [1] * d
            x = o + self.h * np.arange(s.start, s.stop)
            shape[k] = len(x)
            out.append(x.reshape(shape))
        return out

    def matches(self, other: "GridSpec") -> bool:
        return self.shape == other.shape and math.isclose(self.h, other.h, rel_tol=1e-12) and all(
            math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12 * self.h)
            for a, b in zip(self.origin, other.origin))


@dataclass(frozen=True)
class GridField:
    grid: GridSpec
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise GridMismatchError(f"values of shape {v.shape} on grid {self.grid.shape}")
        object.__setattr__(self, "values", v)

    def same_grid(self, other: "GridField") -> None:
        if not self.grid.matches(other.grid):
            raise GridMismatchError("fields live on different grids")


def boundary_mask(grid: GridSpec) -> np.ndarray:
    mask = np.full(grid.shape, INTERIOR, dtype=np.int8)
    for k in range(grid.dim):
        idx = [slice(None)] * grid.dim
        idx[k] = 0
        mask[tuple(idx)] = BOUNDARY
        idx[k] = -1
        mask[tuple(idx)] = BOUNDARY
    return mask


def mark_balls(grid: GridSpec, centers, radii, out: np.ndarray, value=True) -> None:
    """Set ``out`` to ``value`` at nodes with |x - c| <= r for any ball."""
    for c, r in zip(np.asarray(centers).reshape(-1, grid.dim), np.asarray(radii).ravel()):
        sl = grid.index_box(c - r, c + r)
        if any(s.stop <= s.start for s in sl):
            continue
        xs = grid.coords(sl)
        dist2 = sum((x - ck) ** 2 for x, ck in zip(xs, c))
        block = out[sl]
        block[dist2 <= r * r] = value


def solve_stencil(grid: GridSpec, unknown: np.ndarray, diag: np.ndarray, rhs: np.ndarray,
                  tol: float = 1e-8, maxiter: int = 100_000) -> tuple[np.ndarray, int, float, float]:
    """CG on (diag_i u_i - sum over unknown neighbors u_j / h^2) = rhs_i.

    ``unknown`` is a boolean node mask; ``diag`` and ``rhs`` are full-grid
    arrays read at unknown nodes.  Unknown nodes must not touch the grid edge.
    Returns (field with zeros off the unknown set, iterations, residual, seconds).
    """
    start = time.perf_counter()
    inv_h2 = 1.0 / (grid.h * grid.h)
    if grid.dim == 3:
        x = np.zeros(grid.shape)
        b = np.where(unknown, rhs, 0.0)
        dg = np.where(unknown, diag, 0.0)
        it, res = _kernels.pcg3(dg, inv_h2, b, x, tol, maxiter)
    else:
        idx = np.flatnonzero(unknown.ravel()).astype(np.int64)
        x = np.zeros(grid.size)
        it, res = _kernels.pcg(idx, grid.strides(), np.ascontiguousarray(diag.ravel()[idx]),
                               inv_h2, np.ascontiguousarray(rhs.ravel()[idx], dtype=float), x,
                               tol, maxiter) if idx.size else (0, 0.0)
    elapsed = time.perf_counter() - start
    if not res <= tol:
        raise ConvergenceError(f"CG stopped after {it} iterations at relative residual {res:.3e}",
                               it, res)
    return x.reshape(grid.shape), int(it), float(res), elapsed


def forward_differences(values: np.ndarray):
    for k in range(values.ndim):
        yield np.diff(values, axis=k)


def link_energy(values: np.ndarray, h: float) -> float:
    """h^(d-2) * sum over grid links of squared differences."""
    d = values.ndim
    parts = [math.fsum(np.square(g).ravel()) for g in forward_differences(values)]
    return h ** (d - 2) * math.fsum(parts)


# ------------------------------------------------------------------ I/O


def format_field(field: GridField) -> str:
    g = field.grid
    head = [str(g.dim), f"{g.h:.17g}", *map(str, g.shape), *(f"{o:.17g}" for o in g.origin)]
    body = "\n".join(f"{v:.17g}" for v in field.values.ravel(order="C"))
    return " ".join(head) + "\n" + body + "\n"


def write_field(field: GridField, path: str | Path) -> None:
    Path(path).write_text(format_field(field))


def read_field(path: str | Path) -> GridField:
    tokens = Path(path).read_text().split()
    d = int(tokens[0])
    h = float(tokens[1])
    shape = tuple(int(t) for t in tokens[2:2 + d])
    origin = tuple(float(t) for t in tokens[2 + d:2 + 2 * d])
    vals = np.array(tokens[2 + 2 * d:], dtype=float)
    if vals.size != int(np.prod(shape)):
        raise GridMismatchError(f"expected {int(np.prod(shape))} values, found {vals.size}")
    return GridField(GridSpec(origin, h, shape), vals.reshape(shape))
