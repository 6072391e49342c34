"""Axis-aligned boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WindowError


@dataclass(frozen=True)
class Box:
    """Half-open box ``[lo, hi)`` in R^d."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != len(hi) or not lo:
            raise WindowError("box corners must have the same positive length")
        if not all(np.isfinite(lo + hi)):
            raise WindowError("box corners must be finite")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, lo: float, hi: float, d: int) -> "Box":
        return cls((lo,) * d, (hi,) * d)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(np.clip(self.lengths, 0.0, None)))

    @property
    def is_degenerate(self) -> bool:
        return bool(np.any(self.lengths <= 0))

    def scaled(self, factor: float) -> "Box":
        return Box(tuple(factor * x for x in self.lo), tuple(factor * x for x in self.hi))

    def padded(self, pad: float) -> "Box":
        return Box(tuple(x - pad for x in self.lo), tuple(x + pad for x in self.hi))

    def contains_box(self, other: "Box", rtol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.lo + self.hi))))
        tol = rtol * scale
        return all(a <= b + tol for a, b in zip(self.lo, other.lo)) and all(
            a >= b - tol for a, b in zip(self.hi, other.hi)
        )

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return np.all((pts >= self.lo) & (pts < self.hi), axis=1)

    def to_list(self) -> dict:
        return {"min": list(self.lo), "max": list(self.hi)}
