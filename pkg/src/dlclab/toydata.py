"""Equal-weight Gaussian mixtures whose centers sit on a square grid."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class GridMixtureSpec:
    """``rows x cols`` isotropic Gaussians, grid centered at the origin.

    ``variance`` is the per-axis component variance. The default 0.01 makes
    the component standard deviation 0.1.
    """

    rows: int
    cols: int
    spacing: float = 1.0
    variance: float = 0.01

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if self.spacing <= 0 or self.variance < 0:
            raise ValueError("spacing must be positive and variance non-negative")

    @classmethod
    def square(cls, n_modes: int, **kw) -> "GridMixtureSpec":
        m = math.isqrt(n_modes)
        if m * m != n_modes:
            raise ValueError(f"{n_modes} is not a square number")
        return cls(m, m, **kw)

    @property
    def n_modes(self) -> int:
        return self.rows * self.cols

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def centers(self) -> np.ndarray:
        """(N, 2) centers, row-major: mode index = row * cols + col."""
        r = (np.arange(self.rows) - (self.rows - 1) / 2.0) * self.spacing
        c = (np.arange(self.cols) - (self.cols - 1) / 2.0) * self.spacing
        rr, cc = np.meshgrid(r, c, indexing="ij")
        # x0 follows the column, x1 the row
        return np.stack([cc.ravel(), rr.ravel()], axis=1)

    def mode_index(self, row, col):
        return np.asarray(row) * self.cols + np.asarray(col)

    def row_col(self, mode):
        mode = np.asarray(mode)
        return mode // self.cols, mode % self.cols

    def extent(self) -> float:
        """Half-width of the bounding box of the centers."""
        return max(self.rows - 1, self.cols - 1) * self.spacing / 2.0


@dataclass
class LabeledSamples:
    x: np.ndarray
    mode: np.ndarray
    row: np.ndarray
    col: np.ndarray

    def __len__(self):
        return len(self.mode)


def sample(spec: GridMixtureSpec, n: int, rng: np.random.Generator) -> LabeledSamples:
    if n < 1:
        raise ValueError("n must be >= 1")
    mode = rng.integers(spec.n_modes, size=n)
    x = spec.centers()[mode] + spec.std * rng.standard_normal((n, 2))
    row, col = spec.row_col(mode)
    return LabeledSamples(x=x, mode=mode, row=row, col=col)


def exact_log_density(spec: GridMixtureSpec, x) -> np.ndarray:
    """Log of the mixture density at each row of ``x`` (log-sum-exp over modes)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = spec.variance
    C = spec.centers()
    out = np.empty(len(x))
    chunk = max(1, 2_000_000 // len(C))
    for s in range(0, len(x), chunk):
        d2 = ((x[s:s + chunk, None, :] - C[None]) ** 2).sum(-1)
        out[s:s + chunk] = logsumexp(-d2 / (2 * var), axis=1)
    return out - math.log(spec.n_modes) - math.log(2 * math.pi * var)


def to_csv(samples: LabeledSamples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["x0", "x1", "mode", "row", "col"])
    for (a, b), m, r, c in zip(samples.x, samples.mode, samples.row, samples.col):
        w.writerow([repr(float(a)), repr(float(b)), int(m), int(r), int(c)])
    return buf.getvalue()
