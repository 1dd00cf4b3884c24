"""Quadrature rules over the outcome and over covariates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

MAX_TENSOR_DIM = 4


def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Hermite rule for expectations under N(0, 1).

    ``sum(w * g(t))`` approximates ``E g(T)``; exact for polynomials of degree
    at most ``2n - 1``.  Weights sum to one.
    """
    if not (isinstance(n, (int, np.integer)) and 1 <= n <= 64):
        raise ValueError(f"Gauss-Hermite size must be an integer in [1, 64], got {n!r}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(int(n))
    # enforce exact mirror symmetry so odd moments cancel pairwise
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights / weights.sum()


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule on [-1, 1] (weights sum to 2)."""
    return np.polynomial.legendre.leggauss(int(n))


def _std_normal_pdf(t):
    return np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class YGrid:
    """Support for all integrals over the outcome.

    ``weights`` are plain integration weights: ``sum(weights * g(nodes))``
    approximates ``int g(t) dt`` (Lebesgue) or ``g(0) + g(1)`` (counting).
    """

    nodes: np.ndarray
    weights: np.ndarray
    kind: str
    center: float = 0.0
    scale: float = 1.0

    @property
    def m(self) -> int:
        return self.nodes.size

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete_support"

    @classmethod
    def discrete(cls) -> "YGrid":
        return cls(np.array([0.0, 1.0]), np.array([1.0, 1.0]), "discrete_support")

    @classmethod
    def gauss_hermite_affine(cls, n: int, center: float, scale: float) -> "YGrid":
        if not scale > 0:
            raise ValueError("grid scale must be positive")
        t, w = gauss_hermite(n)
        nodes = center + scale * t
        weights = w * scale / _std_normal_pdf(t)
        return cls(nodes, weights, "gauss_hermite_affine", float(center), float(scale))


def y_grid(model, data, n: int = 15, envelope: float = 1.5) -> YGrid:
    """Global outcome grid shared by every observation.

    Binary outcomes get the two-point counting grid.  Continuous outcomes get
    an affine Gauss-Hermite grid centred at the mean of the observed outcomes
    with scale ``envelope`` times their standard deviation.
    """
    if model.support == "binary01":
        return YGrid.discrete()
    y_obs = data.y[data.r]
    if y_obs.size < 2:
        raise ValueError("need at least two observed outcomes to place the outcome grid")
    sd = float(np.std(y_obs))
    if not sd > 1e-12 * max(1.0, abs(float(np.mean(y_obs)))):
        raise ValueError("degenerate outcome spread: observed outcomes are all equal")
    return YGrid.gauss_hermite_affine(n, float(np.mean(y_obs)), envelope * sd)


def integrate_y(grid: YGrid, integrand: Callable[[np.ndarray], np.ndarray]):
    """Apply the grid rule to ``integrand`` (values may carry trailing axes)."""
    vals = np.asarray(integrand(grid.nodes), dtype=float)
    if vals.shape[:1] != (grid.m,):
        raise ValueError("integrand must return one value (or vector) per node")
    if not np.all(np.isfinite(vals)):
        bad = np.flatnonzero(~np.all(np.isfinite(vals.reshape(grid.m, -1)), axis=1))
        raise FloatingPointError(f"non-finite integrand at grid nodes {grid.nodes[bad]}")
    out = np.tensordot(grid.weights, vals, axes=(0, 0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class XGrid:
    """Weighted point set standing in for an expectation over covariates."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] != np.size(self.weights) and pts.shape[1] == np.size(self.weights):
            pts = pts.T
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.size:
            raise ValueError("one weight per covariate point required")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.size

    def expect(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


def tensor_grid(
    rules: Sequence[tuple],
    loc: Optional[Sequence[float]] = None,
    scale=None,
) -> XGrid:
    """Cartesian product of one-dimensional rules.

    Parameters
    ----------
    rules : sequence of (nodes, weights)
    loc : array_like, optional
        Shift added after the linear map.
    scale : array_like, optional
        Either per-coordinate scales or a square matrix ``L`` giving points
        ``loc + L @ t``; with ``L`` a Cholesky factor of a covariance and
        standard-normal Gauss-Hermite factors this integrates against that
        multivariate normal.
    """
    d = len(rules)
    if d == 0 or d > MAX_TENSOR_DIM:
        raise ValueError(f"tensor grids support 1 to {MAX_TENSOR_DIM} dimensions, got {d}")
    mesh = np.meshgrid(*[np.asarray(r[0], dtype=float) for r in rules], indexing="ij")
    wmesh = np.meshgrid(*[np.asarray(r[1], dtype=float) for r in rules], indexing="ij")
    t = np.stack([m.ravel() for m in mesh], axis=1)
    w = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    if scale is not None:
        scale = np.asarray(scale, dtype=float)
        t = t @ scale.T if scale.ndim == 2 else t * scale
    if loc is not None:
        t = t + np.asarray(loc, dtype=float)
    return XGrid(t, w)


def normal_xgrid(mean, cov, n_per_dim: int) -> XGrid:
    """Gauss-Hermite product rule for expectations under N(mean, cov)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    chol = np.linalg.cholesky(cov)
    rule = gauss_hermite(n_per_dim)
    return tensor_grid([rule] * mean.size, loc=mean, scale=chol)
