"""Discretised Fredholm equations of the second kind for the projection b(.).

All variants share one operator shape.  A system is defined by a weighted set
of covariate points ``x_n`` (data rows, kernel-weighted rows, or quadrature
points of a covariate density) and the working mechanism at the grid nodes.
With ``f_n(t) = f(t, x_n; beta)`` and ``D_n = 1 - sum_k w_k f_n(t_k) pi_k``::

    diag(y)     = sum_n a_n f_n(y)
    kernel(j,k) = w_k pi_k sum_n a_n f_n(t_j) f_n(t_k) / D_n
    rhs(y)      = sum_n a_n {f'_n(y) + f_n(y) sum_k w_k f'_n(t_k) pi_k / D_n}

and ``b`` solves ``diag * b + kernel @ b = rhs`` at the nodes (Nystrom
collocation).  ``a_n`` are the point weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .integrate import XGrid, YGrid
from .kernels import KernelSpec, product_kernel

DENOM_GUARD = 1e-10
COND_LIMIT = 1e12
# bound on elements of the (S, n, m, p) gradient array built per chunk
CHUNK_ELEMENTS = 4_000_000


class FredholmError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SystemBatch:
    """``S`` systems on one grid; every array has a leading system axis.

    ``owner[s, n]`` is the data row behind support point ``n`` (``-1`` for
    quadrature points of a density); padded points carry zero weight.
    """

    grid: YGrid
    model: object
    beta: np.ndarray
    points: np.ndarray  # (S, n, d)
    point_weights: np.ndarray  # (S, n)
    owner: np.ndarray  # (S, n)
    pi: np.ndarray  # (S, m)
    F: np.ndarray  # (S, n, m)
    Fd: np.ndarray  # (S, n, m, p)
    denom: np.ndarray  # (S, n)
    cvec: np.ndarray  # (S, n, p)
    diag: np.ndarray  # (S, m)
    kernel: np.ndarray  # (S, m, m)
    rhs: np.ndarray  # (S, m, p)

    @property
    def S(self) -> int:
        return self.diag.shape[0]

    def __getitem__(self, s: int) -> "FredholmSystem":
        return FredholmSystem(self, s)

    def matrix(self) -> np.ndarray:
        m = self.grid.m
        return self.kernel + self.diag[:, :, None] * np.eye(m)

    def apply(self, b: np.ndarray) -> np.ndarray:
        """Discrete operator applied to grid functions ``b`` of shape (S, m, p)."""
        return self.diag[:, :, None] * b + self.kernel @ b


class FredholmSystem:
    """One discretised operator ``A`` with its right-hand side ``v``."""

    def __init__(self, batch: SystemBatch, index: int = 0):
        self.batch = batch
        self.index = index

    @property
    def grid(self) -> YGrid:
        return self.batch.grid

    @property
    def diag(self) -> np.ndarray:
        return self.batch.diag[self.index]

    @property
    def kernel(self) -> np.ndarray:
        return self.batch.kernel[self.index]

    @property
    def rhs(self) -> np.ndarray:
        return self.batch.rhs[self.index]

    def matrix(self) -> np.ndarray:
        return self.kernel + np.diag(self.diag)

    def apply(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return self.diag.reshape((-1,) + (1,) * (b.ndim - 1)) * b + self.kernel @ b

    def operator_bound(self) -> float:
        """Sup-norm bound ``max diag + max row-sum |kernel|`` of the operator."""
        return float(self.diag.max() + np.abs(self.kernel).sum(axis=1).max())


@dataclass(frozen=True, eq=False)
class BSolution:
    grid: YGrid
    values: np.ndarray  # (m, p)
    residual_sup_norm: float
    condition: float
    system: Optional[FredholmSystem] = None


def build_batch(model, beta, grid: YGrid, points, weights, pi, owner=None) -> SystemBatch:
    """Assemble ``S`` systems from covariate points ``(S, n, d)`` and weights ``(S, n)``."""
    beta = np.asarray(beta, dtype=float)
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    pi = np.asarray(pi, dtype=float)
    S, n, _ = points.shape
    m, p = grid.m, beta.size
    if owner is None:
        owner = -np.ones((S, n), dtype=int)
    F, Fd = model.density_and_grad(beta, grid.nodes, points[:, :, None, :])
    wpi = grid.weights * pi  # (S, m)
    q = np.einsum("snm,sm->sn", F, wpi)
    denom = 1.0 - q
    live = weights != 0
    if np.any(live & (denom <= DENOM_GUARD)):
        s, i = np.argwhere(live & (denom <= DENOM_GUARD))[0]
        who = owner[s, i] if owner[s, i] >= 0 else f"support point {i}"
        raise FredholmError(
            f"conditional missingness probability numerically zero (1 - int f pi* = {denom[s, i]:.3g}) "
            f"for observation {who}"
        )
    denom = np.where(live, denom, 1.0)
    cvec = np.einsum("snmp,sm->snp", Fd, wpi) / denom[:, :, None]
    diag = np.einsum("sn,snm->sm", weights, F)
    wf = (weights / denom)[:, :, None] * F
    kernel = np.einsum("snj,snk->sjk", wf, F) * wpi[:, None, :]
    rhs = np.einsum("sn,snmp->smp", weights, Fd) + np.einsum("sn,snm,snp->smp", weights, F, cvec)
    return SystemBatch(
        grid, model, beta, points, weights, np.asarray(owner), pi, F, Fd, denom, cvec, diag, kernel, rhs
    )


def solve_batch(batch: SystemBatch, need_condition: bool = True):
    """Solve every system; returns ``(values (S, m, p), residual (S,), condition (S,))``.

    Rows are scaled by the diagonal before factorisation: tail nodes carry
    tiny densities that would otherwise dominate the condition number.
    """
    diag = batch.diag
    if not np.all(np.isfinite(batch.kernel)) or not np.all(np.isfinite(batch.rhs)):
        raise FredholmError("non-finite entries in the assembled system")
    if np.any(diag <= 0):
        s = int(np.argwhere(diag <= 0)[0, 0])
        raise FredholmError(f"system {s}: diagonal not strictly positive (empty neighbourhood?)")
    scaled = batch.matrix() / diag[:, :, None]
    cond = np.linalg.cond(scaled) if need_condition else np.ones(batch.S)
    if np.any(~np.isfinite(cond) | (cond > COND_LIMIT)):
        s = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise FredholmError(f"system {s} is numerically singular (condition {cond[s]:.3g})")
    values = np.linalg.solve(scaled, batch.rhs / diag[:, :, None])
    resid = np.abs(batch.apply(values) - batch.rhs).max(axis=(1, 2))
    return values, resid, cond


def solve_system(sys: FredholmSystem) -> BSolution:
    """Nystrom solve of one system, all ``p`` right-hand sides at once."""
    sub = _single(sys)
    values, resid, cond = solve_batch(sub)
    return BSolution(sys.grid, values[0], float(resid[0]), float(cond[0]), FredholmSystem(sub, 0))


def _single(sys: FredholmSystem) -> SystemBatch:
    if sys.batch.S == 1:
        return sys.batch
    b, s = sys.batch, sys.index
    sl = slice(s, s + 1)
    return SystemBatch(
        b.grid, b.model, b.beta, b.points[sl], b.point_weights[sl], b.owner[sl], b.pi[sl],
        b.F[sl], b.Fd[sl], b.denom[sl], b.cvec[sl], b.diag[sl], b.kernel[sl], b.rhs[sl],
    )


def support_drift(batch: SystemBatch, values: np.ndarray) -> np.ndarray:
    """``m_n = sum_k w_k pi_k (f'_n - b f_n)(t_k) / D_n`` for every support point, (S, n, p)."""
    wpi = batch.grid.weights * batch.pi
    d = np.einsum("snm,sm,smp->snp", batch.F, wpi, values) / batch.denom[:, :, None]
    return batch.cvec - d


def nystrom_eval(batch: SystemBatch, values: np.ndarray, sys_index, y) -> np.ndarray:
    """Natural Nystrom interpolant of the solution at ``y`` in system ``sys_index``.

    Returns ``(Q, p)``; ``sys_index`` and ``y`` are length-``Q`` arrays.
    """
    sys_index = np.atleast_1d(np.asarray(sys_index, dtype=int))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    drift = support_drift(batch, values)
    out = np.empty((y.size, batch.beta.size))
    n, d = batch.points.shape[1:]
    step = max(1, CHUNK_ELEMENTS // (n * batch.beta.size))
    for s0 in range(0, y.size, step):
        sl = slice(s0, s0 + step)
        idx = sys_index[sl]
        f, fd = batch.model.density_and_grad(batch.beta, y[sl, None], batch.points[idx])
        w = batch.point_weights[idx]
        num = np.einsum("qn,qnp->qp", w, fd) + np.einsum("qn,qn,qnp->qp", w, f, drift[idx])
        den = np.einsum("qn,qn->q", w, f)
        if np.any(den <= 0):
            raise FredholmError("Nystrom evaluation outside the support of the system")
        out[sl] = num / den[:, None]
    return out


def interpolate_b(b: BSolution, y, method: str = "linear") -> np.ndarray:
    """Evaluate the solved grid function at ``y``.

    Binary grids are looked up exactly.  ``method="linear"`` interpolates
    piecewise-linearly with constant extrapolation; ``method="nystrom"`` uses
    the natural Nystrom interpolant (needs ``b.system``).
    """
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    grid = b.grid
    if grid.is_discrete:
        idx = np.searchsorted(grid.nodes, y)
        if np.any(idx >= grid.m) or np.any(grid.nodes[np.minimum(idx, grid.m - 1)] != y):
            raise ValueError("binary grid can only be evaluated at 0 or 1")
        out = b.values[idx]
    elif method == "linear":
        out = np.stack([np.interp(y, grid.nodes, b.values[:, j]) for j in range(b.values.shape[1])], axis=-1)
    elif method == "nystrom":
        if b.system is None:
            raise ValueError("Nystrom interpolation needs the originating system")
        batch = _single(b.system)
        out = nystrom_eval(batch, b.values[None], np.zeros(y.size, dtype=int), y)
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    return out[0] if scalar else out


def _pi_nodes(mech, grid: YGrid, u0=None) -> np.ndarray:
    if mech.u_dim:
        if u0 is None:
            raise ValueError("this working mechanism depends on u; pass the system's u")
        u0 = np.broadcast_to(np.asarray(u0, dtype=float), (grid.m, mech.u_dim))
        return mech.prob(grid.nodes, u0)
    return mech.prob(grid.nodes)


def assemble_empirical(data, model, mech, beta, grid: YGrid) -> FredholmSystem:
    """Empirical-average system with the whole covariate as shadow variable."""
    if data.N < 2:
        raise ValueError("need at least two observations")
    if mech.u_dim:
        raise ValueError("the special assumption uses a working mechanism in y only")
    x = data.x
    pi = _pi_nodes(mech, grid)
    batch = build_batch(
        model, beta, grid, x[None], np.full((1, data.N), 1.0 / data.N), pi[None], np.arange(data.N)[None]
    )
    return batch[0]


def _replace_u(data, u_value):
    """Covariate rows with every u replaced by ``u_value``."""
    u = np.broadcast_to(np.asarray(u_value, dtype=float), (data.N, data.du))
    return np.hstack([u, data.z])


def assemble_general(
    data, model, mech, beta, grid: YGrid, u0, kernel_spec: KernelSpec, bandwidth: float
) -> FredholmSystem:
    """Kernel-weighted system at continuous ``u0``; each row is evaluated at ``(u0, z_i)``."""
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    weights = product_kernel(kernel_spec, data.u - u0, bandwidth) / data.N
    if not np.any(weights > 0):
        raise FredholmError(f"no observation within bandwidth {bandwidth:g} of u = {u0}")
    pi = _pi_nodes(mech, grid, u0)
    batch = build_batch(
        model, beta, grid, _replace_u(data, u0)[None], weights[None], pi[None], np.arange(data.N)[None]
    )
    return batch[0]


def assemble_stratified(
    data,
    model,
    mech,
    beta,
    grid: YGrid,
    u_stratum,
    discrete_cols=None,
    u_cont0=None,
    kernel_spec: Optional[KernelSpec] = None,
    bandwidth: Optional[float] = None,
) -> FredholmSystem:
    """System restricted to rows whose discrete u equals ``u_stratum``.

    With ``discrete_cols`` a strict subset of the u columns, the remaining
    continuous columns are kernel weighted around ``u_cont0``.  The
    normaliser is the stratum count ``N_k``.
    """
    du = data.du
    dcols = np.arange(du) if discrete_cols is None else np.asarray(discrete_cols, dtype=int)
    ccols = np.setdiff1d(np.arange(du), dcols)
    u_stratum = np.atleast_1d(np.asarray(u_stratum, dtype=float))
    member = np.all(data.u[:, dcols] == u_stratum, axis=1)
    n_k = int(member.sum())
    if n_k == 0:
        raise FredholmError(f"empty stratum u = {u_stratum}")
    weights = member / n_k
    u_target = np.empty(du)
    u_target[dcols] = u_stratum
    if ccols.size:
        if u_cont0 is None or kernel_spec is None or bandwidth is None:
            raise ValueError("mixed strata need u_cont0, kernel_spec and bandwidth")
        u_cont0 = np.atleast_1d(np.asarray(u_cont0, dtype=float))
        weights = weights * product_kernel(kernel_spec, data.u[:, ccols] - u_cont0, bandwidth)
        u_target[ccols] = u_cont0
        if not np.any(weights > 0):
            raise FredholmError("no stratum member within the bandwidth")
    pi = _pi_nodes(mech, grid, u_target)
    batch = build_batch(
        model, beta, grid, _replace_u(data, u_target)[None], weights[None], pi[None], np.arange(data.N)[None]
    )
    return batch[0]


def assemble_density(model, mech, beta, grid: YGrid, xgrid: XGrid, u0=None) -> FredholmSystem:
    """System with the empirical average replaced by an expectation rule over x.

    ``xgrid`` holds the covariate points and weights (oracle, parametric or
    kernel estimate of the density); ``u0`` fixes the mechanism's u.
    """
    if not np.all(np.isfinite(xgrid.weights)) or np.any(xgrid.weights <= 0):
        raise ValueError("covariate density must be strictly positive at every grid point")
    pi = _pi_nodes(mech, grid, u0)
    batch = build_batch(model, beta, grid, xgrid.points[None], xgrid.weights[None], pi[None])
    return batch[0]
