"""Working efficient score, estimating equation, root finding and variance.

Every variant reduces to a *plan*: a block of Fredholm systems given by
weighted covariate support points, plus the system index of each data row.
The plan does not depend on beta, so the root finder re-assembles only the
densities at each trial value.

Variants
--------
empirical
    Empirical average over data rows (special assumption) or kernel /
    stratum weighted averages at each observed ``u`` (general assumption).
general_empirical
    Alias for ``empirical`` under the general assumption.
nonparametric_kde
    Data rows smoothed by the kernel in their continuous coordinates.
parametric_fx
    Quadrature against a fitted parametric covariate density.
oracle
    Quadrature against a known covariate density.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from . import fredholm
from .densities import DENSITY_FAMILIES, default_nodes
from .fredholm import BSolution, FredholmError, build_batch, interpolate_b, solve_batch, support_drift
from .integrate import YGrid, gauss_legendre, y_grid
from .kernels import BandwidthRule, KernelSpec, bandwidth, kernel_eval, product_kernel
from .model import Dataset, MechanismModel, Observation, OutcomeModel

VARIANTS = ("empirical", "general_empirical", "nonparametric_kde", "parametric_fx", "oracle")
VARIANCES = ("sandwich_plugin", "bootstrap", "none")
CHUNK_ELEMENTS = 4_000_000
DISCRETE_MAX_LEVELS = 10
MAX_STEP = 2.0
# a certified root needs a full Newton step below STEP_TOL * (1 + |beta|)
STEP_TOL = 1e-4


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Everything ``fit`` needs besides the data.

    Parameters
    ----------
    model, mech : OutcomeModel, MechanismModel
        Outcome law and the fixed working mechanism.
    variant : str
        One of ``VARIANTS``.
    assumption : {"special", "general"}
        ``special`` treats every covariate as shadow variable; ``general``
        lets the mechanism depend on the ``u`` columns.
    grid_size, envelope : int, float
        Outcome grid size and its scale relative to the observed spread.
    bandwidth_rule : BandwidthRule, optional
        Defaults to ``BandwidthRule.default_for(d)`` with ``d`` the number of
        smoothed continuous coordinates.
    density_family : str, optional
        Parametric family for ``parametric_fx``.
    density : object, optional
        Known covariate density for ``oracle`` (see ``shadowfit.densities``).
    discrete_u : tuple of int, optional
        Indices of discrete ``u`` columns; detected from the data when None.
    interpolation : {"nystrom", "linear"}
        Off-grid evaluation of b at observed outcomes.
    """

    model: OutcomeModel
    mech: MechanismModel
    variant: str = "empirical"
    assumption: str = "special"
    grid_size: int = 15
    envelope: float = 1.5
    kernel: KernelSpec = field(default_factory=KernelSpec)
    bandwidth_rule: Optional[BandwidthRule] = None
    tol: float = 1e-8
    max_iter: int = 100
    fd_step: float = 1e-5
    variance: str = "sandwich_plugin"
    bootstrap_B: int = 200
    seed: int = 0
    density_family: Optional[str] = None
    density: Optional[object] = None
    xgrid_size: Optional[int] = None
    kde_nodes: Optional[int] = None
    discrete_u: Optional[tuple] = None
    interpolation: str = "nystrom"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "general_empirical":
            object.__setattr__(self, "assumption", "general")
        if self.assumption not in ("special", "general"):
            raise ValueError(f"unknown assumption {self.assumption!r}")
        if self.variance not in VARIANCES:
            raise ValueError(f"unknown variance method {self.variance!r}")
        if self.interpolation not in ("nystrom", "linear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.variant == "oracle" and self.density is None:
            raise ValueError("the oracle variant needs the true covariate density")
        if self.variant == "parametric_fx" and self.density_family not in DENSITY_FAMILIES:
            raise ValueError(f"parametric_fx needs density_family in {sorted(DENSITY_FAMILIES)}")
        if self.assumption == "special" and self.mech.u_dim:
            raise ValueError("the special assumption needs a working mechanism in y only")
        if not (self.tol > 0 and self.fd_step > 0 and self.max_iter >= 1):
            raise ValueError("solver settings must be positive")


@dataclass(frozen=True, eq=False)
class ParametricDensityFit:
    family: str
    alpha_hat: np.ndarray
    density: object
    information: np.ndarray
    log_density_grad: Callable
    influence_phi: Callable


@dataclass(frozen=True, eq=False)
class SandwichParts:
    score_terms: np.ndarray
    h_terms: np.ndarray
    a_matrix: np.ndarray
    b_matrix: np.ndarray


@dataclass(eq=False)
class FitResult:
    beta_hat: np.ndarray
    covariance: Optional[np.ndarray]
    std_errors: Optional[np.ndarray]
    A_hat: Optional[np.ndarray]
    B_hat: Optional[np.ndarray]
    iterations: int
    converged: bool
    residual_norm: float
    parts: Optional[SandwichParts] = None
    diagnostics: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# baselines


def logistic_mle(x, y, max_iter: int = 100) -> np.ndarray:
    """Logistic regression with intercept by Newton's method."""
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    y = np.asarray(y, dtype=float)
    design = np.hstack([np.ones((x.shape[0], 1)), x])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise EstimationError("rank-deficient design in logistic fit")
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        prob = expit(design @ beta)
        hess = design.T @ (design * (prob * (1 - prob))[:, None])
        step = np.linalg.solve(hess, design.T @ (y - prob))
        beta = beta + step
        if np.max(np.abs(beta)) > 50:
            raise EstimationError("logistic fit diverges (separation)")
        if np.max(np.abs(step)) < 1e-12:
            return beta
    raise EstimationError("logistic fit did not converge (separation?)")


def complete_case_fit(data: Dataset, model: OutcomeModel) -> np.ndarray:
    """Maximum likelihood on the rows with an observed outcome."""
    x = data.x[data.r]
    y = data.y[data.r]
    if x.shape[0] < model.p:
        raise EstimationError(f"need at least {model.p} complete cases, have {x.shape[0]}")
    if model.family == "linear_gaussian":
        design = np.hstack([np.ones((x.shape[0], 1)), x])
        beta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < model.p:
            raise EstimationError("rank-deficient complete-case design")
        return beta
    return logistic_mle(x, y)


def complete_case_covariance(data: Dataset, model: OutcomeModel, beta) -> np.ndarray:
    """Inverse observed information of the complete-case likelihood."""
    x = data.x[data.r]
    design = np.hstack([np.ones((x.shape[0], 1)), x])
    if model.family == "linear_gaussian":
        return model.sigma**2 * np.linalg.inv(design.T @ design)
    prob = expit(design @ beta)
    return np.linalg.inv(design.T @ (design * (prob * (1 - prob))[:, None]))


# ----------------------------------------------------------------------------
# covariate densities


def _alpha_information(dens, x) -> np.ndarray:
    alpha = dens.alpha
    q = alpha.size
    info = np.empty((q, q))
    for k in range(q):
        h = 1e-5 * (1.0 + abs(alpha[k]))
        up, dn = alpha.copy(), alpha.copy()
        up[k] += h
        dn[k] -= h
        info[:, k] = -(dens.with_alpha(up).mle_score(x).mean(0) - dens.with_alpha(dn).mle_score(x).mean(0)) / (2 * h)
    return 0.5 * (info + info.T)


def fit_covariate_density(data: Dataset, family: str) -> ParametricDensityFit:
    """Maximum likelihood fit of a parametric covariate density.

    ``multivariate_normal`` models the whole covariate ``(u, z)``; the
    ``*_z_given_u`` families model a single shadow variable given ``u``.
    ``influence_phi`` is the usual ``I^-1`` times the score of the fit.
    """
    if family not in DENSITY_FAMILIES:
        raise ValueError(f"unknown density family {family!r}")
    if family != "multivariate_normal" and (data.du < 1 or data.dz != 1):
        raise ValueError(f"{family} needs u columns and a single z column")
    x = data.x
    dens = DENSITY_FAMILIES[family].fit(x)
    info = _alpha_information(dens, x)
    if np.linalg.cond(info) > 1e12:
        raise EstimationError("singular information matrix for the covariate density")
    inv = np.linalg.inv(info)
    du = data.du
    return ParametricDensityFit(
        family,
        dens.alpha,
        dens,
        info,
        lambda xx: dens.system_score(np.atleast_2d(xx), du),
        lambda xx: dens.mle_score(np.atleast_2d(xx)) @ inv.T,
    )


# ----------------------------------------------------------------------------
# plans


@dataclass(frozen=True, eq=False)
class Plan:
    """Beta-free layout of every Fredholm system a variant needs."""

    model: OutcomeModel
    mech: MechanismModel
    grid: YGrid
    points: np.ndarray  # (S, n, d)
    weights: np.ndarray  # (S, n)
    owner: np.ndarray  # (S, n)
    pi: np.ndarray  # (S, m)
    sys_of_obs: np.ndarray  # (N,)
    x: np.ndarray
    r: np.ndarray
    y: np.ndarray
    interpolation: str = "nystrom"
    info: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.r.size

    @property
    def S(self) -> int:
        return self.points.shape[0]


def _discrete_columns(arr: np.ndarray, explicit=None) -> np.ndarray:
    if explicit is not None:
        return np.asarray(explicit, dtype=int)
    cols = []
    for j in range(arr.shape[1]):
        col = arr[:, j]
        if np.all(col == np.round(col)) and np.unique(col).size <= DISCRETE_MAX_LEVELS:
            cols.append(j)
    return np.asarray(cols, dtype=int)


def _pad(blocks, d):
    """Stack ragged (points, weights, owner) blocks, padding with zero weight."""
    n = max(b[1].size for b in blocks)
    S = len(blocks)
    pts = np.empty((S, n, d))
    w = np.zeros((S, n))
    own = -np.ones((S, n), dtype=int)
    for s, (p, ww, oo) in enumerate(blocks):
        k = ww.size
        pts[s, :k] = p
        pts[s, k:] = p[0]
        w[s, :k] = ww
        own[s, :k] = oo
    return pts, w, own


def _pi_for(mech, grid, u_rows):
    if mech.u_dim:
        return mech.prob(grid.nodes[None, :], u_rows[:, None, :])
    return np.broadcast_to(mech.prob(grid.nodes), (u_rows.shape[0], grid.m)).copy()


def _smoothing_offsets(dims: int, nodes: int):
    """Product Gauss-Legendre offsets ``v`` and weights ``K(v) w`` on the unit cube."""
    t, w = gauss_legendre(nodes)
    kw = kernel_eval(KernelSpec(), t) * w
    mesh = np.stack([m.ravel() for m in np.meshgrid(*[t] * dims, indexing="ij")], axis=1)
    wm = np.prod(np.stack([m.ravel() for m in np.meshgrid(*[kw] * dims, indexing="ij")], axis=1), axis=1)
    return mesh, wm


def _smooth(points, weights, owner, cols, h, nodes):
    """Replace each point by a kernel-weighted cloud in coordinates ``cols``."""
    if cols.size == 0:
        return points, weights, owner
    v, kw = _smoothing_offsets(cols.size, nodes)
    L = kw.size
    pts = np.repeat(points, L, axis=0)
    offs = np.zeros((L, points.shape[1]))
    offs[:, cols] = h * v
    pts = pts + np.tile(offs, (points.shape[0], 1))
    return pts, np.repeat(weights, L) * np.tile(kw, weights.size), np.repeat(owner, L)


def prepare_data(data: Dataset, config: FitConfig) -> Dataset:
    if config.assumption == "special":
        return data.as_special() if data.du else data
    if data.du == 0:
        raise ValueError("the general assumption needs at least one u column")
    if config.mech.u_dim not in (0, data.du):
        raise ValueError(f"mechanism uses {config.mech.u_dim} u columns, data has {data.du}")
    return data


def build_plan(data: Dataset, config: FitConfig, density=None) -> Plan:
    """Support layout for ``config.variant`` on prepared data."""
    model, mech = config.model, config.mech
    if data.x.shape[1] != model.covariate_dim:
        raise ValueError(f"model expects {model.covariate_dim} covariates, data has {data.x.shape[1]}")
    grid = y_grid(model, data, config.grid_size, config.envelope)
    N = data.N
    x = data.x
    variant = "empirical" if config.variant == "general_empirical" else config.variant
    info = {"variant": variant, "assumption": config.assumption}
    if variant in ("oracle", "parametric_fx"):
        density = density if density is not None else config.density
        blocks, sys_of_obs, u_rows = _density_blocks(data, density, config)
    elif config.assumption == "special":
        pts, w, own = x, np.full(N, 1.0 / N), np.arange(N)
        if variant == "nonparametric_kde":
            cont = np.setdiff1d(np.arange(x.shape[1]), _discrete_columns(x))
            if cont.size:
                rule = config.bandwidth_rule or BandwidthRule.default_for(cont.size)
                h = bandwidth(rule, N, cont.size)
                nodes = config.kde_nodes or (5 if cont.size == 1 else 3)
                pts, w, own = _smooth(pts, w, own, cont, h, nodes)
                info["bandwidth"] = h
        blocks, sys_of_obs, u_rows = [(pts, w, own)], np.zeros(N, dtype=int), np.empty((1, 0))
    else:
        blocks, sys_of_obs, u_rows = _general_blocks(data, config, smooth=variant == "nonparametric_kde", info=info)
    points, weights, owner = _pad(blocks, x.shape[1])
    pi = _pi_for(mech, grid, u_rows)
    info["n_systems"] = points.shape[0]
    info["support_size"] = points.shape[1]
    return Plan(
        model, mech, grid, points, weights, owner, pi, sys_of_obs, x, data.r, data.y, config.interpolation, info
    )


def _general_blocks(data, config, smooth, info):
    N = data.N
    u, z = data.u, data.z
    uniq, inv = np.unique(u, axis=0, return_inverse=True)
    inv = inv.ravel()
    dcols = _discrete_columns(u, config.discrete_u)
    ccols = np.setdiff1d(np.arange(data.du), dcols)
    zc = np.setdiff1d(np.arange(data.dz), _discrete_columns(z)) if smooth else np.empty(0, dtype=int)
    d_smooth = ccols.size + zc.size
    h = None
    if d_smooth:
        rule = config.bandwidth_rule or BandwidthRule.default_for(d_smooth)
        h = bandwidth(rule, N, d_smooth)
        info["bandwidth"] = h
    info["discrete_u"] = dcols.tolist()
    nodes = config.kde_nodes or (5 if zc.size == 1 else 3)
    blocks = []
    step = max(1, CHUNK_ELEMENTS // (4 * N))
    for s0 in range(0, uniq.shape[0], step):
        us = uniq[s0 : s0 + step]
        wmat = np.ones((us.shape[0], N))
        if dcols.size:
            member = np.all(u[None, :, dcols] == us[:, None, dcols], axis=-1)
            wmat = wmat * member / member.sum(axis=1, keepdims=True)
        else:
            wmat = wmat / N
        if ccols.size:
            wmat = wmat * product_kernel(config.kernel, u[None, :, ccols] - us[:, None, ccols], h)
        for k in range(us.shape[0]):
            idx = np.flatnonzero(wmat[k] > 0)
            if idx.size == 0:
                raise FredholmError(f"no observation within the bandwidth of u = {us[k]}")
            pts = np.hstack([np.broadcast_to(us[k], (idx.size, data.du)), z[idx]])
            pts, ww, own = pts, wmat[k, idx], idx
            if zc.size:
                pts, ww, own = _smooth(pts, ww, own, data.du + zc, h, nodes)
            blocks.append((pts, ww, own))
    return blocks, inv, uniq


def _density_blocks(data, density, config):
    if density is None:
        raise ValueError("density variants need a covariate density")
    n = config.xgrid_size
    if config.assumption == "special":
        g = density.joint_grid(n or default_nodes(data.x.shape[1]))
        blocks = [(g.points, g.weights, -np.ones(g.size, dtype=int))]
        return blocks, np.zeros(data.N, dtype=int), np.empty((1, 0))
    uniq, inv = np.unique(data.u, axis=0, return_inverse=True)
    z, w = density.conditional_grid(uniq, n or default_nodes(data.dz))
    pts = np.concatenate([np.broadcast_to(uniq[:, None, :], z.shape[:2] + (data.du,)), z], axis=-1)
    blocks = [(pts[s], np.asarray(w[s]), -np.ones(w.shape[1], dtype=int)) for s in range(uniq.shape[0])]
    return blocks, inv.ravel(), uniq


# ----------------------------------------------------------------------------
# score evaluation


@dataclass(eq=False)
class Evaluation:
    scores: np.ndarray
    h_terms: Optional[np.ndarray]
    max_residual: float
    max_condition: float


def _chunk_systems(plan: Plan) -> int:
    n = plan.points.shape[1]
    return max(1, CHUNK_ELEMENTS // (n * plan.grid.m * plan.model.p))


def evaluate(plan: Plan, beta, want_h: bool = False) -> Evaluation:
    """Per-row working efficient scores at ``beta``; optionally the h-terms.

    The h-term of row ``i`` is minus the first-order change of the mean score
    caused by row ``i``'s share in the system weights (see ``_h_chunk``).
    """
    beta = np.asarray(beta, dtype=float)
    model, grid = plan.model, plan.grid
    N, p = plan.N, model.p
    scores = np.empty((N, p))
    hterms = np.zeros((N, p)) if want_h else None
    order = np.argsort(plan.sys_of_obs, kind="stable")
    bounds = np.searchsorted(plan.sys_of_obs[order], np.arange(plan.S + 1))
    max_res = 0.0
    max_cond = 0.0
    step = _chunk_systems(plan)
    for s0 in range(0, plan.S, step):
        s1 = min(plan.S, s0 + step)
        sl = slice(s0, s1)
        batch = build_batch(
            model, beta, grid, plan.points[sl], plan.weights[sl], plan.pi[sl], plan.owner[sl]
        )
        values, resid, cond = solve_batch(batch)
        max_res = max(max_res, float(resid.max()))
        max_cond = max(max_cond, float(cond.max()))
        rows = order[bounds[s0] : bounds[s1]]
        ls = plan.sys_of_obs[rows] - s0
        drift = support_drift(batch, values)
        e = np.zeros((s1 - s0, grid.m)) if want_h else None
        T = np.zeros((s1 - s0, batch.points.shape[1], p)) if want_h else None
        obs = plan.r[rows]
        wpi = grid.weights * batch.pi
        # missing rows
        mr, ml = rows[~obs], ls[~obs]
        if mr.size:
            f, fd = model.density_and_grad(beta, grid.nodes, plan.x[mr][:, None, :])
            fw = f * wpi[ml]
            D = 1.0 - fw.sum(axis=1)
            if np.any(D <= fredholm.DENOM_GUARD):
                bad = mr[np.argmin(D)]
                raise FredholmError(f"conditional missingness probability numerically zero for observation {bad}")
            scores[mr] = -(np.einsum("qmp,qm->qp", fd, wpi[ml]) - np.einsum("qm,qmp->qp", fw, values[ml])) / D[:, None]
            if want_h:
                np.add.at(e, ml, fw / D[:, None])
        # observed rows
        orows, ol = rows[obs], ls[obs]
        if orows.size:
            by = _observed_b(plan, batch, values, drift, ol, plan.y[orows], e, T)
            scores[orows] = model.score(beta, plan.y[orows], plan.x[orows]) - by
        if want_h:
            _h_chunk(plan, batch, values, drift, e / N, T, hterms)
    return Evaluation(scores, hterms, max_res, max_cond)


def _observed_b(plan, batch, values, drift, ls, y, e=None, T=None):
    """b at observed outcomes; accumulate the h-term pieces when ``e`` is given."""
    grid = plan.grid
    model = plan.model
    if plan.interpolation == "linear" or grid.is_discrete:
        nodes = grid.nodes
        j = np.clip(np.searchsorted(nodes, y), 1, grid.m - 1)
        lam = np.clip((y - nodes[j - 1]) / (nodes[j] - nodes[j - 1]), 0.0, 1.0)
        by = (1 - lam)[:, None] * values[ls, j - 1] + lam[:, None] * values[ls, j]
        if e is not None:
            np.add.at(e, (ls, j - 1), -(1 - lam))
            np.add.at(e, (ls, j), -lam)
        return by
    n = batch.points.shape[1]
    p = model.p
    out = np.empty((y.size, p))
    wpi = grid.weights * batch.pi
    step = max(1, CHUNK_ELEMENTS // (n * max(p, grid.m)))
    for q0 in range(0, y.size, step):
        qs = slice(q0, q0 + step)
        idx = ls[qs]
        w = batch.point_weights[idx]
        f, fd = model.density_and_grad(batch.beta, y[qs, None], batch.points[idx])
        den = np.einsum("qn,qn->q", w, f)
        if np.any(den <= 0):
            raise FredholmError("observed outcome outside the support of its system")
        by = (np.einsum("qn,qnp->qp", w, fd) + np.einsum("qn,qn,qnp->qp", w, f, drift[idx])) / den[:, None]
        out[qs] = by
        if e is not None:
            a = w * f / batch.denom[idx]
            kq = np.einsum("qn,qnk->qk", a, batch.F[idx]) * wpi[idx]
            np.add.at(e, idx, kq / den[:, None])
            g = fd + f[:, :, None] * (drift[idx] - by[:, None, :])
            np.add.at(T, idx, g / den[:, None, None])
    return out


def _h_chunk(plan, batch, values, drift, e, T, hterms):
    """Add this chunk's contribution to the h-terms.

    Row ``i``'s share perturbs system ``s`` by ``G = N w_n g_n`` over its
    support points, with ``g_n(y) = f_n(y) (s_n(y) - b(y) + m_n)``.  The
    resulting change of the mean score is ``psi' G - N^-1 sum_obs G(y_j)/u1(y_j)``
    with ``psi`` solving the transposed system against the score's
    sensitivity ``e`` to the grid values.
    """
    N = plan.N
    diag = batch.diag
    scaled = batch.matrix() / diag[:, :, None]
    psi = np.linalg.solve(np.swapaxes(scaled, 1, 2), e[:, :, None])[:, :, 0] / diag
    ggrid = batch.Fd + batch.F[..., None] * (drift[:, :, None, :] - values[:, None, :, :])
    contrib = np.einsum("snkp,sk->snp", ggrid, psi) - T / N
    contrib *= N * batch.point_weights[:, :, None]
    own = batch.owner
    live = (own >= 0) & (batch.point_weights != 0)
    np.add.at(hterms, own[live], -contrib[live])


# ----------------------------------------------------------------------------
# public score functions


def efficient_score(model: OutcomeModel, mech: MechanismModel, beta, b: BSolution, obs: Observation, method=None):
    """Working efficient score of one observation given the solved ``b``.

    ``method`` selects the off-grid evaluation of b (``"nystrom"`` when the
    solution carries its system, else ``"linear"``).
    """
    beta = np.asarray(beta, dtype=float)
    x = np.concatenate([np.asarray(obs.u, dtype=float), np.asarray(obs.z, dtype=float)])
    if method is None:
        method = "nystrom" if b.system is not None else "linear"
    if obs.r:
        return model.score(beta, obs.y, x) - interpolate_b(b, obs.y, method)
    grid = b.grid
    if mech.u_dim:
        pi = mech.prob(grid.nodes, np.broadcast_to(np.asarray(obs.u, dtype=float), (grid.m, mech.u_dim)))
    else:
        pi = mech.prob(grid.nodes)
    f, fd = model.density_and_grad(beta, grid.nodes, x)
    wpi = grid.weights * pi
    D = 1.0 - np.sum(f * wpi)
    if D <= fredholm.DENOM_GUARD:
        raise FredholmError("conditional missingness probability numerically zero for this observation")
    return -(wpi @ fd - (f * wpi) @ b.values) / D


def _density_for(data, config):
    if config.variant == "parametric_fx":
        dfit = fit_covariate_density(data, config.density_family)
        return dfit, dfit.density
    return None, config.density


def score_terms(beta, data: Dataset, config: FitConfig) -> np.ndarray:
    """Per-row working efficient scores ``(N, p)`` at ``beta``."""
    prepared = prepare_data(data, config)
    _, density = _density_for(prepared, config)
    return evaluate(build_plan(prepared, config, density), beta).scores


def estimating_fn(beta, data: Dataset, config: FitConfig) -> np.ndarray:
    """Mean working efficient score at ``beta`` (systems re-solved at beta)."""
    return score_terms(beta, data, config).mean(axis=0)


# ----------------------------------------------------------------------------
# fitting


def _mean_score(plan, beta):
    return evaluate(plan, beta).scores.mean(axis=0)


def _jacobian(plan, beta, fd_step):
    p = beta.size
    J = np.empty((p, p))
    for j in range(p):
        h = fd_step * (1.0 + abs(beta[j]))
        up, dn = beta.copy(), beta.copy()
        up[j] += h
        dn[j] -= h
        J[:, j] = (_mean_score(plan, up) - _mean_score(plan, dn)) / (2 * h)
    return J


@dataclass(eq=False)
class _Outcome:
    beta: np.ndarray
    val: np.ndarray
    iterations: int
    converged: bool
    failure: Optional[str] = None
    jacobian: Optional[np.ndarray] = None


def _newton(plan, beta, config) -> _Outcome:
    """Damped Newton with halving line search on the 2-norm of the mean score."""
    beta = np.asarray(beta, dtype=float)
    val = _mean_score(plan, beta)
    norm2 = float(np.linalg.norm(val))
    for it in range(config.max_iter + 1):
        if np.max(np.abs(val)) < config.tol:
            return _certify(plan, beta, val, it, config)
        if it == config.max_iter:
            return _Outcome(beta, val, it, False, "iteration limit reached")
        try:
            J = _jacobian(plan, beta, config.fd_step)
        except FredholmError as err:
            return _Outcome(beta, val, it, False, f"Jacobian evaluation failed: {err}")
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            raise EstimationError(f"singular Jacobian of the estimating function at iteration {it}")
        step = np.linalg.solve(J, -val)
        # cap the step so one Newton move cannot leave the region where densities are representable
        big = np.max(np.abs(step))
        if big > MAX_STEP:
            step *= MAX_STEP / big
        t = 1.0
        for _ in range(30):
            trial = beta + t * step
            try:
                tval = _mean_score(plan, trial)
            except FredholmError:
                tval = None
            if tval is not None and np.all(np.isfinite(tval)) and np.linalg.norm(tval) < norm2:
                beta, val, norm2 = trial, tval, float(np.linalg.norm(tval))
                break
            t *= 0.5
        else:
            return _Outcome(beta, val, it, False, "line search found no decrease")
    raise AssertionError("unreachable")


def _certify(plan, beta, val, it, config) -> _Outcome:
    # a small residual is not enough: where the estimating function flattens out towards
    # infinity the residual decays while full Newton steps stay of order one
    try:
        J = _jacobian(plan, beta, config.fd_step)
    except FredholmError as err:
        return _Outcome(beta, val, it, False, f"Jacobian evaluation failed: {err}")
    if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
        return _Outcome(beta, val, it, False, "singular Jacobian at the root", J)
    step = np.linalg.solve(J, -val)
    if np.max(np.abs(step)) > STEP_TOL * (1.0 + np.max(np.abs(beta))):
        return _Outcome(beta, val, it, False, "estimating function flattens without a root (iterates diverge)", J)
    # the residual test bounds |Psi|, not the error in beta; one polishing step fixes
    # the ill-conditioned directions at the cost of a single evaluation
    try:
        pval = _mean_score(plan, beta + step)
        if np.all(np.isfinite(pval)) and np.linalg.norm(pval) < np.linalg.norm(val):
            # J belongs to the old point; the sandwich recomputes it at the polished root
            beta, val, J = beta + step, pval, None
    except FredholmError:
        pass
    return _Outcome(beta, val, it, True, None, J)


def _homotopy(plan, start, config) -> _Outcome:
    """Follow the root of ``Psi(beta) = (1 - lam) Psi(start)`` from ``lam = 0`` to 1."""
    psi0 = _mean_score(plan, start)
    scale = float(np.max(np.abs(psi0)))
    lam, dlam, beta, used = 0.0, 0.25, np.asarray(start, dtype=float), 0
    while lam < 1.0:
        nxt = min(1.0, lam + dlam)
        target = (1.0 - nxt) * psi0
        ctol = config.tol if nxt == 1.0 else max(config.tol, 1e-3 * scale)
        cand, ok, k = beta, False, 0
        try:
            for k in range(8):
                v = _mean_score(plan, cand) - target
                if np.max(np.abs(v)) < ctol:
                    ok = True
                    break
                cand = cand + np.linalg.solve(_jacobian(plan, cand, config.fd_step), -v)
        except (FredholmError, np.linalg.LinAlgError):
            ok = False
        used += k + 1
        if ok and np.max(np.abs(cand - beta)) < MAX_STEP:
            lam, beta = nxt, cand
            if k <= 2:
                dlam = min(0.5, 2 * dlam)
        else:
            dlam /= 2
            if dlam < 1e-3:
                return _Outcome(beta, _mean_score(plan, beta), used, False, "homotopy path lost")
    out = _newton(plan, beta, config)
    out.iterations += used
    return out


def _non_identified(beta, shadow, atol=1e-4) -> bool:
    # with every shadow coefficient at zero the outcome law ignores z and the estimating
    # function vanishes in the intercept direction, so such roots carry no information
    return bool(np.all(np.abs(beta[shadow]) < atol))


def _solve_from_cc(plan, data, config, shadow):
    """Newton from the complete-case fit, with fallbacks when that root is unusable.

    A root is admissible when it is certified and identified.  If the first
    Newton run does not give one, candidates come from a homotopy path out of
    the complete-case fit and from Newton runs started two complete-case
    standard errors away along each coordinate; the admissible candidate
    closest to the complete-case fit in its own metric wins.
    """
    cc = complete_case_fit(data, config.model)
    first = _newton(plan, cc, config)
    if (first.converged and not _non_identified(first.beta, shadow)) or first.failure == "iteration limit reached":
        return first, 0
    cov = complete_case_covariance(data, config.model, cc)
    prec = np.linalg.inv(cov)
    se = np.sqrt(np.diag(cov))
    starts = []
    for j in range(cc.size):
        for sign in (-2.0, 2.0):
            s_ = cc.copy()
            s_[j] += sign * se[j]
            starts.append(s_)
    best, best_dist = None, np.inf
    for k in range(len(starts) + 1):
        try:
            trial = _homotopy(plan, cc, config) if k == 0 else _newton(plan, starts[k - 1], config)
        except EstimationError:
            continue
        if trial.converged and not _non_identified(trial.beta, shadow):
            e = trial.beta - cc
            dist = float(e @ prec @ e)
            if dist < best_dist:
                best, best_dist = trial, dist
    return (best if best is not None else first), len(starts) + 1


def fit(data: Dataset, config: FitConfig, beta0=None) -> FitResult:
    """Root of the working efficient estimating equation with its variance."""
    start = time.perf_counter()
    prepared = prepare_data(data, config)
    dfit, density = _density_for(prepared, config)
    plan = build_plan(prepared, config, density)
    shadow = slice(1 + prepared.du, None)
    if beta0 is not None:
        out, restarts = _newton(plan, np.asarray(beta0, dtype=float), config), 0
    else:
        out, restarts = _solve_from_cc(plan, prepared, config, shadow)
    if out.converged and _non_identified(out.beta, shadow):
        out.converged = False
        out.failure = "only roots with vanishing shadow-variable coefficients found"
    beta = out.beta
    res = FitResult(beta, None, None, None, None, out.iterations, out.converged, float(np.max(np.abs(out.val))))
    if out.failure:
        res.diagnostics["failure"] = out.failure
    res.diagnostics.update(plan.info)
    res.diagnostics["restarts"] = restarts
    res.diagnostics["grid_size"] = plan.grid.m
    if out.converged and config.variance == "sandwich_plugin":
        parts, ev = _sandwich_parts(plan, beta, config, dfit, out.jacobian)
        _attach(res, parts, plan.N)
        res.diagnostics["max_fredholm_residual"] = ev.max_residual
        res.diagnostics["max_condition"] = ev.max_condition
    elif out.converged and config.variance == "bootstrap":
        cov = bootstrap_variance(data, config, config.bootstrap_B, config.seed)
        res.covariance = cov
        res.std_errors = np.sqrt(np.diag(cov))
    res.diagnostics["seconds"] = time.perf_counter() - start
    return res


def _attach(res, parts, N):
    A, B = parts.a_matrix, parts.b_matrix
    Ainv = np.linalg.inv(A)
    cov = Ainv @ B @ Ainv.T / N
    cov = 0.5 * (cov + cov.T)
    res.covariance = cov
    res.std_errors = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    res.A_hat, res.B_hat, res.parts = A, B, parts


def _sandwich_parts(plan, beta, config, dfit=None, jacobian=None):
    A = _jacobian(plan, beta, config.fd_step) if jacobian is None else jacobian
    if np.linalg.cond(A) > 1e14:
        raise EstimationError("singular derivative of the estimating function")
    variant = plan.info["variant"]
    want_h = variant in ("empirical", "nonparametric_kde")
    ev = evaluate(plan, beta, want_h=want_h)
    S = ev.scores
    if want_h:
        H = ev.h_terms
    elif variant == "parametric_fx":
        s_alpha = dfit.log_density_grad(plan.x)
        C = S.T @ s_alpha / plan.N
        H = dfit.influence_phi(plan.x) @ C.T
    else:
        H = np.zeros_like(S)
    q = S - H
    B = np.cov(q, rowvar=False, ddof=0).reshape(S.shape[1], S.shape[1])
    return SandwichParts(S, H, A, B), ev


def sandwich(data: Dataset, fit_result: FitResult, config: FitConfig):
    """``(covariance, A_hat, B_hat)`` at ``fit_result.beta_hat``.

    ``A_hat`` is the finite-difference derivative of the full estimating
    function.  ``B_hat`` is the covariance of ``S* - h`` for the empirical
    and kernel variants, of ``S* - C phi`` for the parametric variant and of
    ``S*`` for the oracle.
    """
    if not fit_result.converged:
        raise EstimationError("sandwich variance needs a converged fit")
    prepared = prepare_data(data, config)
    dfit, density = _density_for(prepared, config)
    plan = build_plan(prepared, config, density)
    parts, _ = _sandwich_parts(plan, np.asarray(fit_result.beta_hat, dtype=float), config, dfit)
    Ainv = np.linalg.inv(parts.a_matrix)
    cov = Ainv @ parts.b_matrix @ Ainv.T / plan.N
    return 0.5 * (cov + cov.T), parts.a_matrix, parts.b_matrix


def bootstrap_variance(data: Dataset, config: FitConfig, B: int, seed: int = 0) -> np.ndarray:
    """Row-resampling bootstrap covariance of the fitted coefficients."""
    if B < 50:
        raise ValueError("bootstrap needs at least 50 resamples")
    x = np.column_stack([data.r, np.nan_to_num(data.y, nan=0.0), data.u, data.z])
    if np.all(x == x[0]):
        return np.zeros((config.model.p, config.model.p))
    quiet = replace(config, variance="none")
    rng = np.random.default_rng(seed)
    draws, failures = [], 0
    for _ in range(B):
        idx = rng.integers(0, data.N, data.N)
        try:
            res = fit(data.subset(idx), quiet)
        except (EstimationError, FredholmError, ValueError, np.linalg.LinAlgError):
            res = None
        if res is None or not res.converged:
            failures += 1
            continue
        draws.append(res.beta_hat)
    if failures > 0.1 * B:
        raise EstimationError(f"{failures} of {B} bootstrap refits failed")
    return np.cov(np.array(draws), rowvar=False)
