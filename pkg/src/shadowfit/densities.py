"""Closed-form covariate densities for the oracle and parametric variants.

Each class turns a density into weighted support points for the Fredholm
systems: ``joint_grid`` for an expectation over the whole covariate and
``conditional_grid`` for the shadow variable given ``u``.  Parameter vectors
``alpha`` and their log-density gradients feed the parametric variance
correction.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .integrate import XGrid, gauss_hermite, normal_xgrid, tensor_grid

DEFAULT_NODES = {1: 20, 2: 10, 3: 6, 4: 4}


def default_nodes(d: int) -> int:
    if d > 4:
        raise ValueError("covariate quadrature supports at most 4 dimensions")
    return DEFAULT_NODES[d]


def _mvn_grad(mean, cov, x):
    """Gradient of the normal log density in (mean, upper-triangular cov)."""
    d = mean.size
    prec = np.linalg.inv(cov)
    e = x - mean
    pe = e @ prec
    g = 0.5 * (pe[:, :, None] * pe[:, None, :] - prec)
    iu = np.triu_indices(d)
    scale = np.where(iu[0] == iu[1], 1.0, 2.0)
    return np.hstack([pe, g[:, iu[0], iu[1]] * scale])


class NormalDensity:
    """Multivariate normal law of the covariate vector ``x = (u, z)``.

    ``alpha`` stacks the mean and the upper triangle of the covariance.
    """

    family = "multivariate_normal"

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")
        np.linalg.cholesky(self.cov)

    @property
    def d(self) -> int:
        return self.mean.size

    @property
    def alpha(self) -> np.ndarray:
        iu = np.triu_indices(self.d)
        return np.concatenate([self.mean, self.cov[iu]])

    def with_alpha(self, alpha) -> "NormalDensity":
        d = self.d
        alpha = np.asarray(alpha, dtype=float)
        cov = np.zeros((d, d))
        iu = np.triu_indices(d)
        cov[iu] = alpha[d:]
        cov = cov + np.triu(cov, 1).T
        return NormalDensity(alpha[:d], cov)

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        e = x - self.mean
        sign, logdet = np.linalg.slogdet(self.cov)
        q = np.einsum("nd,de,ne->n", e, np.linalg.inv(self.cov), e)
        return -0.5 * (q + logdet + self.d * np.log(2 * np.pi))

    def joint_grid(self, n_per_dim=None) -> XGrid:
        return normal_xgrid(self.mean, self.cov, n_per_dim or default_nodes(self.d))

    def conditional_grid(self, u, n_per_dim=None):
        """Rule for ``z | u`` at each row of ``u`` (first ``du`` coordinates of x)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        du = u.shape[1]
        dz = self.d - du
        if dz < 1:
            raise ValueError("no shadow-variable coordinates left to integrate")
        if du == 0:
            g = self.joint_grid(n_per_dim)
            return np.broadcast_to(g.points, (u.shape[0],) + g.points.shape), np.broadcast_to(
                g.weights, (u.shape[0], g.size)
            )
        s_uu = self.cov[:du, :du]
        s_zu = self.cov[du:, :du]
        reg = np.linalg.solve(s_uu, s_zu.T).T
        cmean = self.mean[du:] + (u - self.mean[:du]) @ reg.T
        ccov = self.cov[du:, du:] - reg @ s_zu.T
        base = tensor_grid([gauss_hermite(n_per_dim or default_nodes(dz))] * dz, scale=np.linalg.cholesky(ccov))
        z = cmean[:, None, :] + base.points[None]
        return z, np.broadcast_to(base.weights, z.shape[:2])

    def mle_score(self, x) -> np.ndarray:
        return _mvn_grad(self.mean, self.cov, np.atleast_2d(x))

    def system_score(self, x, du: int = 0) -> np.ndarray:
        """Gradient of the log density that enters the systems (``z | u`` when ``du > 0``)."""
        x = np.atleast_2d(x)
        g = self.mle_score(x)
        if du == 0:
            return g
        marg = _mvn_grad(self.mean[:du], self.cov[:du, :du], x[:, :du])
        d = self.d
        idx = list(range(du))
        iu = np.triu_indices(d)
        pos = {(i, j): d + k for k, (i, j) in enumerate(zip(*iu))}
        iu_u = np.triu_indices(du)
        idx += [pos[(i, j)] for i, j in zip(*iu_u)]
        g[:, idx] -= marg
        return g

    @classmethod
    def fit(cls, x) -> "NormalDensity":
        x = np.atleast_2d(x)
        return cls(x.mean(axis=0), np.cov(x, rowvar=False, ddof=0).reshape(x.shape[1], x.shape[1]))


class BernoulliZGivenU:
    """``logit pr(Z = 1 | u) = coef[0] + coef[1:] @ u`` for a single binary z."""

    family = "bernoulli_logistic_z_given_u"

    def __init__(self, coef):
        self.coef = np.atleast_1d(np.asarray(coef, dtype=float))

    @property
    def alpha(self) -> np.ndarray:
        return self.coef.copy()

    def with_alpha(self, alpha) -> "BernoulliZGivenU":
        return BernoulliZGivenU(alpha)

    def _prob(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[1] != self.coef.size - 1:
            raise ValueError(f"expected {self.coef.size - 1} u columns, got {u.shape[1]}")
        return expit(self.coef[0] + u @ self.coef[1:])

    def joint_grid(self, n_per_dim=None) -> XGrid:
        raise ValueError("a conditional density of z given u has no joint rule; use the general assumption")

    def conditional_grid(self, u, n_per_dim=None):
        p = self._prob(u)
        z = np.broadcast_to(np.array([0.0, 1.0])[None, :, None], (p.size, 2, 1))
        return z, np.stack([1.0 - p, p], axis=1)

    def mle_score(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        u, z = x[:, :-1], x[:, -1]
        return (z - self._prob(u))[:, None] * np.hstack([np.ones((x.shape[0], 1)), u])

    def system_score(self, x, du: int = 0) -> np.ndarray:
        return self.mle_score(x)

    @classmethod
    def fit(cls, x) -> "BernoulliZGivenU":
        from .estimator import logistic_mle

        x = np.atleast_2d(x)
        return cls(logistic_mle(x[:, :-1], x[:, -1]))


class GaussianZGivenU:
    """``z | u ~ N(coef[0] + coef[1:] @ u, var)`` for a single continuous z."""

    family = "gaussian_z_given_u"

    def __init__(self, coef, var):
        self.coef = np.atleast_1d(np.asarray(coef, dtype=float))
        self.var = float(var)
        if not self.var > 0:
            raise ValueError("variance must be positive")

    @property
    def alpha(self) -> np.ndarray:
        return np.append(self.coef, self.var)

    def with_alpha(self, alpha) -> "GaussianZGivenU":
        return GaussianZGivenU(alpha[:-1], alpha[-1])

    def _mean(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return self.coef[0] + u @ self.coef[1:]

    def joint_grid(self, n_per_dim=None) -> XGrid:
        raise ValueError("a conditional density of z given u has no joint rule; use the general assumption")

    def conditional_grid(self, u, n_per_dim=None):
        t, w = gauss_hermite(n_per_dim or default_nodes(1))
        mu = self._mean(u)
        z = mu[:, None] + np.sqrt(self.var) * t[None, :]
        return z[:, :, None], np.broadcast_to(w, z.shape)

    def mle_score(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        u, z = x[:, :-1], x[:, -1]
        e = z - self._mean(u)
        design = np.hstack([np.ones((x.shape[0], 1)), u])
        return np.hstack([(e / self.var)[:, None] * design, (0.5 * (e * e / self.var**2 - 1.0 / self.var))[:, None]])

    def system_score(self, x, du: int = 0) -> np.ndarray:
        return self.mle_score(x)

    @classmethod
    def fit(cls, x) -> "GaussianZGivenU":
        x = np.atleast_2d(x)
        design = np.hstack([np.ones((x.shape[0], 1)), x[:, :-1]])
        coef, *_ = np.linalg.lstsq(design, x[:, -1], rcond=None)
        resid = x[:, -1] - design @ coef
        return cls(coef, np.mean(resid**2))


DENSITY_FAMILIES = {
    NormalDensity.family: NormalDensity,
    BernoulliZGivenU.family: BernoulliZGivenU,
    GaussianZGivenU.family: GaussianZGivenU,
}
