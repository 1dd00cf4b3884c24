"""Outcome models, working missingness mechanisms and data containers.

Every array-valued method broadcasts: ``y`` has shape ``(...)`` and ``x`` has
shape ``(..., covariate_dim)``; gradients gain a trailing axis of length ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

FAMILIES = ("linear_gaussian", "logistic_binary")
MECHANISM_FORMS = ("logistic_in_y", "logistic_in_y_u", "user_table")


class DimensionError(ValueError):
    pass


def _design(x: np.ndarray) -> np.ndarray:
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([ones, x], axis=-1)


@dataclass(frozen=True)
class OutcomeModel:
    """Parametric law of Y given X with an intercept-first coefficient vector.

    Parameters
    ----------
    family : {"linear_gaussian", "logistic_binary"}
    covariate_dim : int
        Number of covariates excluding the intercept, so ``p = covariate_dim + 1``.
    sigma : float
        Error standard deviation for ``linear_gaussian``; held fixed.
    """

    family: str
    covariate_dim: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown outcome family {self.family!r}")
        if self.covariate_dim < 1:
            raise ValueError("covariate_dim must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def p(self) -> int:
        return self.covariate_dim + 1

    @property
    def support(self) -> str:
        return "real_line" if self.family == "linear_gaussian" else "binary01"

    def _check(self, beta, y, x):
        beta = np.asarray(beta, dtype=float)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if beta.shape != (self.p,):
            raise DimensionError(f"beta must have length {self.p}, got shape {beta.shape}")
        if x.shape[-1:] != (self.covariate_dim,):
            raise DimensionError(
                f"covariates must have trailing dimension {self.covariate_dim}, got {x.shape}"
            )
        if self.family == "logistic_binary" and np.any((y != 0) & (y != 1)):
            raise ValueError("logistic_binary outcomes must be 0 or 1")
        return beta, y, x

    def linear_predictor(self, beta, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return beta[0] + x @ np.asarray(beta[1:], dtype=float)

    def density(self, beta, y, x) -> np.ndarray:
        beta, y, x = self._check(beta, y, x)
        eta = self.linear_predictor(beta, x)
        if self.family == "linear_gaussian":
            r = (y - eta) / self.sigma
            return np.exp(-0.5 * r * r - LOG_SQRT_2PI) / self.sigma
        return expit(np.where(y == 1, eta, -eta))

    def score(self, beta, y, x) -> np.ndarray:
        """Gradient of the log density in beta, shape ``(..., p)``."""
        beta, y, x = self._check(beta, y, x)
        eta = self.linear_predictor(beta, x)
        if self.family == "linear_gaussian":
            resid = (y - eta) / self.sigma**2
        else:
            resid = y - expit(eta)
        return resid[..., None] * _design(np.broadcast_to(x, np.broadcast(eta, y).shape + x.shape[-1:]))

    def density_grad(self, beta, y, x) -> np.ndarray:
        """Analytic gradient of the density in beta, shape ``(..., p)``."""
        return self.density(beta, y, x)[..., None] * self.score(beta, y, x)

    def density_and_grad(self, beta, y, x):
        f = self.density(beta, y, x)
        return f, f[..., None] * self.score(beta, y, x)

    def sample(self, beta, x, rng: np.random.Generator) -> np.ndarray:
        eta = self.linear_predictor(np.asarray(beta, dtype=float), x)
        if self.family == "linear_gaussian":
            return eta + self.sigma * rng.standard_normal(eta.shape)
        return (rng.random(eta.shape) < expit(eta)).astype(float)


@dataclass(frozen=True)
class MechanismModel:
    """Fixed working model for pr(R = 1 | y, u); never estimated.

    ``logistic_in_y`` uses ``expit(c0 + c1 y)``, ``logistic_in_y_u`` adds
    ``c_u @ u``.  ``user_table`` interpolates tabulated probabilities linearly
    in y, one row per entry of ``u_levels`` (matched exactly).

    Probabilities are clipped strictly inside ``(delta_clip, 1 - delta_clip)``;
    ``delta_clip = 0`` disables clipping.
    """

    form: str
    c0: float = 0.0
    c1: float = 0.0
    c_u: tuple = ()
    delta_clip: float = 1e-6
    table_y: Optional[tuple] = None
    table_prob: Optional[tuple] = None
    u_levels: Optional[tuple] = None

    def __post_init__(self):
        if self.form not in MECHANISM_FORMS:
            raise ValueError(f"unknown mechanism form {self.form!r}")
        if not 0 <= self.delta_clip < 0.5:
            raise ValueError("delta_clip must lie in [0, 0.5)")
        object.__setattr__(self, "c_u", tuple(float(c) for c in np.atleast_1d(self.c_u)))
        if self.form == "logistic_in_y" and self.c_u:
            raise ValueError("logistic_in_y takes no u coefficients")
        if self.form == "logistic_in_y_u" and not self.c_u:
            raise ValueError("logistic_in_y_u needs at least one u coefficient")
        if self.form == "user_table" and (self.table_y is None or self.table_prob is None):
            raise ValueError("user_table needs table_y and table_prob")

    @classmethod
    def logistic(cls, c0: float, c1: float, c_u: Sequence[float] = (), delta_clip: float = 1e-6):
        form = "logistic_in_y_u" if len(np.atleast_1d(c_u)) else "logistic_in_y"
        return cls(form, float(c0), float(c1), tuple(np.atleast_1d(c_u)), delta_clip)

    @classmethod
    def from_table(cls, y_nodes, probs, u_levels=None, delta_clip: float = 1e-6):
        probs = np.atleast_2d(np.asarray(probs, dtype=float))
        y_nodes = np.asarray(y_nodes, dtype=float)
        if probs.shape[1] != y_nodes.size:
            raise ValueError("table rows must match y_nodes")
        levels = None
        if u_levels is not None:
            levels = tuple(tuple(np.atleast_1d(lv).astype(float)) for lv in u_levels)
            if len(levels) != probs.shape[0]:
                raise ValueError("one table row per u level required")
        elif probs.shape[0] != 1:
            raise ValueError("multiple table rows need u_levels")
        return cls(
            "user_table",
            delta_clip=delta_clip,
            table_y=tuple(y_nodes),
            table_prob=tuple(map(tuple, probs)),
            u_levels=levels,
        )

    @property
    def u_dim(self) -> int:
        if self.form == "logistic_in_y_u":
            return len(self.c_u)
        if self.form == "user_table" and self.u_levels is not None:
            return len(self.u_levels[0])
        return 0

    def prob(self, y, u=None) -> np.ndarray:
        """Working probability at ``y`` (shape ``(...)``) and ``u`` (``(..., du)``)."""
        y = np.asarray(y, dtype=float)
        du = self.u_dim
        if du:
            if u is None:
                raise DimensionError(f"mechanism needs u of length {du}")
            u = np.asarray(u, dtype=float)
            if u.shape[-1:] != (du,):
                raise DimensionError(f"u must have trailing dimension {du}, got {u.shape}")
        if self.form == "user_table":
            p = self._table_prob(y, u)
        else:
            eta = self.c0 + self.c1 * y
            if du:
                eta = eta + u @ np.asarray(self.c_u)
            p = expit(eta)
        if self.delta_clip > 0:
            lo = np.nextafter(self.delta_clip, 1.0)
            hi = np.nextafter(1.0 - self.delta_clip, 0.0)
            p = np.clip(p, lo, hi)
        return p

    def _table_prob(self, y, u):
        ty = np.asarray(self.table_y)
        rows = np.asarray(self.table_prob)
        if self.u_levels is None:
            return np.interp(y, ty, rows[0])
        levels = np.asarray(self.u_levels)
        y, u = np.broadcast_arrays(y[..., None], u)
        y = y[..., 0]
        match = np.all(u[..., None, :] == levels, axis=-1)
        if not np.all(match.any(axis=-1)):
            raise ValueError("u value not present in the mechanism table")
        idx = match.argmax(axis=-1)
        out = np.empty(y.shape)
        for k in range(levels.shape[0]):
            sel = idx == k
            out[sel] = np.interp(y[sel], ty, rows[k])
        return out


@dataclass(frozen=True)
class Observation:
    r: bool
    y: Optional[float]
    u: tuple
    z: tuple

    def __post_init__(self):
        if len(self.z) < 1:
            raise ValueError("shadow variable z cannot be empty")


@dataclass(frozen=True, eq=False)
class Dataset:
    """N rows of ``(r, r*y, u, z)``; ``y`` is NaN exactly where ``r`` is False.

    ``u`` may have zero columns.  Arrays are copied and made read-only.
    """

    r: np.ndarray
    y: np.ndarray
    u: np.ndarray
    z: np.ndarray
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.r).astype(bool).ravel()
        n = r.size
        y = np.asarray(self.y, dtype=float).ravel().copy()
        z = np.asarray(self.z, dtype=float)
        z = z.reshape(n, -1) if z.ndim != 2 else z.copy()
        u = np.asarray(self.u, dtype=float) if self.u is not None else np.empty((n, 0))
        u = u.reshape(n, -1) if u.ndim != 2 else u.copy()
        if y.size != n or z.shape[0] != n or u.shape[0] != n:
            raise DimensionError("r, y, u and z must have the same number of rows")
        if z.shape[1] < 1:
            raise ValueError("shadow variable z cannot be empty")
        if np.any(np.isnan(y[r])):
            raise ValueError("observed rows (r = 1) need a finite outcome")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(z))):
            raise ValueError("covariates must be finite")
        y[~r] = np.nan
        for name, arr in (("r", r), ("y", y), ("u", u), ("z", z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Dataset":
        obs = list(observations)
        r = np.array([o.r for o in obs], dtype=bool)
        y = np.array([o.y if o.r else np.nan for o in obs], dtype=float)
        du = {len(o.u) for o in obs}
        dz = {len(o.z) for o in obs}
        if len(du) > 1 or len(dz) > 1:
            raise DimensionError("all observations need the same u and z lengths")
        u = np.array([o.u for o in obs], dtype=float).reshape(len(obs), du.pop())
        z = np.array([o.z for o in obs], dtype=float).reshape(len(obs), dz.pop())
        return cls(r, y, u, z)

    @property
    def N(self) -> int:
        return self.r.size

    @property
    def n_observed(self) -> int:
        return int(self.r.sum())

    @property
    def du(self) -> int:
        return self.u.shape[1]

    @property
    def dz(self) -> int:
        return self.z.shape[1]

    @property
    def x(self) -> np.ndarray:
        """Full covariate matrix ``(u, z)``."""
        return np.hstack([self.u, self.z])

    @property
    def observations(self) -> tuple:
        return tuple(
            Observation(bool(r), float(y) if r else None, tuple(u), tuple(z))
            for r, y, u, z in zip(self.r, self.y, self.u, self.z)
        )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.r[index], self.y[index], self.u[index], self.z[index], dict(self.names))

    def as_special(self) -> "Dataset":
        """All covariates moved into z (whole covariate is the shadow variable)."""
        return Dataset(self.r, self.y, np.empty((self.N, 0)), self.x, dict(self.names))
