"""Simulation scenarios and replication studies."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .densities import BernoulliZGivenU, NormalDensity
from .estimator import EstimationError, FitConfig, fit
from .fredholm import FredholmError
from .kernels import BandwidthRule
from .model import Dataset, MechanismModel, OutcomeModel

Z_95 = 1.959963984540054
MECH_LABELS = ("correct", "misspecified")


def _ar1(d, rho=0.5):
    idx = np.arange(d)
    return tuple(map(tuple, rho ** np.abs(idx[:, None] - idx[None, :])))


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating design plus the working mechanisms used to fit it.

    ``covariates`` is ``"mvn"`` (normal with ``mean``/``cov``, the first
    ``du`` columns forming u) or ``"bernoulli_u_logistic_z"`` (binary u with
    probability ``p_u`` and binary z with ``logit pr(z = 1 | u) = z_coef``).
    ``true_mech`` holds ``(c0, c1, c_u...)`` of the generating mechanism;
    ``misspecified_mech`` does the same for the wrong working model.
    """

    id: str
    N: int
    truth: tuple
    family: str
    covariates: str
    true_mech: tuple
    misspecified_mech: tuple
    assumption: str = "special"
    du: int = 0
    mean: tuple = ()
    cov: tuple = ()
    p_u: float = 0.5
    z_coef: tuple = ()
    correct_mech: bool = True
    bandwidth_rule: Optional[BandwidthRule] = None
    missing_rate: Optional[float] = None

    def __post_init__(self):
        if self.covariates not in ("mvn", "bernoulli_u_logistic_z"):
            raise ValueError(f"unknown covariate design {self.covariates!r}")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        frac = 1.0 - _draw(self, 20_000, 12345)[0].mean()
        if not 0.05 < frac < 0.6:
            raise ValueError(f"design gives missing fraction {frac:.3f}, outside (0.05, 0.6)")

    @property
    def covariate_dim(self) -> int:
        return len(self.mean) if self.covariates == "mvn" else 2

    def model(self) -> OutcomeModel:
        return OutcomeModel(self.family, self.covariate_dim)

    def _mech(self, coefs, clip=1e-6) -> MechanismModel:
        return MechanismModel.logistic(coefs[0], coefs[1], coefs[2:], delta_clip=clip)

    def true_mechanism(self) -> MechanismModel:
        return self._mech(self.true_mech, clip=0.0)

    def working_mech(self, correct: Optional[bool] = None) -> MechanismModel:
        correct = self.correct_mech if correct is None else correct
        return self._mech(self.true_mech if correct else self.misspecified_mech)

    def oracle_density(self):
        if self.covariates == "mvn":
            return NormalDensity(self.mean, self.cov)
        return BernoulliZGivenU(self.z_coef)

    @property
    def parametric_family(self) -> str:
        return "multivariate_normal" if self.covariates == "mvn" else "bernoulli_logistic_z_given_u"

    def fit_config(self, variant: str = "empirical", correct: Optional[bool] = None, **overrides) -> FitConfig:
        kw = dict(
            variant=variant,
            assumption=self.assumption,
            bandwidth_rule=self.bandwidth_rule,
        )
        if variant == "oracle":
            kw["density"] = self.oracle_density()
        if variant == "parametric_fx":
            kw["density_family"] = self.parametric_family
        kw.update(overrides)
        return FitConfig(self.model(), self.working_mech(correct), **kw)


def scenario(id: str, N: Optional[int] = None, correct: bool = True) -> ScenarioSpec:
    """Preset designs S1 to S4 (``N`` defaults to the published sample size)."""
    if id == "S1":
        spec = ScenarioSpec(
            "S1", 500, (0.25, -0.5), "linear_gaussian", "mvn", (1.0, 1.0), (1.0, -1.0),
            mean=(0.5,), cov=((0.25,),), missing_rate=1 / 3,
        )
    elif id == "S2":
        spec = ScenarioSpec(
            "S2", 1000, (0.0, 0.1, -0.2, -0.3), "linear_gaussian", "mvn", (1.0, 1.0), (1.0, -1.0),
            mean=(0.0, 0.0, 0.0), cov=_ar1(3), missing_rate=1 / 3,
        )
    elif id == "S3":
        spec = ScenarioSpec(
            "S3", 1000, (0.0, 0.3, -0.3), "logistic_binary", "mvn", (1.0, 1.0, 1.0), (1.0, -1.0, -1.0),
            assumption="general", du=1, mean=(0.0, 0.0), cov=_ar1(2),
            bandwidth_rule=BandwidthRule("c_n_third", 2.0), missing_rate=0.2,
        )
    elif id == "S4":
        spec = ScenarioSpec(
            "S4", 2000, (-0.5, 0.2, 0.7), "logistic_binary", "bernoulli_u_logistic_z", (1.0, -2.0, 0.3),
            (1.0, 2.0, 0.3), assumption="general", du=1, p_u=0.5, z_coef=(-1.5, 0.2),
        )
    else:
        raise ValueError(f"unknown scenario {id!r}; presets are S1, S2, S3, S4")
    return replace(spec, N=N or spec.N, correct_mech=correct)


def generate(spec: ScenarioSpec, seed) -> Dataset:
    """Draw covariates, outcomes and missingness; deterministic in ``seed``."""
    r, y, x = _draw(spec, spec.N, seed)
    return Dataset(r, np.where(r, y, np.nan), x[:, : spec.du], x[:, spec.du :])


def _draw(spec, N, seed):
    rng = np.random.default_rng(seed)
    if spec.covariates == "mvn":
        chol = np.linalg.cholesky(np.asarray(spec.cov, dtype=float))
        x = np.asarray(spec.mean) + rng.standard_normal((N, len(spec.mean))) @ chol.T
    else:
        u = (rng.random(N) < spec.p_u).astype(float)
        z = (rng.random(N) < expit(spec.z_coef[0] + spec.z_coef[1] * u)).astype(float)
        x = np.column_stack([u, z])
    model = OutcomeModel(spec.family, x.shape[1])
    y = model.sample(np.asarray(spec.truth, dtype=float), x, rng)
    u = x[:, : spec.du]
    c = spec.true_mech
    eta = c[0] + c[1] * y + (u @ np.asarray(c[2:]) if len(c) > 2 else 0.0)
    r = rng.random(N) < expit(eta)
    return r, y, x


def replicate_seed(base_seed: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(rep)])


@dataclass
class StudyReport:
    scenario: str
    N: int
    replicates_requested: int
    base_seed: int
    truth: tuple
    coef_names: tuple
    cells: dict = field(default_factory=dict)
    missing_fraction: float = float("nan")
    wall_clock: float = 0.0

    def rows(self):
        for (variant, mech), cell in self.cells.items():
            for j, name in enumerate(self.coef_names):
                yield variant, mech, name, {k: cell[k][j] for k in ("bias", "std", "std_hat", "cvg")}

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "scenario": self.scenario,
            "N": self.N,
            "replicates_requested": self.replicates_requested,
            "base_seed": self.base_seed,
            "truth": list(self.truth),
            "missing_fraction": self.missing_fraction,
            "cells": [
                {
                    "variant": v,
                    "mech": m,
                    "replicates": c["replicates"],
                    "failures": c["failures"],
                    "coefficients": [
                        {"name": n, **{k: c[k][j] for k in ("bias", "std", "std_hat", "cvg")}}
                        for j, n in enumerate(self.coef_names)
                    ],
                }
                for (v, m), c in self.cells.items()
            ],
        }
        if include_timing:
            out["wall_clock_seconds"] = self.wall_clock
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2)

    def to_table(self) -> str:
        head = f"Scenario {self.scenario}  N={self.N}  R={self.replicates_requested}  missing={self.missing_fraction:.3f}"
        cols = ("variant", "mech", "coef", "bias", "std", "std-hat", "cvg")
        lines = [head, "{:<18}{:<14}{:<8}{:>9}{:>9}{:>9}{:>8}".format(*cols)]
        for v, m, n, s in self.rows():
            lines.append(
                f"{v:<18}{m:<14}{n:<8}{s['bias']:>9.4f}{s['std']:>9.4f}{s['std_hat']:>9.4f}{s['cvg']:>8.3f}"
            )
        for (v, m), c in self.cells.items():
            if c["failures"]:
                lines.append(f"{v}/{m}: {c['failures']} failed fits excluded")
        return "\n".join(lines)


def _one_replicate(spec, variants, mechs, base_seed, rep, config_overrides):
    data = generate(spec, replicate_seed(base_seed, rep))
    out = {"missing": 1.0 - data.r.mean(), "fits": {}}
    for v in variants:
        for m in mechs:
            if isinstance(m, tuple):
                m, mech = m
                cfg = replace(spec.fit_config(v, **config_overrides), mech=mech)
            else:
                cfg = spec.fit_config(v, correct=(m == "correct"), **config_overrides)
            try:
                res = fit(data, cfg)
                ok = res.converged and res.std_errors is not None and np.all(np.isfinite(res.std_errors))
                out["fits"][(v, m)] = (res.beta_hat, res.std_errors) if ok else None
            except (EstimationError, FredholmError, ValueError, np.linalg.LinAlgError):
                out["fits"][(v, m)] = None
    return out


def run_study(
    spec: ScenarioSpec,
    variants: Sequence[str] = ("empirical",),
    R: int = 10,
    base_seed: int = 0,
    mechs: Sequence = ("correct",),
    workers: int = 1,
    config_overrides: Optional[dict] = None,
) -> StudyReport:
    """Fit every (variant, mechanism) pair on ``R`` replicate datasets.

    Replicate ``k`` uses seed ``SeedSequence([base_seed, k])`` so results do
    not depend on execution order.  Failed fits are excluded and counted.
    """
    if R < 2:
        raise ValueError("a study needs at least two replicates")
    for m in mechs:
        if not isinstance(m, tuple) and m not in MECH_LABELS:
            raise ValueError(f"mechanism label must be one of {MECH_LABELS} or a (label, MechanismModel) pair")
    labels = [m[0] if isinstance(m, tuple) else m for m in mechs]
    start = time.perf_counter()
    overrides = dict(config_overrides or {})
    args = [(spec, tuple(variants), tuple(mechs), base_seed, k, overrides) for k in range(R)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_one_replicate, *zip(*args)))
    else:
        results = [_one_replicate(*a) for a in args]
    truth = np.asarray(spec.truth, dtype=float)
    report = StudyReport(
        spec.id, spec.N, R, int(base_seed), tuple(spec.truth), tuple(f"beta{j}" for j in range(truth.size))
    )
    report.missing_fraction = float(np.mean([res["missing"] for res in results]))
    for v in variants:
        for m in labels:
            got = [res["fits"][(v, m)] for res in results]
            ok = [g for g in got if g is not None]
            cell = {"replicates": len(ok), "failures": len(got) - len(ok)}
            if ok:
                est = np.array([g[0] for g in ok])
                se = np.array([g[1] for g in ok])
                cover = np.abs(est - truth) <= Z_95 * se
                cell.update(
                    bias=(est.mean(0) - truth).tolist(),
                    std=(est.std(0, ddof=1) if len(ok) > 1 else np.full(truth.size, np.nan)).tolist(),
                    std_hat=se.mean(0).tolist(),
                    cvg=cover.mean(0).tolist(),
                    estimates=est,
                    std_errors=se,
                )
            else:
                nan = [float("nan")] * truth.size
                cell.update(bias=nan, std=nan, std_hat=nan, cvg=nan)
            report.cells[(v, m)] = cell
    report.wall_clock = time.perf_counter() - start
    return report
