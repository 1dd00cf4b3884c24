"""Command-line front end: ``shadowfit simulate`` and ``shadowfit fit``.

CSV input has a header naming ``r``, ``y``, optional ``u1..ud`` and
``z1..dz`` columns (any names starting with ``u`` / ``z`` are accepted).
Missing outcomes are empty ``y`` fields.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .estimator import EstimationError, FitConfig, complete_case_covariance, complete_case_fit, fit, prepare_data
from .fredholm import FredholmError
from .kernels import BandwidthRule
from .model import Dataset, MechanismModel, OutcomeModel
from .simulate import MECH_LABELS, run_study, scenario

FIT_VARIANTS = ("empirical", "parametric_fx", "nonparametric_kde")


class InputError(ValueError):
    pass


# ----------------------------------------------------------------------------
# CSV


def load_csv(path) -> Dataset:
    """Read a dataset; every error names the offending line."""
    with open(path, newline="") as fh:
        return _parse_csv(fh, str(path))


def _parse_csv(fh, label="<input>") -> Dataset:
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InputError(f"{label}: empty file") from None
    if len(header) < 3 or header[0] != "r" or header[1] != "y":
        raise InputError(f"{label}:1: header must start with r,y followed by u*/z* columns")
    rest = header[2:]
    kinds = [h[:1] for h in rest]
    if any(k not in ("u", "z") for k in kinds) or "z" not in kinds:
        raise InputError(f"{label}:1: covariate columns must be named u*/z* with at least one z column")
    if "u" in kinds[kinds.index("z") :]:
        raise InputError(f"{label}:1: u columns must precede z columns")
    if len(set(header)) != len(header):
        raise InputError(f"{label}:1: duplicate column names")
    du = kinds.count("u")
    r, y, cov = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{label}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rv = row[0].strip()
        if rv not in ("0", "1"):
            raise InputError(f"{label}:{lineno}: r must be 0 or 1, got {rv!r}")
        yv = row[1].strip()
        if rv == "0" and yv:
            raise InputError(f"{label}:{lineno}: outcome present although r = 0")
        if rv == "1" and not yv:
            raise InputError(f"{label}:{lineno}: outcome missing although r = 1")
        try:
            yf = float(yv) if yv else np.nan
            xs = [float(c) for c in row[2:]]
        except ValueError:
            raise InputError(f"{label}:{lineno}: non-numeric cell") from None
        if not np.all(np.isfinite(xs)) or (yv and not np.isfinite(yf)):
            raise InputError(f"{label}:{lineno}: non-finite value")
        r.append(rv == "1")
        y.append(yf)
        cov.append(xs)
    if not r:
        raise InputError(f"{label}: no data rows")
    cov = np.array(cov, dtype=float)
    return Dataset(
        np.array(r), np.array(y), cov[:, :du], cov[:, du:], {"u": rest[:du], "z": rest[du:]}
    )


def write_csv(data: Dataset, path_or_buf) -> None:
    """Write ``data`` in the format read by ``load_csv``."""
    names_u = data.names.get("u") or [f"u{j + 1}" for j in range(data.du)]
    names_z = data.names.get("z") or [f"z{j + 1}" for j in range(data.dz)]
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "y", *names_u, *names_z])
        for r, y, u, z in zip(data.r, data.y, data.u, data.z):
            w.writerow(["1" if r else "0", repr(float(y)) if r else "", *map(repr, map(float, u)), *map(repr, map(float, z))])
    finally:
        if own:
            fh.close()


# ----------------------------------------------------------------------------
# reports


def p_value(z) -> np.ndarray:
    """Two-sided normal p-value ``2 (1 - Phi(|z|))``."""
    return 2.0 * norm.sf(np.abs(z))


def coefficient_rows(names, beta, se):
    z = np.asarray(beta) / np.asarray(se)
    return [
        {"name": n, "estimate": float(b), "std_error": float(s), "z": float(zz), "p": float(pp)}
        for n, b, s, zz, pp in zip(names, beta, se, z, p_value(z))
    ]


def format_table(per_variant: dict) -> str:
    """Method / Measure / one column per coefficient."""
    names = next(iter(per_variant.values()))["coefficients"]
    names = [c["name"] for c in names]
    width = max(12, max(len(n) for n in names) + 2)
    lines = ["{:<20}{:<16}".format("Method", "Measure") + "".join(f"{n:>{width}}" for n in names)]
    measures = (("estimate", "estimate"), ("standard error", "std_error"), ("z-statistic", "z"), ("p-value", "p"))
    for method, rep in per_variant.items():
        for k, (label, key) in enumerate(measures):
            vals = "".join(f"{c[key]:>{width}.4f}" for c in rep["coefficients"])
            lines.append("{:<20}{:<16}".format(method if k == 0 else "", label) + vals)
    return "\n".join(lines)


def format_csv(per_variant: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "name", "estimate", "std_error", "z", "p"])
    for method, rep in per_variant.items():
        for c in rep["coefficients"]:
            w.writerow([method, c["name"], c["estimate"], c["std_error"], c["z"], c["p"]])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# commands


def _parse_mech(text: Optional[str]) -> Optional[MechanismModel]:
    if text is None:
        return None
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"--mech expects comma-separated numbers, got {text!r}") from None
    if len(vals) < 2:
        raise InputError("--mech needs at least c0,c1")
    return MechanismModel.logistic(vals[0], vals[1], vals[2:])


def _bandwidth_rule(h):
    return None if h is None else BandwidthRule("explicit", h=h)


def _emit(text: str, out: Optional[str]):
    if out:
        with open(out, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_simulate(args) -> int:
    spec = scenario(args.scenario, N=args.n)
    R = 1000 if args.full else args.replicates
    variants = args.variant or (["empirical", "oracle", "parametric_fx"] if args.full else ["empirical"])
    if args.working == "both" or args.full:
        mechs = list(MECH_LABELS)
    else:
        mechs = [args.working]
    custom = _parse_mech(args.mech)
    if custom is not None:
        mechs = [("custom", custom)]
    overrides = {}
    if args.grid:
        overrides["grid_size"] = args.grid
    if args.bandwidth:
        overrides["bandwidth_rule"] = _bandwidth_rule(args.bandwidth)
    report = run_study(spec, variants, R, args.seed, mechs=mechs, workers=args.workers, config_overrides=overrides)
    if args.format == "json":
        _emit(report.to_json(), args.out)
    elif args.format == "table":
        _emit(report.to_table(), args.out)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "mech", "coef", "bias", "std", "std_hat", "cvg"])
        for v, m, n, s in report.rows():
            w.writerow([v, m, n, s["bias"], s["std"], s["std_hat"], s["cvg"]])
        _emit(buf.getvalue(), args.out)
    failed = sum(c["failures"] for c in report.cells.values())
    return 0 if failed == 0 else 1


def cmd_fit(args) -> int:
    data = load_csv(args.input)
    model = OutcomeModel(args.family, data.du + data.dz, sigma=args.sigma)
    mech = _parse_mech(args.mech)
    if mech is None:
        raise InputError("fit needs --mech c0,c1[,cu...]")
    assumption = args.assumption or ("general" if data.du else "special")
    names = ["intercept", *data.names.get("u", []), *data.names.get("z", [])]
    config = {"input": str(args.input), "family": args.family, "assumption": assumption,
              "mech": args.mech, "grid": args.grid, "bandwidth": args.bandwidth, "N": data.N,
              "n_observed": data.n_observed}
    per_variant = {}
    ok = True
    cc = complete_case_fit(prepare_data(data, FitConfig(model, mech, assumption=assumption)), model)
    cc_cov = complete_case_covariance(data, model, cc)
    per_variant["CC"] = {"coefficients": coefficient_rows(names, cc, np.sqrt(np.diag(cc_cov))),
                         "diagnostics": {"converged": True, "n_complete": data.n_observed}}
    for variant in args.variant or ["empirical"]:
        kw = dict(variant=variant, assumption=assumption, grid_size=args.grid or 15,
                  bandwidth_rule=_bandwidth_rule(args.bandwidth))
        if variant == "parametric_fx":
            kw["density_family"] = args.density_family or _default_density(data)
        res = fit(data, FitConfig(model, mech, **kw))
        ok &= bool(res.converged)
        diag = {"converged": bool(res.converged), "iterations": int(res.iterations),
                "residual_norm": res.residual_norm}
        diag.update({k: v for k, v in res.diagnostics.items() if isinstance(v, (int, float, str, list))})
        se = res.std_errors if res.std_errors is not None else np.full(model.p, np.nan)
        per_variant[variant] = {"coefficients": coefficient_rows(names, res.beta_hat, se), "diagnostics": diag}
    if args.format == "json":
        _emit(json.dumps({"config": config, "per_variant": per_variant}, indent=2), args.out)
    elif args.format == "csv":
        _emit(format_csv(per_variant), args.out)
    else:
        _emit(format_table(per_variant), args.out)
    return 0 if ok else 1


def _default_density(data):
    if data.du and data.dz == 1 and set(np.unique(data.z)) <= {0.0, 1.0}:
        return "bernoulli_logistic_z_given_u"
    return "multivariate_normal"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowfit", description="Shadow-variable estimation: replication studies and CSV dataset fits.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--variant", action="append", help="estimator variant (repeatable)")
    common.add_argument("--mech", help="working mechanism coefficients c0,c1[,cu...]")
    common.add_argument("--grid", type=int, help="outcome grid size")
    common.add_argument("--bandwidth", type=float, help="explicit kernel bandwidth")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=("json", "csv", "table"), default="table")

    sim = sub.add_parser("simulate", parents=[common], help="run a replication study")
    sim.add_argument("--scenario", required=True, choices=("S1", "S2", "S3", "S4"))
    sim.add_argument("--n", type=int, help="sample size (default: published size)")
    sim.add_argument("--replicates", type=int, default=10)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--working", choices=("correct", "misspecified", "both"), default="correct",
                     help="preset working mechanism(s)")
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--full", action="store_true", help="published scale: 1000 replicates, all variants, both mechanisms")
    sim.set_defaults(func=cmd_simulate)

    fp = sub.add_parser("fit", parents=[common], help="fit a CSV dataset")
    fp.add_argument("--input", required=True)
    fp.add_argument("--family", required=True, choices=("linear_gaussian", "logistic_binary"))
    fp.add_argument("--assumption", choices=("special", "general"))
    fp.add_argument("--density-family", dest="density_family")
    fp.add_argument("--sigma", type=float, default=1.0)
    fp.set_defaults(func=cmd_fit)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and execute; returns the exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "variant", None):
        allowed = FIT_VARIANTS if args.command == "fit" else ("empirical", "oracle", "parametric_fx", "nonparametric_kde")
        bad = [v for v in args.variant if v not in allowed]
        if bad:
            parser.error(f"unsupported variant(s) {bad}; choose from {allowed}")
    try:
        return args.func(args)
    except (InputError, EstimationError, FredholmError, ValueError, OSError, np.linalg.LinAlgError) as err:
        sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err)}) + "\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
