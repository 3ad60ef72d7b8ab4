"""Command line interface.

``reppi estimate`` reads labeled and unlabeled CSV files and writes estimates;
``reppi simulate`` runs a Monte Carlo study on a synthetic design.  Options can
come from a flat JSON config file (``--config``); command-line flags override it.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .core import (
    ConvergenceError,
    DataError,
    DimensionError,
    Family,
    LabeledDataset,
    LossModel,
    ReppiError,
    SingularMatrixError,
    UnlabeledDataset,
)
from .estimators import METHODS, fit_method
from .recalibrate import RecalibratorSpec
from .simulation import ScenarioKind, ScenarioSpec, random_unit_vector, run_study

log = logging.getLogger("reppi")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(ReppiError, ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "outcome": "y",
    "prediction": "yhat",
    "covariates": [],
    "intercept": True,
    "family": "squared_error",
    "method": "all",
    "recalibrator": None,
    "target": "outcome",
    "level": 0.90,
    "seed": 0,
    "output": "-",
    "format": "json",
    "workers": 1,
    "trials": 100,
    "scenario": "discrete_predictions",
    "n": 1000,
    "N": 9000,
    "d": 1,
    "sigma2": 1.0,
    "sigma_x2": 1.0,
    "sigma_w2": 1.0,
    "theta": None,
    "gamma": None,
    "theta_tilde": None,
    "gamma_tilde": None,
    "shift": 0.0,
    "mu": [-2.0, 0.0, 4.0],
    "methods": list(METHODS),
}


# ---------------------------------------------------------------------------
# CSV input


def _read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8") from exc
    if not rows:
        raise DataError(f"{path} has no header row")
    return [h.strip() for h in rows[0]], rows[1:]


def _columns(header: list[str], names: Sequence[str], path: str | Path) -> list[int]:
    idx = []
    for name in names:
        if name not in header:
            raise DataError(f"column '{name}' not found in {path}")
        idx.append(header.index(name))
    return idx


def _parse_rows(path: str | Path, names: Sequence[str]) -> tuple[np.ndarray, list[int]]:
    """Parse the named columns as floats.

    Rows with a missing or non-finite value are dropped and their 1-based data
    row numbers returned; any other unparsable cell is an error.
    """
    header, rows = _read_table(path)
    idx = _columns(header, names, path)
    values, rejected = [], []
    for i, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        rec = []
        bad = False
        for name, j in zip(names, idx):
            cell = row[j].strip() if j < len(row) else ""
            if cell == "":
                bad = True
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i}, column '{name}': cannot parse {cell!r}") from None
            if not math.isfinite(v):
                bad = True
            rec.append(v)
        if bad:
            rejected.append(i)
        else:
            values.append(rec)
    if rejected:
        log.warning("%s: rejected rows with missing or non-finite values: %s", path, rejected)
    if not values:
        raise DataError(f"{path}: no usable rows")
    return np.array(values, dtype=float).reshape(len(values), len(names)), rejected


def _design(cols: np.ndarray, config: dict[str, Any]) -> np.ndarray:
    if config["intercept"]:
        cols = np.hstack([np.ones((cols.shape[0], 1)), cols])
    if cols.shape[1] == 0:
        raise ConfigError("no covariates: give --covariates or enable the intercept")
    return cols


def load_labeled_csv(path: str | Path, config: dict[str, Any]) -> LabeledDataset:
    data, _ = load_labeled_csv_with_rejects(path, config)
    return data


def load_labeled_csv_with_rejects(path: str | Path, config: dict[str, Any]) -> tuple[LabeledDataset, list[int]]:
    config = {**DEFAULTS, **config}
    names = [config["outcome"], config["prediction"], *config["covariates"]]
    table, rejected = _parse_rows(path, names)
    return LabeledDataset(_design(table[:, 2:], config), table[:, 0], table[:, 1]), rejected


def load_unlabeled_csv(path: str | Path, config: dict[str, Any]) -> tuple[UnlabeledDataset, list[int]]:
    config = {**DEFAULTS, **config}
    names = [config["prediction"], *config["covariates"]]
    table, rejected = _parse_rows(path, names)
    return UnlabeledDataset(_design(table[:, 1:], config), table[:, 0]), rejected


# ---------------------------------------------------------------------------
# config handling


def _floats(v: Any, name: str) -> list[float] | None:
    if v is None:
        return None
    if isinstance(v, str):
        v = [u for u in v.split(",") if u.strip()]
    try:
        return [float(u) for u in np.atleast_1d(v)]
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of numbers") from None


def _names(v: Any) -> list[str]:
    if isinstance(v, str):
        return [u.strip() for u in v.split(",") if u.strip()]
    return [str(u) for u in v]


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    config = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS) - {"labeled", "unlabeled", "command"})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        config.update(loaded)
    for key, value in vars(args).items():
        if key in ("config", "command", "func") or value is None:
            continue
        config[key] = value
    config["covariates"] = _names(config["covariates"])
    config["methods"] = _names(config["methods"])
    level = config["level"]
    if not isinstance(level, (int, float)) or not 0.0 < float(level) < 1.0:
        raise ConfigError(f"level must lie in (0, 1), got {level}")
    if config["format"] not in ("json", "csv"):
        raise ConfigError(f"format must be json or csv, got {config['format']!r}")
    try:
        config["family"] = Family(config["family"]).value
    except ValueError:
        raise ConfigError(f"unknown family {config['family']!r}") from None
    if config["recalibrator"] is not None:
        try:
            config["recalibrator"] = str(RecalibratorSpec.parse(str(config["recalibrator"])))
        except ValueError as exc:
            raise ConfigError(f"bad recalibrator: {exc}") from None
    if int(config["workers"]) < 1:
        raise ConfigError("workers must be at least 1")
    return config


def _dump(v: Any) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(v, indent=2, allow_nan=False) + "\n"


def _write(text: str, output: str) -> None:
    if output in ("-", ""):
        sys.stdout.write(text)
        return
    try:
        Path(output).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write {output}: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# commands


def run_estimate(config: dict[str, Any]) -> int:
    if not config.get("labeled") or not config.get("unlabeled"):
        raise ConfigError("estimate needs --labeled and --unlabeled")
    methods = list(METHODS) if config["method"] == "all" else [config["method"]]
    if any(m not in METHODS for m in methods):
        raise ConfigError(f"unknown method {config['method']!r}")
    model = LossModel(Family(config["family"]))
    intercept_only = config["intercept"] and not config["covariates"]
    if intercept_only and model.family is Family.SQUARED_ERROR:
        model = LossModel.mean_estimation()
    labeled, rej_lab = load_labeled_csv_with_rejects(config["labeled"], config)
    unlabeled, rej_unlab = load_unlabeled_csv(config["unlabeled"], config)
    recal = RecalibratorSpec.parse(config["recalibrator"] or ("bin" if intercept_only else "linear"))

    results = {}
    for method in methods:
        res = fit_method(method, labeled, unlabeled, model, float(config["level"]), recal,
                         int(config["seed"]), config["target"])
        results[method] = res

    if config["format"] == "json":
        payload = {
            "results": {m: r.to_dict() for m, r in results.items()},
            "meta": {
                "tool": f"reppi {__version__}",
                "command": "estimate",
                "family": model.family.value,
                "covariates": (["(intercept)"] if config["intercept"] else []) + config["covariates"],
                "n_labeled": labeled.n,
                "n_unlabeled": unlabeled.n,
                "rejected_rows": {"labeled": rej_lab, "unlabeled": rej_unlab},
                "recalibrator": str(recal),
                "seed": int(config["seed"]),
            },
        }
        _write(_dump(payload), config["output"])
    else:
        _write(estimates_to_csv(results), config["output"])
    return EXIT_OK


def estimates_to_csv(results: dict[str, Any]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = len(next(iter(results.values())).theta)
    writer.writerow(["method", "index", "theta", "ci_lower", "ci_upper", "std_error", "level",
                     *[f"sigma_{j}" for j in range(d)]])
    for method, res in results.items():
        for j in range(d):
            writer.writerow([method, j, repr(float(res.theta[j])), repr(float(res.ci_lower[j])),
                             repr(float(res.ci_upper[j])), repr(float(res.std_error[j])), res.level,
                             *[repr(float(v)) for v in res.sigma[j]]])
    return buf.getvalue()


def build_scenario(config: dict[str, Any]) -> ScenarioSpec:
    try:
        kind = ScenarioKind(config["scenario"])
    except ValueError:
        raise ConfigError(f"unknown scenario {config['scenario']!r}") from None
    if kind is ScenarioKind.DISCRETE_PREDICTIONS:
        return ScenarioSpec(kind, n=int(config["n"]), N=int(config["N"]), sigma2=float(config["sigma2"]),
                            mu=_floats(config["mu"], "mu"), seed=int(config["seed"]))
    d = int(config["d"])
    rng = np.random.default_rng(int(config["seed"]))
    # unspecified coefficient vectors are drawn uniformly from the unit sphere
    theta = _floats(config["theta"], "theta") or list(random_unit_vector(d, rng))
    gamma = _floats(config["gamma"], "gamma") or list(random_unit_vector(d, rng))
    theta_tilde = gamma_tilde = None
    if kind is ScenarioKind.DISTRIBUTION_SHIFT:
        theta_tilde = _floats(config["theta_tilde"], "theta_tilde")
        if theta_tilde is None:
            theta_tilde = list(np.asarray(theta) - float(config["shift"]) * random_unit_vector(d, rng))
        gamma_tilde = _floats(config["gamma_tilde"], "gamma_tilde") or gamma
    return ScenarioSpec(kind, n=int(config["n"]), N=int(config["N"]), d=d, sigma2=float(config["sigma2"]),
                        sigma_x2=float(config["sigma_x2"]), sigma_w2=float(config["sigma_w2"]),
                        theta=theta, gamma=gamma, theta_tilde=theta_tilde, gamma_tilde=gamma_tilde,
                        seed=int(config["seed"]))


def run_simulate(config: dict[str, Any]) -> int:
    trials = int(config["trials"])
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    if any(m not in METHODS for m in config["methods"]):
        raise ConfigError(f"unknown methods in {config['methods']}")
    try:
        spec = build_scenario(config)
    except ValueError as exc:
        if isinstance(exc, ReppiError):
            raise
        raise ConfigError(str(exc)) from None
    recal = RecalibratorSpec.parse(config["recalibrator"]) if config["recalibrator"] else None
    report = run_study(spec, config["methods"], trials, recal, float(config["level"]),
                       int(config["seed"]), int(config["workers"]))
    _write(report.to_json() if config["format"] == "json" else report.to_csv(), config["output"])
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default option values")
    p.add_argument("--recalibrator", help="zero, linear, bin or knn[:k]")
    p.add_argument("--level", type=float, help="confidence level (default 0.90)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--output", help="output file, '-' for stdout")
    p.add_argument("--format", choices=["json", "csv"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reppi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"reppi {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate from CSV files")
    _add_common(est)
    est.add_argument("--labeled", help="CSV with outcome, prediction and covariates")
    est.add_argument("--unlabeled", help="CSV with prediction and covariates")
    est.add_argument("--method", choices=[*METHODS, "all"])
    est.add_argument("--outcome", help="outcome column (default y)")
    est.add_argument("--prediction", help="prediction column (default yhat)")
    est.add_argument("--covariates", help="comma-separated covariate columns")
    est.add_argument("--no-intercept", dest="intercept", action="store_const", const=False)
    est.add_argument("--family", choices=[f.value for f in Family])
    est.add_argument("--target", choices=["outcome", "gradient"],
                     help="what the recalibrator regresses on (x, yhat)")

    sim = sub.add_parser("simulate", help="Monte Carlo study on a synthetic design")
    _add_common(sim)
    sim.add_argument("--scenario", choices=[k.value for k in ScenarioKind])
    sim.add_argument("--trials", type=int)
    sim.add_argument("--workers", type=int, help="worker processes (default 1)")
    sim.add_argument("--methods", help="comma-separated subset of methods")
    sim.add_argument("--n-labeled", dest="n", type=int)
    sim.add_argument("--n-unlabeled", dest="N", type=int)
    sim.add_argument("--d", type=int)
    sim.add_argument("--sigma2", type=float)
    sim.add_argument("--sigma-x2", dest="sigma_x2", type=float)
    sim.add_argument("--sigma-w2", dest="sigma_w2", type=float)
    sim.add_argument("--theta")
    sim.add_argument("--gamma")
    sim.add_argument("--theta-tilde", dest="theta_tilde")
    sim.add_argument("--gamma-tilde", dest="gamma_tilde")
    sim.add_argument("--shift", type=float, help="norm of theta - theta_tilde when theta_tilde is not given")
    sim.add_argument("--mu", help="three comma-separated component means")
    return parser


def _exit_code(exc: Exception) -> int | None:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, DimensionError)):
        return EXIT_DATA
    if isinstance(exc, (ConvergenceError, SingularMatrixError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    verbose = args.verbose
    del args.verbose
    try:
        config = resolve_config(args)
        if args.command == "estimate":
            return run_estimate(config)
        return run_simulate(config)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        if verbose:
            log.error("reppi failed", exc_info=exc)
        msg = str(exc)
    print(f"reppi: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
