"""Synthetic designs with known asymptotic variances, and a Monte Carlo runner.

Three designs are provided:

* ``modality_mismatch``: ``Y = W'gamma + X'theta + eps`` and ``Yhat = W'gamma``
* ``distribution_shift``: same outcome, ``Yhat = X'theta_tilde + W'gamma_tilde``
* ``discrete_predictions``: ``Z ~ Unif{1,2,3}``, ``Y | Z ~ N(mu_Z, sigma2)``,
  ``Yhat = Z``, and the target is the mean of ``Y``

The first two use least squares without intercept (so ``theta_star = theta``)
with isotropic ``Cov(X) = sigma_x2 I`` and ``Cov(W) = sigma_w2 I``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

from .core import LabeledDataset, LossModel, ReppiError, UnlabeledDataset
from .estimators import METHODS, fit_method
from .recalibrate import RecalibratorKind, RecalibratorSpec
from .variance import gaussian_quadratic_trace

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def trial_seed(base_seed: int, trial: int) -> int:
    """Seed for one trial: splitmix64 of the base seed xor the golden-ratio-weighted index."""
    return splitmix64((int(base_seed) & _MASK64) ^ ((int(trial) * _GOLDEN) & _MASK64))


def random_unit_vector(d: int, rng: np.random.Generator) -> NDArray[np.float64]:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


class ScenarioKind(str, Enum):
    MODALITY_MISMATCH = "modality_mismatch"
    DISTRIBUTION_SHIFT = "distribution_shift"
    DISCRETE_PREDICTIONS = "discrete_predictions"


def _vec(v: Any) -> tuple[float, ...] | None:
    if v is None:
        return None
    return tuple(float(u) for u in np.atleast_1d(np.asarray(v, dtype=float)))


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    n: int = 1000
    N: int = 9000
    d: int = 1
    sigma2: float = 1.0
    sigma_x2: float = 1.0
    sigma_w2: float = 1.0
    theta: tuple[float, ...] | None = None
    gamma: tuple[float, ...] | None = None
    theta_tilde: tuple[float, ...] | None = None
    gamma_tilde: tuple[float, ...] | None = None
    mu: tuple[float, float, float] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        for name in ("theta", "gamma", "theta_tilde", "gamma_tilde", "mu"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        if self.n < 1 or self.N < 1:
            raise ValueError("n and N must be positive")
        if self.sigma2 <= 0 or self.sigma_x2 <= 0 or self.sigma_w2 <= 0:
            raise ValueError("variances must be positive")
        if self.kind is ScenarioKind.DISCRETE_PREDICTIONS:
            if self.mu is None or len(self.mu) != 3:
                raise ValueError("discrete_predictions needs mu with three entries")
            object.__setattr__(self, "d", 1)
            return
        if self.d < 1:
            raise ValueError("d must be positive")
        required = ["theta", "gamma"]
        if self.kind is ScenarioKind.DISTRIBUTION_SHIFT:
            required += ["theta_tilde", "gamma_tilde"]
        for name in required:
            v = getattr(self, name)
            if v is None:
                raise ValueError(f"{self.kind.value} needs {name}")
            if len(v) != self.d:
                raise ValueError(f"{name} has length {len(v)}, expected d={self.d}")

    @property
    def r(self) -> float:
        return self.n / self.N

    @property
    def model(self) -> LossModel:
        if self.kind is ScenarioKind.DISCRETE_PREDICTIONS:
            return LossModel.mean_estimation()
        return LossModel()

    @property
    def theta_star(self) -> NDArray[np.float64]:
        if self.kind is ScenarioKind.DISCRETE_PREDICTIONS:
            return np.array([float(np.mean(self.mu))])
        return np.array(self.theta)

    @property
    def default_recalibrator(self) -> RecalibratorSpec:
        if self.kind is ScenarioKind.DISCRETE_PREDICTIONS:
            return RecalibratorSpec(RecalibratorKind.BIN)
        return RecalibratorSpec(RecalibratorKind.LINEAR)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["kind"] = self.kind.value
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in out.items()}


def generate(spec: ScenarioSpec) -> tuple[LabeledDataset, UnlabeledDataset, NDArray[np.float64]]:
    """Draw ``n`` labeled and ``N`` unlabeled rows; deterministic given ``spec.seed``.

    Rows are drawn jointly and the first ``n`` are labeled, so specs that differ
    only in ``theta_tilde`` or ``gamma_tilde`` share ``X``, ``W`` and noise.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.n + spec.N
    if spec.kind is ScenarioKind.DISCRETE_PREDICTIONS:
        z = rng.integers(1, 4, size=total)
        y = np.asarray(spec.mu)[z - 1] + np.sqrt(spec.sigma2) * rng.standard_normal(total)
        yhat = z.astype(float)
        x = np.ones((total, 1))
    else:
        x = np.sqrt(spec.sigma_x2) * rng.standard_normal((total, spec.d))
        w = np.sqrt(spec.sigma_w2) * rng.standard_normal((total, spec.d))
        eps = np.sqrt(spec.sigma2) * rng.standard_normal(total)
        y = w @ np.asarray(spec.gamma) + x @ np.asarray(spec.theta) + eps
        if spec.kind is ScenarioKind.MODALITY_MISMATCH:
            yhat = w @ np.asarray(spec.gamma)
        else:
            yhat = x @ np.asarray(spec.theta_tilde) + w @ np.asarray(spec.gamma_tilde)
    n = spec.n
    labeled = LabeledDataset(x[:n], y[:n], yhat[:n])
    unlabeled = UnlabeledDataset(x[n:], yhat[n:])
    return labeled, unlabeled, spec.theta_star


def _linear_traces(spec: ScenarioSpec) -> dict[str, float]:
    d = spec.d
    theta = np.asarray(spec.theta)
    gamma = np.asarray(spec.gamma)
    if spec.kind is ScenarioKind.MODALITY_MISMATCH:
        bias, gamma_t = theta, gamma
    else:
        bias, gamma_t = theta - np.asarray(spec.theta_tilde), np.asarray(spec.gamma_tilde)
    sx, sw, r = spec.sigma_x2, spec.sigma_w2, spec.r
    tr_inv = d / sx
    # traces of H^-1 C H^-1 with H = Sigma_X for the true, imputed and cross gradient covariances
    t_true = (spec.sigma2 + sw * gamma @ gamma) * tr_inv
    t_imp = gaussian_quadratic_trace(sx * np.eye(d), bias) + tr_inv * sw * (gamma_t @ gamma_t)
    t_cross = tr_inv * sw * (gamma @ gamma_t)
    ppi_pp = t_true - t_cross**2 / ((1 + r) * t_imp) if t_imp > 0 else t_true
    wt = sw * (gamma_t @ gamma_t)
    explained = (sw * (gamma @ gamma_t)) ** 2 / wt if wt > 0 else 0.0
    return {
        "xy_only": t_true,
        "ppi": (1 + r) * t_imp + t_true - 2 * t_cross,
        "ppi_plus_plus": ppi_pp,
        "reppi": (spec.sigma2 + sw * gamma @ gamma - explained / (1 + r)) * tr_inv,
    }


def _discrete_traces(spec: ScenarioSpec) -> dict[str, float]:
    mu1, mu2, mu3 = spec.mu
    r = spec.r
    spread = ((mu1 - mu2) ** 2 + (mu2 - mu3) ** 2 + (mu3 - mu1) ** 2) / 9
    var_y = spec.sigma2 + spread
    var_yhat = 2.0 / 3.0
    cov = (mu3 - mu1) / 3.0
    return {
        "xy_only": var_y,
        "ppi": var_y + (1 + r) * var_yhat - 2 * cov,
        "ppi_plus_plus": var_y - cov**2 / ((1 + r) * var_yhat),
        "reppi": var_y - spread / (1 + r),
    }


def oracle_traces(spec: ScenarioSpec) -> dict[str, float]:
    """Closed-form traces of the asymptotic covariances of the four estimators."""
    if spec.kind is ScenarioKind.DISCRETE_PREDICTIONS:
        out = _discrete_traces(spec)
    else:
        out = _linear_traces(spec)
    return {k: float(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MethodSummary:
    method: str
    width_mean: float
    coverage: float
    mc_trace: float
    oracle_trace: float | None
    coverage_all: float
    failures: int

    def to_dict(self) -> dict[str, Any]:
        # NaN (e.g. a trace from a single trial) is not valid JSON
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in asdict(self).items()}


@dataclass
class StudyReport:
    scenario: dict[str, Any]
    trials: int
    rows: list[MethodSummary]
    level: float
    base_seed: int
    recalibrator: str
    workers: int = 1
    # per-method sqrt(n)-scaled errors of each successful trial (not serialized)
    errors: dict[str, NDArray[np.float64]] = field(default_factory=dict, repr=False)

    def row(self, method: str) -> MethodSummary:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "trials": self.trials,
            "level": self.level,
            "base_seed": self.base_seed,
            "recalibrator": self.recalibrator,
            "mode": "serial" if self.workers <= 1 else "parallel",
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["method", "width_mean", "coverage", "mc_trace", "oracle_trace", "coverage_all", "failures"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            rec = r.to_dict()
            writer.writerow({c: ("" if rec[c] is None else repr(rec[c]) if isinstance(rec[c], float) else rec[c])
                             for c in cols})
        return buf.getvalue()


def _run_trial(args: tuple) -> dict[str, Any]:
    spec, methods, recal, level, base_seed, t = args
    seed = trial_seed(base_seed, t)
    labeled, unlabeled, theta_star = generate(replace(spec, seed=seed))
    out = {}
    for method in methods:
        try:
            res = fit_method(method, labeled, unlabeled, spec.model, level, recal, seed=splitmix64(seed))
        except (ReppiError, np.linalg.LinAlgError):
            out[method] = None
            continue
        covered = (res.ci_lower <= theta_star) & (theta_star <= res.ci_upper)
        out[method] = {
            "error": np.sqrt(labeled.n) * (res.theta - theta_star),
            "width": float(res.width[0]),
            "covered": bool(covered[0]),
            "covered_frac": float(np.mean(covered)),
        }
    return out


def run_study(spec: ScenarioSpec, methods: Sequence[str] = METHODS, trials: int = 100,
              recal: RecalibratorSpec | None = None, level: float = 0.9, base_seed: int = 0,
              workers: int = 1) -> StudyReport:
    """Repeat generate-and-fit ``trials`` times and summarize each method.

    Coverage and width refer to the first coordinate; ``coverage_all`` averages
    coverage over coordinates. ``mc_trace`` is the trace of the sample
    covariance of ``sqrt(n) (theta_hat - theta_star)`` across trials.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods: {unknown}")
    recal = spec.default_recalibrator if recal is None else recal
    jobs = [(spec, tuple(methods), recal, level, base_seed, t) for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial, jobs, chunksize=max(1, trials // (4 * workers))))
    else:
        results = [_run_trial(job) for job in jobs]

    oracle = oracle_traces(spec)
    rows, errors = [], {}
    for method in methods:
        ok = [res[method] for res in results if res[method] is not None]
        failures = trials - len(ok)
        if ok:
            err = np.array([o["error"] for o in ok])
            mc_trace = float(np.trace(np.atleast_2d(np.cov(err, rowvar=False)))) if len(ok) > 1 else float("nan")
            width = float(np.mean([o["width"] for o in ok]))
            cov1 = float(np.mean([o["covered"] for o in ok]))
            cov_all = float(np.mean([o["covered_frac"] for o in ok]))
        else:
            err = np.empty((0, spec.d))
            mc_trace = width = cov1 = cov_all = float("nan")
        errors[method] = err
        rows.append(MethodSummary(method, width, cov1, mc_trace, oracle.get(method), cov_all, failures))
    return StudyReport(spec.to_dict(), trials, rows, level, base_seed, str(recal), workers, errors)
