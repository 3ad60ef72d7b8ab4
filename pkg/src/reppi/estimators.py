"""Prediction-powered estimators.

All four estimators minimize

    (1/n) sum_lab l(theta; x, y) - [(1/n) sum_lab g(theta; x, yhat) - (1/N) sum_unlab g(theta; x, yhat)]

and differ only in the imputed loss ``g``:

* ``xy_only``: ``g = 0``
* ``ppi``: ``g = l``
* ``ppi_plus_plus``: ``g = lam * l`` with the trace-optimal scalar ``lam``
* ``reppi``: ``g = theta' M s(x, yhat) / (1 + n/N)`` where ``s`` is a learned
  estimate of ``E[grad l(theta; X, Y) | X, Yhat]`` and ``M`` a power matrix,
  fitted with three-fold cross-fitting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import (
    DataError,
    DimensionError,
    EstimateResult,
    LabeledDataset,
    LossModel,
    SingularMatrixError,
    UnlabeledDataset,
    WeightedObjective,
    check_compatible,
    check_design,
    gradients,
    inv_sym,
    mean_hessian,
    minimize,
    solve_shifted,
    solve_sym,
)
from .recalibrate import RecalibratorSpec, fit_recalibrator
from .variance import (
    RotationMoments,
    SandwichInputs,
    confidence_interval,
    ppi_variance,
    reppi_variance,
    sample_cov,
    sandwich_xy_only,
)

METHODS = ("xy_only", "ppi", "ppi_plus_plus", "reppi")

# (initial estimate, recalibration, final estimate) fold roles per rotation
ROTATIONS = ((0, 1, 2), (2, 0, 1), (1, 2, 0))

ScoreFn = Callable[[NDArray[np.float64], NDArray[np.float64]], NDArray[np.float64]]
ScoreFitter = Callable[[LabeledDataset, NDArray[np.float64]], ScoreFn]


def _result(method: str, theta: NDArray, sigma: NDArray, n: int, level: float,
            diagnostics: dict[str, Any]) -> EstimateResult:
    lo, hi = confidence_interval(theta, sigma, n, level)
    return EstimateResult(method, np.asarray(theta, dtype=float), sigma, lo, hi, level, n, diagnostics)


def _check_sizes(n: int, d: int, minimum: int) -> None:
    if n < minimum:
        raise DataError(f"need at least {minimum} labeled rows for {d} parameters, got {n}")


def _prepare(labeled: LabeledDataset, unlabeled: UnlabeledDataset | None, model: LossModel) -> None:
    check_design(model, labeled.x)
    model.validate_outcome(labeled.y)
    if unlabeled is not None:
        check_compatible(labeled, unlabeled)
        check_design(model, unlabeled.x)


# ---------------------------------------------------------------------------
# XY-only


def fit_xy_only(data: LabeledDataset, model: LossModel, level: float = 0.9) -> EstimateResult:
    _prepare(data, None, model)
    _check_sizes(data.n, data.d, data.d + 1)
    theta = solve_shifted(model, data)
    grads = gradients(model, theta, data.x, data.y)
    hess = mean_hessian(model, theta, data.x)
    sigma = sandwich_xy_only(hess, sample_cov(grads))
    return _result("xy_only", theta, sigma, data.n, level, {})


# ---------------------------------------------------------------------------
# PPI and PPI++


def _power_tuned_objective(labeled: LabeledDataset, unlabeled: UnlabeledDataset, model: LossModel,
                           lam: float) -> WeightedObjective:
    n, big_n = labeled.n, unlabeled.n
    return WeightedObjective(
        model,
        np.vstack([labeled.x, labeled.x, unlabeled.x]),
        np.concatenate([labeled.y, labeled.yhat, unlabeled.yhat]),
        np.concatenate([np.full(n, 1.0 / n), np.full(n, -lam / n), np.full(big_n, lam / big_n)]),
        np.zeros(labeled.d),
    )


def _ppi_inputs(labeled: LabeledDataset, unlabeled: UnlabeledDataset, model: LossModel,
                theta: NDArray) -> SandwichInputs:
    return SandwichInputs.from_gradients(
        mean_hessian(model, theta, labeled.x),
        gradients(model, theta, labeled.x, labeled.y),
        gradients(model, theta, labeled.x, labeled.yhat),
        gradients(model, theta, unlabeled.x, unlabeled.yhat),
        labeled.n / unlabeled.n,
    )


def fit_ppi(labeled: LabeledDataset, unlabeled: UnlabeledDataset, model: LossModel,
            level: float = 0.9) -> EstimateResult:
    _prepare(labeled, unlabeled, model)
    _check_sizes(labeled.n, labeled.d, labeled.d + 1)
    init = solve_shifted(model, labeled)
    theta, info = minimize(_power_tuned_objective(labeled, unlabeled, model, 1.0), init)
    sigma = ppi_variance(_ppi_inputs(labeled, unlabeled, model, theta), "imputed_loss")
    return _result("ppi", theta, sigma, labeled.n, level, {
        "newton_iterations": info["iterations"],
        "fallback_steps": info.get("fallback_steps", 0),
    })


def power_tuning_lambda(inputs: SandwichInputs) -> float:
    """Trace-optimal scalar ``Tr(H^-1 C_{l,lhat} H^-1) / ((1 + r) Tr(H^-1 C_lhat H^-1))``.

    Returns 0 when the imputed gradients have no variance.
    """
    h_inv = inv_sym(inputs.hessian)
    num = float(np.trace(h_inv @ inputs.cross_cov @ h_inv))
    den = float(np.trace(h_inv @ inputs.score_cov @ h_inv))
    ref = float(np.trace(h_inv @ inputs.grad_cov @ h_inv))
    if den <= 1e-14 * max(ref, 1e-300):
        return 0.0
    return num / ((1.0 + inputs.r_hat) * den)


def fit_ppi_plus_plus(labeled: LabeledDataset, unlabeled: UnlabeledDataset, model: LossModel,
                      level: float = 0.9) -> EstimateResult:
    _prepare(labeled, unlabeled, model)
    _check_sizes(labeled.n, labeled.d, labeled.d + 1)
    theta0 = solve_shifted(model, labeled)
    lam = power_tuning_lambda(_ppi_inputs(labeled, unlabeled, model, theta0))
    if lam == 0.0:
        base = fit_xy_only(labeled, model, level)
        base.method = "ppi_plus_plus"
        base.diagnostics.update({"lambda": 0.0, "constant_predictions": True})
        return base
    theta, info = minimize(_power_tuned_objective(labeled, unlabeled, model, lam), theta0)
    sigma = ppi_variance(_ppi_inputs(labeled, unlabeled, model, theta), "scaled", lam)
    return _result("ppi_plus_plus", theta, sigma, labeled.n, level, {
        "lambda": lam,
        "constant_predictions": False,
        "newton_iterations": info["iterations"],
        "fallback_steps": info.get("fallback_steps", 0),
    })


# ---------------------------------------------------------------------------
# RePPI


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: NDArray[np.int64]
    seed: int

    @property
    def sizes(self) -> tuple[int, int, int]:
        counts = np.bincount(self.fold_of, minlength=3)
        return int(counts[0]), int(counts[1]), int(counts[2])

    def indices(self, k: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.fold_of == k)


def assign_folds(n: int, seed: int) -> FoldAssignment:
    """Seeded random split into three folds whose sizes differ by at most one.

    The first ``n mod 3`` folds receive the extra rows.
    """
    if n < 3:
        raise DataError(f"three folds need at least 3 rows, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [n // 3 + (1 if k < n % 3 else 0) for k in range(3)]
    fold_of = np.empty(n, dtype=np.int64)
    start = 0
    for k, size in enumerate(sizes):
        fold_of[perm[start:start + size]] = k
        start += size
    return FoldAssignment(fold_of, int(seed))


@dataclass(frozen=True)
class PowerMatrix:
    m: NDArray[np.float64]

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.m)) if np.any(self.m) else float("inf")


def compute_power_matrix(grad_true: ArrayLike, s_hat: ArrayLike) -> PowerMatrix:
    """``Cov(grad_true, s_hat) Cov(s_hat)^-1`` with 1/(m-1) sample covariances."""
    g = np.asarray(grad_true, dtype=float)
    s = np.asarray(s_hat, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if s.ndim == 1:
        s = s[:, None]
    if g.shape[0] != s.shape[0]:
        raise DimensionError("gradient and score matrices have different row counts")
    m, q = s.shape
    if m <= q:
        raise DataError(
            f"power matrix needs more than {q} rows, got {m}; use a larger fold"
        )
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(s))):
        raise DataError("power matrix inputs must be finite")
    cross = sample_cov(g, s)
    return PowerMatrix(solve_sym(sample_cov(s), cross.T).T)


def make_score_fitter(model: LossModel, spec: RecalibratorSpec, target: str = "outcome") -> ScoreFitter:
    """Build the recalibration step: fit ``s(x, yhat) ~ E[grad l(theta0; X, Y) | X, Yhat]``.

    ``target="outcome"`` regresses ``y`` on ``(x, yhat)`` and plugs the fitted
    value into the GLM gradient, ``s = x (mu(x'theta0) - m(x, yhat))``; this is
    exact for GLMs because the gradient is affine in ``y`` and ``x`` is
    conditioned on.  ``target="gradient"`` regresses each gradient coordinate
    on ``(x, yhat)`` directly.
    """
    if target not in ("outcome", "gradient"):
        raise ValueError(f"unknown recalibration target {target!r}")

    def fit(data: LabeledDataset, theta0: NDArray) -> ScoreFn:
        features = np.column_stack([data.x, data.yhat])
        if target == "gradient":
            recal = fit_recalibrator(spec, features, gradients(model, theta0, data.x, data.y))
            return lambda x, yhat: recal.predict(np.column_stack([x, yhat]))
        recal = fit_recalibrator(spec, features, data.y)
        return lambda x, yhat: gradients(model, theta0, x, recal.predict(np.column_stack([x, yhat]))[:, 0])

    return fit


def crossfit_reppi(labeled: LabeledDataset, unlabeled: UnlabeledDataset, model: LossModel,
                   score_fitter: ScoreFitter, folds: FoldAssignment, level: float = 0.9) -> EstimateResult:
    """Three-fold cross-fitted recalibrated estimator for an arbitrary score fitter."""
    _prepare(labeled, unlabeled, model)
    n, d = labeled.n, labeled.d
    _check_sizes(n, d, 3 * (d + 2))
    if folds.fold_of.shape != (n,):
        raise DimensionError("fold assignment does not match the labeled data")
    r_hat = n / unlabeled.n
    shrink = 1.0 / (1.0 + r_hat)
    parts = [labeled.subset(folds.indices(k)) for k in range(3)]

    thetas, weights, scores, diag_rot = [], [], [], []
    m_singular = False
    for init_k, recal_k, final_k in ROTATIONS:
        d_init, d_recal, d_final = parts[init_k], parts[recal_k], parts[final_k]
        theta0 = solve_shifted(model, d_init)
        score = score_fitter(d_recal, theta0)
        s_final = score(d_final.x, d_final.yhat)
        s_unlab = score(unlabeled.x, unlabeled.yhat)
        try:
            power = compute_power_matrix(gradients(model, theta0, d_final.x, d_final.y), s_final)
        except SingularMatrixError:
            # scores without variation carry no information
            power = PowerMatrix(np.zeros((d, s_final.shape[1])))
            m_singular = True
        shift = shrink * power.m @ (s_final.mean(axis=0) - s_unlab.mean(axis=0))
        theta_k = solve_shifted(model, d_final, shift, init=theta0)
        thetas.append(theta_k)
        weights.append(d_final.n / n)
        scores.append((d_final, s_final))
        diag_rot.append({
            "folds": [init_k, recal_k, final_k],
            "fold_sizes": [d_init.n, d_recal.n, d_final.n],
            "power_condition_number": power.condition_number,
            "theta": theta_k,
        })

    weights_arr = np.asarray(weights)
    theta = np.sum(weights_arr[:, None] * np.asarray(thetas), axis=0)

    moments = []
    for d_final, s_final in scores:
        grads = gradients(model, theta, d_final.x, d_final.y)
        moments.append(RotationMoments(
            hessian=mean_hessian(model, theta, d_final.x),
            grad_cov=sample_cov(grads),
            cross_cov=sample_cov(grads, s_final),
            score_cov=sample_cov(s_final),
        ))
    sigma, flags = reppi_variance(moments, weights_arr, r_hat)
    diagnostics = {
        "seed": folds.seed,
        "fold_sizes": list(folds.sizes),
        "rotations": diag_rot,
        "power_matrix_singular": m_singular,
        **flags,
    }
    return _result("reppi", theta, sigma, n, level, diagnostics)


def fit_reppi(labeled: LabeledDataset, unlabeled: UnlabeledDataset, model: LossModel,
              recal: RecalibratorSpec | None = None, level: float = 0.9, seed: int = 0,
              target: str = "outcome") -> EstimateResult:
    recal = RecalibratorSpec() if recal is None else recal
    folds = assign_folds(labeled.n, seed)
    result = crossfit_reppi(labeled, unlabeled, model, make_score_fitter(model, recal, target), folds, level)
    result.diagnostics["recalibrator"] = str(recal)
    result.diagnostics["recalibration_target"] = target
    return result


def fit_method(method: str, labeled: LabeledDataset, unlabeled: UnlabeledDataset, model: LossModel,
               level: float = 0.9, recal: RecalibratorSpec | None = None, seed: int = 0,
               target: str = "outcome") -> EstimateResult:
    if method == "xy_only":
        return fit_xy_only(labeled, model, level)
    if method == "ppi":
        return fit_ppi(labeled, unlabeled, model, level)
    if method == "ppi_plus_plus":
        return fit_ppi_plus_plus(labeled, unlabeled, model, level)
    if method == "reppi":
        return fit_reppi(labeled, unlabeled, model, recal, level, seed, target)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
