"""GLM losses, datasets and convex M-estimation solvers.

Every loss here has the form ``l(theta; x, y) = b(x'theta) - y x'theta`` with
``b' = mu``, so the gradient is ``x (mu(x'theta) - y)`` and the Hessian
``mu'(x'theta) x x'`` does not depend on ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
JITTER_SCALE = 1e-10
# eigenvalue ratio below which a symmetric matrix is treated as singular
SINGULAR_RATIO = 1e-13


class ReppiError(Exception):
    """Base class for all package errors."""


class DimensionError(ReppiError, ValueError):
    pass


class DataError(ReppiError, ValueError):
    pass


class SingularMatrixError(ReppiError, np.linalg.LinAlgError):
    pass


class ConvergenceError(ReppiError, ArithmeticError):
    def __init__(self, message: str, grad_norm: float = float("nan")) -> None:
        super().__init__(message)
        self.grad_norm = grad_norm


class Family(str, Enum):
    SQUARED_ERROR = "squared_error"
    LOGISTIC = "logistic"


def _sigmoid(eta: NDArray[np.float64]) -> NDArray[np.float64]:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class LossModel:
    """A GLM loss: squared error (identity link) or logistic.

    Mean estimation is squared error with ``intercept_only=True``; the design
    is then a single column of ones.
    """

    family: Family = Family.SQUARED_ERROR
    intercept_only: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))

    @classmethod
    def mean_estimation(cls) -> LossModel:
        return cls(Family.SQUARED_ERROR, intercept_only=True)

    def mean(self, eta: ArrayLike) -> NDArray[np.float64]:
        eta = np.asarray(eta, dtype=float)
        if self.family is Family.SQUARED_ERROR:
            return eta.copy()
        return _sigmoid(np.atleast_1d(eta)).reshape(eta.shape)

    def mean_derivative(self, eta: ArrayLike) -> NDArray[np.float64]:
        eta = np.asarray(eta, dtype=float)
        if self.family is Family.SQUARED_ERROR:
            return np.ones_like(eta)
        p = self.mean(eta)
        return p * (1.0 - p)

    def cumulant(self, eta: ArrayLike) -> NDArray[np.float64]:
        """Antiderivative ``b`` of the mean function."""
        eta = np.asarray(eta, dtype=float)
        if self.family is Family.SQUARED_ERROR:
            return 0.5 * eta**2
        return np.logaddexp(0.0, eta)

    def offset(self, y: ArrayLike) -> NDArray[np.float64]:
        # makes the squared-error loss equal to (y - eta)^2 / 2 rather than up to a constant
        y = np.asarray(y, dtype=float)
        if self.family is Family.SQUARED_ERROR:
            return 0.5 * y**2
        return np.zeros_like(y)

    def validate_outcome(self, y: ArrayLike) -> None:
        y = np.asarray(y, dtype=float)
        if self.family is Family.LOGISTIC and not np.all((y == 0.0) | (y == 1.0)):
            raise DataError("logistic loss requires outcomes in {0, 1}")


# ---------------------------------------------------------------------------
# datasets and results


def _as_matrix(x: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    return arr


def _as_vector(v: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class LabeledDataset:
    """Rows with covariates, true outcome and prediction."""

    x: NDArray[np.float64]
    y: NDArray[np.float64]
    yhat: NDArray[np.float64]

    def __post_init__(self) -> None:
        x = _as_matrix(self.x, "x")
        y = _as_vector(self.y, "y")
        yhat = _as_vector(self.yhat, "yhat")
        if not (x.shape[0] == y.shape[0] == yhat.shape[0]):
            raise DimensionError(
                f"row counts disagree: x={x.shape[0]}, y={y.shape[0]}, yhat={yhat.shape[0]}"
            )
        if x.shape[0] < 1:
            raise DataError("labeled dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(yhat))):
            raise DataError("labeled dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "yhat", yhat)

    @classmethod
    def for_mean(cls, y: ArrayLike, yhat: ArrayLike) -> LabeledDataset:
        y = _as_vector(y, "y")
        return cls(np.ones((y.shape[0], 1)), y, yhat)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: NDArray[np.intp]) -> LabeledDataset:
        return LabeledDataset(self.x[idx], self.y[idx], self.yhat[idx])


@dataclass(frozen=True)
class UnlabeledDataset:
    """Rows with covariates and prediction only."""

    x: NDArray[np.float64]
    yhat: NDArray[np.float64]

    def __post_init__(self) -> None:
        x = _as_matrix(self.x, "x")
        yhat = _as_vector(self.yhat, "yhat")
        if x.shape[0] != yhat.shape[0]:
            raise DimensionError(f"row counts disagree: x={x.shape[0]}, yhat={yhat.shape[0]}")
        if x.shape[0] < 1:
            raise DataError("unlabeled dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(yhat))):
            raise DataError("unlabeled dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "yhat", yhat)

    @classmethod
    def for_mean(cls, yhat: ArrayLike) -> UnlabeledDataset:
        yhat = _as_vector(yhat, "yhat")
        return cls(np.ones((yhat.shape[0], 1)), yhat)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def check_compatible(labeled: LabeledDataset, unlabeled: UnlabeledDataset) -> None:
    if labeled.d != unlabeled.d:
        raise DimensionError(
            f"labeled data has {labeled.d} covariate columns, unlabeled has {unlabeled.d}"
        )


def check_design(model: LossModel, x: NDArray[np.float64]) -> None:
    if model.intercept_only and (x.shape[1] != 1 or not np.all(x == 1.0)):
        raise DimensionError("intercept-only model expects a single column of ones")


@dataclass
class EstimateResult:
    """Point estimate with its estimated asymptotic covariance and intervals.

    ``sigma`` estimates the covariance of ``sqrt(n) * (theta_hat - theta_star)``
    where ``n`` is the labeled sample size.
    """

    method: str
    theta: NDArray[np.float64]
    sigma: NDArray[np.float64]
    ci_lower: NDArray[np.float64]
    ci_upper: NDArray[np.float64]
    level: float
    n: int
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def std_error(self) -> NDArray[np.float64]:
        return np.sqrt(np.diag(self.sigma) / self.n)

    @property
    def width(self) -> NDArray[np.float64]:
        return self.ci_upper - self.ci_lower

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta": [float(v) for v in self.theta],
            "sigma": [[float(v) for v in row] for row in self.sigma],
            "ci": [[float(lo), float(hi)] for lo, hi in zip(self.ci_lower, self.ci_upper)],
            "level": float(self.level),
            "n": int(self.n),
            "diagnostics": {k: _plain(v) for k, v in sorted(self.diagnostics.items())},
        }


def _plain(v: Any) -> Any:
    if isinstance(v, (np.floating, float)):
        # JSON has no infinities; non-finite diagnostics become null
        return float(v) if np.isfinite(v) else None
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return int(v)
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (list, tuple)):
        return [_plain(u) for u in v]
    if isinstance(v, dict):
        return {str(k): _plain(u) for k, u in v.items()}
    return v


# ---------------------------------------------------------------------------
# pointwise loss, gradient, Hessian


def _check_point(model: LossModel, theta: ArrayLike, x: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if theta.shape != x.shape:
        raise DimensionError(f"theta has length {theta.size} but x has length {x.size}")
    return theta, x


def loss(model: LossModel, theta: ArrayLike, x: ArrayLike, y: float) -> float:
    theta, x = _check_point(model, theta, x)
    model.validate_outcome(y)
    eta = float(x @ theta)
    if model.family is Family.SQUARED_ERROR:
        return 0.5 * (y - eta) ** 2
    return float(np.logaddexp(0.0, eta)) - y * eta


def gradient(model: LossModel, theta: ArrayLike, x: ArrayLike, y: float) -> NDArray[np.float64]:
    theta, x = _check_point(model, theta, x)
    model.validate_outcome(y)
    eta = x @ theta
    return x * (float(model.mean(eta)) - y)


def hessian(model: LossModel, theta: ArrayLike, x: ArrayLike, y: float) -> NDArray[np.float64]:
    theta, x = _check_point(model, theta, x)
    model.validate_outcome(y)
    w = float(model.mean_derivative(x @ theta))
    return w * np.outer(x, x)


# ---------------------------------------------------------------------------
# vectorized forms (no outcome validation: imputed losses take real-valued yhat)


def losses(model: LossModel, theta: NDArray, x: NDArray, t: NDArray) -> NDArray[np.float64]:
    eta = x @ theta
    return model.cumulant(eta) - t * eta + model.offset(t)


def gradients(model: LossModel, theta: NDArray, x: NDArray, t: NDArray) -> NDArray[np.float64]:
    """Per-row gradients ``x_i (mu(x_i'theta) - t_i)`` as an (m, d) matrix."""
    return x * (model.mean(x @ theta) - t)[:, None]


def mean_hessian(model: LossModel, theta: NDArray, x: NDArray, weights: NDArray | None = None) -> NDArray[np.float64]:
    w = model.mean_derivative(x @ theta)
    if weights is None:
        w = w / x.shape[0]
    else:
        w = w * weights
    return symmetrize((x * w[:, None]).T @ x)


# ---------------------------------------------------------------------------
# linear algebra helpers


def symmetrize(a: NDArray) -> NDArray[np.float64]:
    return 0.5 * (a + a.T)


def _needs_jitter(a: NDArray) -> bool:
    eig = np.linalg.eigvalsh(a)
    top = np.max(np.abs(eig))
    return top == 0.0 or eig[0] <= SINGULAR_RATIO * top


def jitter(a: NDArray) -> NDArray[np.float64]:
    d = a.shape[0]
    return a + (JITTER_SCALE * np.trace(a) / d) * np.eye(d)


def solve_sym(a: NDArray, b: NDArray) -> NDArray[np.float64]:
    """Solve ``a z = b`` for symmetric ``a``, adding ridge jitter if near-singular."""
    a = symmetrize(np.atleast_2d(np.asarray(a, dtype=float)))
    if not np.all(np.isfinite(a)):
        raise SingularMatrixError("matrix has non-finite entries")
    if _needs_jitter(a):
        a = jitter(a)
        if _needs_jitter(a):
            raise SingularMatrixError("matrix is singular even after ridge jitter")
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eigen check catches these
        raise SingularMatrixError(str(exc)) from exc


def inv_sym(a: NDArray) -> NDArray[np.float64]:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return symmetrize(solve_sym(a, np.eye(a.shape[0])))


# ---------------------------------------------------------------------------
# solvers


@dataclass(frozen=True)
class WeightedObjective:
    """``sum_i w_i l(theta; x_i, t_i) - theta' shift`` for a GLM loss.

    Weights may be negative (the rectifier terms of a prediction-powered
    objective), in which case convexity is not guaranteed.
    """

    model: LossModel
    x: NDArray[np.float64]
    targets: NDArray[np.float64]
    weights: NDArray[np.float64]
    shift: NDArray[np.float64]

    def value(self, theta: NDArray) -> float:
        return float(self.weights @ losses(self.model, theta, self.x, self.targets) - theta @ self.shift)

    def grad(self, theta: NDArray) -> NDArray[np.float64]:
        resid = self.model.mean(self.x @ theta) - self.targets
        return self.x.T @ (self.weights * resid) - self.shift

    def hess(self, theta: NDArray) -> NDArray[np.float64]:
        return mean_hessian(self.model, theta, self.x, self.weights)


def minimize(obj: WeightedObjective, init: NDArray | None = None, tol: float = NEWTON_TOL,
             max_iter: int = NEWTON_MAX_ITER) -> tuple[NDArray[np.float64], dict[str, Any]]:
    """Minimize a weighted GLM objective.

    Squared error is solved directly from the normal equations. Otherwise a
    damped Newton iteration with step halving is used; when the Hessian is not
    positive definite or the Newton direction is not a descent direction the
    step falls back to steepest descent.
    """
    d = obj.x.shape[1]
    theta = np.zeros(d) if init is None else np.asarray(init, dtype=float).copy()
    if obj.model.family is Family.SQUARED_ERROR:
        gram = obj.hess(theta)
        rhs = obj.x.T @ (obj.weights * obj.targets) + obj.shift
        theta = solve_sym(gram, rhs)
        return theta, {"iterations": 0, "grad_norm": float(np.linalg.norm(obj.grad(theta)))}

    fallback_steps = 0
    g = obj.grad(theta)
    f = obj.value(theta)
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return theta, {"iterations": it, "grad_norm": gnorm, "fallback_steps": fallback_steps}
        h = obj.hess(theta)
        try:
            direction = -np.linalg.solve(h, g) if np.linalg.eigvalsh(h)[0] > 0 else None
        except np.linalg.LinAlgError:
            direction = None
        if direction is None or not np.all(np.isfinite(direction)) or direction @ g >= 0:
            direction = -g / max(np.sqrt(np.trace(np.abs(h))), 1.0)
            fallback_steps += 1
        step = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + step * direction
            fc = obj.value(cand)
            if np.isfinite(fc) and fc <= f + 1e-4 * step * (direction @ g):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # objective flat to roundoff; accept a full Newton step only if it shrinks the gradient
            cand = theta + direction
            gc = obj.grad(cand)
            if np.linalg.norm(gc) < gnorm:
                theta, g, f = cand, gc, obj.value(cand)
                continue
            raise ConvergenceError(
                f"line search failed at iteration {it} (gradient norm {gnorm:.3e})", gnorm
            )
        theta, f = cand, fc
        g = obj.grad(theta)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return theta, {"iterations": max_iter, "grad_norm": gnorm, "fallback_steps": fallback_steps}
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (gradient norm {gnorm:.3e})", gnorm
    )


def solve_shifted(model: LossModel, data: LabeledDataset, shift: ArrayLike | None = None,
                  init: ArrayLike | None = None, tol: float = NEWTON_TOL,
                  max_iter: int = NEWTON_MAX_ITER) -> NDArray[np.float64]:
    """Minimize ``(1/n) sum l(theta; x_i, y_i) - theta' shift`` over theta."""
    check_design(model, data.x)
    model.validate_outcome(data.y)
    shift = np.zeros(data.d) if shift is None else np.asarray(shift, dtype=float).ravel()
    if shift.shape != (data.d,):
        raise DimensionError(f"shift has length {shift.size}, expected {data.d}")
    obj = WeightedObjective(model, data.x, data.y, np.full(data.n, 1.0 / data.n), shift)
    theta, _ = minimize(obj, init, tol, max_iter)
    return theta
