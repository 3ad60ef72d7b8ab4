"""Plug-in sandwich covariances and normal-theory confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import DimensionError, SingularMatrixError, inv_sym, symmetrize

# Acklam's rational approximation to the standard normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    Acklam's approximation (relative error about 1e-9) followed by one Halley
    correction against ``math.erfc``, which brings it to near machine precision.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def sample_cov(a: ArrayLike, b: ArrayLike | None = None) -> NDArray[np.float64]:
    """Sample (cross-)covariance of the columns of ``a`` and ``b`` with 1/(m-1)."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    m = a.shape[0]
    if m < 2:
        raise DimensionError("need at least two rows for a sample covariance")
    ac = a - a.mean(axis=0)
    if b is None:
        return symmetrize(ac.T @ ac / (m - 1))
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[0] != m:
        raise DimensionError("covariance arguments have different row counts")
    return ac.T @ (b - b.mean(axis=0)) / (m - 1)


def project_psd(a: NDArray) -> tuple[NDArray[np.float64], bool]:
    """Symmetrize and floor negative eigenvalues at zero.

    Returns the projected matrix and whether any eigenvalue was clipped.
    Eigenvalues that are negative only at roundoff level are not reported.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    eig, vec = np.linalg.eigh(a)
    scale = max(float(np.max(np.abs(eig))), 1e-300)
    if eig[0] >= 0.0:
        return a, False
    projected = eig[0] < -1e-12 * scale
    eig = np.clip(eig, 0.0, None)
    out = symmetrize((vec * eig) @ vec.T)
    return out, bool(projected)


@dataclass(frozen=True)
class SandwichInputs:
    """Moment matrices feeding a prediction-powered sandwich.

    ``grad_cov`` and ``cross_cov`` come from labeled rows; ``score_cov`` is the
    covariance of the imputed gradient pooled over labeled and unlabeled rows,
    ``score_cov_labeled`` the same on labeled rows only.
    """

    hessian: NDArray[np.float64]
    grad_cov: NDArray[np.float64]
    cross_cov: NDArray[np.float64]
    score_cov: NDArray[np.float64]
    score_cov_labeled: NDArray[np.float64]
    r_hat: float

    @classmethod
    def from_gradients(cls, hessian: NDArray, grad: NDArray, score_lab: NDArray,
                       score_unlab: NDArray, r_hat: float) -> SandwichInputs:
        if r_hat <= 0:
            raise ValueError("r_hat must be positive")
        return cls(
            hessian=symmetrize(np.asarray(hessian, dtype=float)),
            grad_cov=sample_cov(grad),
            cross_cov=sample_cov(grad, score_lab),
            score_cov=sample_cov(np.vstack([score_lab, score_unlab])),
            score_cov_labeled=sample_cov(score_lab),
            r_hat=float(r_hat),
        )


def _sandwich(hessian: NDArray, meat: NDArray) -> NDArray[np.float64]:
    h_inv = inv_sym(hessian)
    return symmetrize(h_inv @ meat @ h_inv)


def sandwich_xy_only(hessian: ArrayLike, grad_cov: ArrayLike) -> NDArray[np.float64]:
    """``H^-1 C H^-1`` for the labeled-only M-estimator."""
    out, _ = project_psd(_sandwich(np.atleast_2d(hessian), np.atleast_2d(grad_cov)))
    return out


def ppi_variance(inputs: SandwichInputs, g_kind: str = "imputed_loss", lam: float | None = None) -> NDArray[np.float64]:
    """Asymptotic covariance of a prediction-powered estimator.

    The imputed-loss gradient is ``lam * score`` where ``score`` is whatever
    ``inputs`` was built from: ``imputed_loss`` uses ``lam = 1`` on the
    imputed loss gradient, ``scaled`` uses the supplied power-tuning ``lam``,
    and ``recalibrated`` uses ``lam = 1`` on an already scaled ``M s``.
    """
    if g_kind in ("imputed_loss", "recalibrated"):
        lam = 1.0
    elif g_kind == "scaled":
        if lam is None:
            raise ValueError("g_kind='scaled' needs lam")
    else:
        raise ValueError(f"unknown g_kind {g_kind!r}")
    lam = float(lam)
    c = inputs.cross_cov
    resid_cov = inputs.grad_cov - lam * (c + c.T) + lam**2 * inputs.score_cov_labeled
    meat = inputs.r_hat * lam**2 * inputs.score_cov + resid_cov
    out, _ = project_psd(_sandwich(inputs.hessian, meat))
    return out


@dataclass(frozen=True)
class RotationMoments:
    """Held-out fold moments for one cross-fitting rotation."""

    hessian: NDArray[np.float64]
    grad_cov: NDArray[np.float64]
    cross_cov: NDArray[np.float64]  # Cov(grad, s)
    score_cov: NDArray[np.float64]  # Cov(s)


def reppi_variance(per_rotation: Sequence[RotationMoments], weights: ArrayLike,
                   r_hat: float) -> tuple[NDArray[np.float64], dict[str, bool]]:
    """Weighted average over rotations of ``H^-1 (C - Delta) H^-1`` with
    ``Delta = C_ls C_s^-1 C_sl / (1 + r)``.

    Returns the covariance and flags: ``psd_projected`` when negative
    eigenvalues were clipped, ``score_cov_singular`` when some rotation's
    score covariance could not be inverted and its Delta term was dropped.
    """
    weights = np.asarray(weights, dtype=float)
    if len(per_rotation) != weights.size:
        raise DimensionError("one weight per rotation is required")
    if not np.isclose(weights.sum(), 1.0, rtol=0, atol=1e-12):
        raise ValueError("rotation weights must sum to one")
    total = None
    singular = False
    for mom, w in zip(per_rotation, weights):
        meat = np.array(mom.grad_cov, dtype=float)
        try:
            delta = mom.cross_cov @ inv_sym(mom.score_cov) @ mom.cross_cov.T / (1.0 + r_hat)
            meat = meat - delta
        except SingularMatrixError:
            singular = True
        term = w * _sandwich(mom.hessian, meat)
        total = term if total is None else total + term
    out, projected = project_psd(total)
    return out, {"psd_projected": projected, "score_cov_singular": singular}


def confidence_interval(theta: ArrayLike, sigma: ArrayLike, n: int,
                        level: float = 0.9) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Coordinatewise ``theta_j +- z * sqrt(sigma_jj / n)``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    theta = np.asarray(theta, dtype=float).ravel()
    diag = np.diag(np.atleast_2d(sigma)).astype(float)
    if np.any(diag < 0):
        raise ValueError("covariance has a negative diagonal entry")
    half = normal_quantile(0.5 + level / 2.0) * np.sqrt(diag / n)
    return theta - half, theta + half


def gaussian_quadratic_trace(sigma_x: ArrayLike, theta: ArrayLike) -> float:
    """``Tr(S^-1 Cov(X X' theta) S^-1)`` for ``X ~ N(0, S)``, in closed form.

    Equals ``|theta|^2 + Tr(S^-1) theta' S theta``.
    """
    s = np.atleast_2d(np.asarray(sigma_x, dtype=float))
    theta = np.asarray(theta, dtype=float).ravel()
    if s.shape != (theta.size, theta.size) or not np.allclose(s, s.T):
        raise DimensionError("sigma_x must be a symmetric d x d matrix")
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sigma_x must be positive definite") from exc
    chol_inv = np.linalg.inv(chol)
    tr_inv = float(np.sum(chol_inv**2))
    return float(theta @ theta + tr_inv * (theta @ s @ theta))
