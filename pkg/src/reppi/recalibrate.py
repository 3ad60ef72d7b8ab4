"""Regressors that estimate conditional expectations given ``(x, yhat)``.

Each fitted recalibrator maps a feature matrix whose last column is the
prediction ``yhat`` to a matrix of ``d_out`` fitted targets.  Every output
column is fitted independently by least squares (or its local analogue).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .core import DataError, DimensionError


class RecalibratorKind(str, Enum):
    ZERO = "zero"
    LINEAR = "linear"
    BIN = "bin"
    KNN = "knn"


@dataclass(frozen=True)
class RecalibratorSpec:
    kind: RecalibratorKind = RecalibratorKind.LINEAR
    k: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RecalibratorKind(self.kind))
        if self.kind is RecalibratorKind.KNN and int(self.k) < 1:
            raise ValueError("knn recalibrator needs k >= 1")

    @classmethod
    def parse(cls, text: str) -> RecalibratorSpec:
        """Parse ``zero``, ``linear``, ``bin`` or ``knn[:k]``."""
        name, _, arg = text.strip().lower().partition(":")
        if name == "knn":
            return cls(RecalibratorKind.KNN, int(arg) if arg else 10)
        if arg:
            raise ValueError(f"recalibrator {name!r} takes no parameter")
        return cls(RecalibratorKind(name))

    def __str__(self) -> str:
        if self.kind is RecalibratorKind.KNN:
            return f"knn:{self.k}"
        return self.kind.value


@dataclass(frozen=True)
class FittedRecalibrator:
    """An immutable fitted regressor; ``params`` depends on ``kind``.

    * linear: ``coef`` of shape ``(d_out, p + 1)`` on ``(1, features)``
    * bin: ``keys``, ``means`` per distinct prediction and ``global_mean``
    * knn: standardized training features, ``targets``, ``k`` and the scaling
    """

    kind: RecalibratorKind
    n_features: int
    d_out: int
    params: dict[str, Any] = field(default_factory=dict)

    def predict(self, features: ArrayLike) -> NDArray[np.float64]:
        f = _features(features)
        if f.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} feature columns, got {f.shape[1]}")
        m = f.shape[0]
        if self.kind is RecalibratorKind.ZERO:
            return np.zeros((m, self.d_out))
        if self.kind is RecalibratorKind.LINEAR:
            design = np.hstack([np.ones((m, 1)), f])
            return design @ self.params["coef"].T
        if self.kind is RecalibratorKind.BIN:
            return _bin_lookup(self.params, f[:, -1])
        z = (f - self.params["center"]) / self.params["scale"]
        k = self.params["k"]
        _, idx = self.params["tree"].query(z, k=k)
        idx = np.asarray(idx).reshape(m, k)
        return self.params["targets"][idx].mean(axis=1)

    @property
    def coef(self) -> NDArray[np.float64]:
        return self.params["coef"]


def _features(features: ArrayLike) -> NDArray[np.float64]:
    f = np.asarray(features, dtype=float)
    if f.ndim == 1:
        f = f[None, :]
    if f.ndim != 2:
        raise DimensionError("features must be a 2-d matrix")
    return f


def _bin_lookup(params: dict[str, Any], yhat: NDArray) -> NDArray[np.float64]:
    keys, means = params["keys"], params["means"]
    pos = np.searchsorted(keys, yhat)
    pos_c = np.minimum(pos, keys.size - 1)
    hit = keys[pos_c] == yhat
    out = np.tile(params["global_mean"], (yhat.size, 1))
    out[hit] = means[pos_c[hit]]
    return out


def fit_recalibrator(spec: RecalibratorSpec, features: ArrayLike, targets: ArrayLike) -> FittedRecalibrator:
    """Fit ``targets`` (m x d_out) on ``features`` (m x p, last column ``yhat``)."""
    f = _features(features)
    t = np.asarray(targets, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    m, p = f.shape
    if t.shape[0] != m:
        raise DimensionError(f"{m} feature rows but {t.shape[0]} target rows")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t))):
        raise DataError("recalibrator inputs must be finite")
    if m < 2:
        raise DataError("recalibrator needs at least two rows")
    d_out = t.shape[1]

    if spec.kind is RecalibratorKind.ZERO:
        return FittedRecalibrator(spec.kind, p, d_out)

    if spec.kind is RecalibratorKind.LINEAR:
        if m < p + 2:
            raise DataError(f"linear recalibrator needs at least {p + 2} rows, got {m}")
        design = np.hstack([np.ones((m, 1)), f])
        # lstsq gives the minimum-norm solution when the design is rank deficient
        # (e.g. an intercept column already present among the covariates)
        coef, *_ = np.linalg.lstsq(design, t, rcond=None)
        return FittedRecalibrator(spec.kind, p, d_out, {"coef": coef.T.copy()})

    if spec.kind is RecalibratorKind.BIN:
        keys, inverse = np.unique(f[:, -1], return_inverse=True)
        sums = np.zeros((keys.size, d_out))
        np.add.at(sums, inverse, t)
        counts = np.bincount(inverse, minlength=keys.size)
        return FittedRecalibrator(spec.kind, p, d_out, {
            "keys": keys,
            "means": sums / counts[:, None],
            "counts": counts,
            "global_mean": t.mean(axis=0),
        })

    k = min(int(spec.k), m)
    center = f.mean(axis=0)
    scale = f.std(axis=0)
    scale[scale == 0] = 1.0
    z = (f - center) / scale
    return FittedRecalibrator(spec.kind, p, d_out, {
        "tree": cKDTree(z), "targets": t.copy(), "k": k, "center": center, "scale": scale,
    })


def predict(recal: FittedRecalibrator, x: ArrayLike, yhat: float) -> NDArray[np.float64]:
    """Single-point prediction at covariates ``x`` and prediction ``yhat``."""
    row = np.append(np.asarray(x, dtype=float).ravel(), float(yhat))
    return recal.predict(row[None, :])[0]
