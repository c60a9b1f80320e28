"""The exponential-mechanism target density: logistic model predictions,
weighted squared-error loss, utility, sensitivity bound, and the unnormalized
log-density (epsilon / 2s) * u(theta) with its gradient in theta."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .errors import DataValidationError, NumericError


def logistic_predict(theta: np.ndarray, X: np.ndarray, bias: bool = True) -> np.ndarray:
    """sigmoid(theta . [x; 1]) per row; with ``bias=False`` the score is theta . x."""
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    expected = X.shape[1] + (1 if bias else 0)
    if theta.shape != (expected,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({expected},)")
    score = X @ theta[: X.shape[1]]
    if bias:
        score = score + theta[-1]
    return expit(score)


def _check_batch(X, y, w):
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataValidationError("targets must be binary {0, 1}")
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise DataValidationError("weights must lie in [0, 1]")
    return y, w


def l2_loss(theta, X, y, w=None, bias: bool = True) -> float:
    """Weighted squared-error loss sum_i w_i (yhat_i - y_i)^2."""
    y, w = _check_batch(X, y, w)
    yhat = logistic_predict(theta, X, bias=bias)
    return float(np.sum(w * (yhat - y) ** 2))


def l2_loss_grad(theta, X, y, w=None, bias: bool = True) -> np.ndarray:
    """Exact gradient of :func:`l2_loss` in theta."""
    y, w = _check_batch(X, y, w)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    yhat = logistic_predict(theta, X, bias=bias)
    coef = 2.0 * w * (yhat - y) * yhat * (1.0 - yhat)  # (n,)
    grad_w = X.T @ coef
    if bias:
        return np.concatenate([grad_w, [coef.sum()]])
    return grad_w


def l2_loss_batch(thetas, X, y, w=None, bias: bool = True) -> np.ndarray:
    """Loss of many parameter vectors at once. thetas: (N, p[+1])."""
    y, w = _check_batch(X, y, w)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    scores = X @ thetas[:, : X.shape[1]].T  # (n, N)
    if bias:
        scores = scores + thetas[:, -1][None, :]
    yhat = expit(scores)
    resid = yhat - y[:, None]
    return np.sum(w[:, None] * resid**2, axis=0)


def l2_loss_grad_batch(thetas, X, y, w=None, bias: bool = True) -> np.ndarray:
    """Per-theta loss gradients, shape (N, p[+1])."""
    y, w = _check_batch(X, y, w)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    scores = X @ thetas[:, : X.shape[1]].T
    if bias:
        scores = scores + thetas[:, -1][None, :]
    yhat = expit(scores)
    coef = 2.0 * w[:, None] * (yhat - y[:, None]) * yhat * (1.0 - yhat)  # (n, N)
    grad_w = coef.T @ X  # (N, p)
    if bias:
        return np.concatenate([grad_w, coef.sum(axis=0)[:, None]], axis=1)
    return grad_w


def sensitivity_bound_l2(loss_kind: str = "l2") -> float:
    """Constant sensitivity bound for weighted squared-error loss with binary
    targets, sigmoid outputs, and weights in [0, 1]."""
    if loss_kind != "l2":
        raise ValueError(f"no sensitivity bound available for loss kind {loss_kind!r}")
    return 1.0


@dataclass
class UtilitySpec:
    """Utility u = phi(loss) with phi strictly decreasing (default negation)."""

    phi: Callable[[np.ndarray], np.ndarray] = lambda t: -t
    dphi: Callable[[np.ndarray], np.ndarray] = lambda t: -np.ones_like(np.asarray(t, dtype=float))

    def check_decreasing(self, lo: float = 0.0, hi: float = 100.0, n: int = 256) -> None:
        ts = np.linspace(lo, hi, n)
        vals = np.asarray(self.phi(ts), dtype=float)
        if not np.all(np.diff(vals) < 0.0):
            raise ValueError("phi is not strictly decreasing on the sampled range")


@dataclass
class ExpMTarget:
    """Unnormalized log target density log p*(theta) = (eps / 2s) * u(theta).

    ``data_batch`` evaluates the loss on a row minibatch; with
    ``scale_to_full`` the minibatch loss is rescaled by n_total / n_batch so
    the minibatch density is a stochastic estimate of the full-data density.
    """

    X: np.ndarray
    y: np.ndarray
    w: Optional[np.ndarray] = None
    epsilon: float = 1.0
    s: float = 1.0
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    bias: bool = True
    data_batch: Optional[int] = None
    scale_to_full: bool = True
    ridge: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.s <= 0.0:
            raise ValueError(f"sensitivity bound must be positive, got {self.s}")
        if self.ridge < 0.0:
            raise ValueError(f"ridge coefficient must be non-negative, got {self.ridge}")
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        self.w = None if self.w is None else np.asarray(self.w, dtype=float)
        _check_batch(self.X, self.y, self.w)

    @property
    def dim(self) -> int:
        return self.X.shape[1] + (1 if self.bias else 0)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def _slice(self, rows):
        if rows is None:
            return self.X, self.y, self.w, 1.0
        X = self.X[rows]
        y = self.y[rows]
        w = None if self.w is None else self.w[rows]
        scale = self.n_rows / len(rows) if self.scale_to_full else 1.0
        return X, y, w, scale

    def log_unnorm(self, thetas: np.ndarray, rows=None) -> np.ndarray:
        """(eps / 2s) * phi(L(theta)) per parameter vector."""
        X, y, w, scale = self._slice(rows)
        loss = scale * l2_loss_batch(thetas, X, y, w, bias=self.bias)
        if self.ridge > 0.0:
            # Data-independent penalty: cancels in the replace-one-row loss
            # difference, so the sensitivity bound is unchanged.
            loss = loss + self.ridge * np.sum(np.atleast_2d(thetas) ** 2, axis=1)
        vals = (self.epsilon / (2.0 * self.s)) * np.asarray(self.utility.phi(loss), dtype=float)
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise NumericError(f"non-finite target log-density at sample {bad}", where=bad)
        return vals

    def log_unnorm_grad(self, thetas: np.ndarray, rows=None) -> np.ndarray:
        """Gradient of log_unnorm in theta, per parameter vector."""
        X, y, w, scale = self._slice(rows)
        loss = scale * l2_loss_batch(thetas, X, y, w, bias=self.bias)
        dloss = scale * l2_loss_grad_batch(thetas, X, y, w, bias=self.bias)
        if self.ridge > 0.0:
            thetas2 = np.atleast_2d(np.asarray(thetas, dtype=float))
            loss = loss + self.ridge * np.sum(thetas2 ** 2, axis=1)
            dloss = dloss + 2.0 * self.ridge * thetas2
        dphi = np.asarray(self.utility.dphi(loss), dtype=float)
        return (self.epsilon / (2.0 * self.s)) * dphi[:, None] * dloss

    def config_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "sensitivity": self.s,
            "bias": self.bias,
            "ridge": self.ridge,
            "data_batch": self.data_batch,
            "scale_to_full": self.scale_to_full,
            "n_rows": int(self.n_rows),
            "n_features": int(self.X.shape[1]),
        }


def brute_force_sensitivity(X, y, w, candidate_rows, thetas, bias: bool = True) -> float:
    """Empirical sensitivity: max |u(D) - u(D with row r -> r')| over all rows
    r, replacements r' = (x', y', w'), and theta in thetas.

    Exhaustive enumeration; intended for tiny datasets only.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    candidate_rows = list(candidate_rows)
    if not candidate_rows:
        raise ValueError("replacement universe must be nonempty")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))

    # u = -L and replacing one row changes only that row's term, but we
    # deliberately recompute the full losses as the independent check.
    base = l2_loss_batch(thetas, X, y, w, bias=bias)
    worst = 0.0
    for r in range(X.shape[0]):
        for xp, yp, wp in candidate_rows:
            X2 = X.copy()
            y2 = y.copy()
            w2 = w.copy()
            X2[r] = xp
            y2[r] = yp
            w2[r] = wp
            alt = l2_loss_batch(thetas, X2, y2, w2, bias=bias)
            worst = max(worst, float(np.max(np.abs(base - alt))))
    return worst


@dataclass
class QuadraticExpMTarget:
    """Analytic fixture: utility u = -||theta - center||^2, making the ExpM
    density the Gaussian N(center, (s / eps) I)."""

    center: np.ndarray
    epsilon: float = 2.0
    s: float = 1.0
    data_batch = None
    n_rows = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.epsilon <= 0.0 or self.s <= 0.0:
            raise ValueError("epsilon and s must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def log_unnorm(self, thetas, rows=None):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        u = -np.sum((thetas - self.center) ** 2, axis=1)
        return (self.epsilon / (2.0 * self.s)) * u

    def log_unnorm_grad(self, thetas, rows=None):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return (self.epsilon / (2.0 * self.s)) * (-2.0) * (thetas - self.center)

    def config_dict(self) -> dict:
        return {
            "kind": "quadratic",
            "center": self.center.tolist(),
            "epsilon": self.epsilon,
            "sensitivity": self.s,
        }
