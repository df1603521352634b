"""Small deterministic learners used for nuisance regressions.

Four families: logistic regression fit by iteratively reweighted least
squares, ridge-penalized linear regression, k-nearest-neighbor means on
standardized features, and the constant (pooled mean) learner. They are
intentionally minimal; all are pure functions of their training data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, DataError, NumericalError

FAMILIES = ("logistic", "ridge", "knn", "constant")


@dataclass(frozen=True)
class LearnerSpec:
    family: str
    lam: float = 1e-6      # ridge penalty (ridge family)
    k_nn: int = 5          # neighbor count (knn family)
    max_iter: int = 100    # IRLS iteration cap (logistic family)
    tol: float = 1e-8      # IRLS gradient sup-norm tolerance

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown learner family {self.family!r}; choose from {FAMILIES}")
        if self.lam < 0:
            raise ValueError("ridge penalty must be nonnegative")
        if self.k_nn < 1:
            raise ValueError("neighbor count must be at least 1")
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")


def _design(features: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(features.shape[0]), features])


class ConstantModel:
    def __init__(self, value: float, clamp01: bool):
        self.value = float(value)
        self.clamp01 = clamp01

    def predict(self, features) -> np.ndarray:
        out = np.full(np.atleast_2d(features).shape[0], self.value)
        return np.clip(out, 0.0, 1.0) if self.clamp01 else out


class RidgeModel:
    """Linear model solving (G'G + lam*I) beta = G'y on the intercept-augmented design."""

    def __init__(self, coef: np.ndarray, clamp01: bool):
        self.coef = coef
        self.clamp01 = clamp01

    def predict(self, features) -> np.ndarray:
        out = _design(np.atleast_2d(np.asarray(features, dtype=float))) @ self.coef
        return np.clip(out, 0.0, 1.0) if self.clamp01 else out


class LogisticModel:
    def __init__(self, coef: np.ndarray):
        self.coef = coef
        self.clamp01 = False

    def predict(self, features) -> np.ndarray:
        return expit(_design(np.atleast_2d(np.asarray(features, dtype=float))) @ self.coef)


class KnnModel:
    """Neighbor mean on features standardized by the training mean/sd."""

    def __init__(self, train: np.ndarray, responses: np.ndarray, k: int, clamp01: bool):
        self.mean = train.mean(axis=0)
        sd = train.std(axis=0)
        self.sd = np.where(sd > 0, sd, 1.0)
        self.train = (train - self.mean) / self.sd
        self.responses = responses
        self.k = min(k, train.shape[0])
        self.clamp01 = clamp01

    def predict(self, features) -> np.ndarray:
        q = (np.atleast_2d(np.asarray(features, dtype=float)) - self.mean) / self.sd
        d2 = ((q[:, None, :] - self.train[None, :, :]) ** 2).sum(axis=2)
        if self.k < self.train.shape[0]:
            nearest = np.argpartition(d2, self.k - 1, axis=1)[:, :self.k]
        else:
            nearest = np.broadcast_to(np.arange(self.train.shape[0]), (q.shape[0], self.k))
        out = self.responses[nearest].mean(axis=1)
        return np.clip(out, 0.0, 1.0) if self.clamp01 else out


def _log_likelihood(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _fit_logistic_irls(features: np.ndarray, y: np.ndarray, spec: LearnerSpec) -> np.ndarray:
    g = _design(features)
    beta = np.zeros(g.shape[1])
    eta = g @ beta
    ll = _log_likelihood(eta, y)
    for _ in range(spec.max_iter):
        p = expit(eta)
        grad = g.T @ (y - p)
        if np.max(np.abs(grad)) <= spec.tol:
            return beta
        w = p * (1.0 - p)
        hess = g.T @ (w[:, None] * g)
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(hess, grad, rcond=None)[0]
        step = 1.0
        for _ in range(30):  # step-halving on likelihood decrease
            cand = beta + step * delta
            eta_cand = g @ cand
            ll_cand = _log_likelihood(eta_cand, y)
            if ll_cand >= ll - 1e-12:
                beta, eta, ll = cand, eta_cand, ll_cand
                break
            step *= 0.5
        else:
            break
    grad = g.T @ (y - expit(g @ beta))
    if np.max(np.abs(grad)) <= spec.tol:
        return beta
    raise ConvergenceError(
        f"IRLS did not reach gradient sup-norm {spec.tol} within {spec.max_iter} iterations "
        f"(final sup-norm {np.max(np.abs(grad)):.3e})", last_iterate=beta)


def _fit_ridge(features: np.ndarray, y: np.ndarray, spec: LearnerSpec) -> np.ndarray:
    g = _design(features)
    gram = g.T @ g + spec.lam * np.eye(g.shape[1])
    rhs = g.T @ y
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        if spec.lam == 0.0:
            raise NumericalError(
                "normal equations are singular with lam=0; supply a positive ridge penalty")
        raise NumericalError("ridge normal equations could not be solved")
    if not np.isfinite(coef).all():
        raise NumericalError("ridge solve produced non-finite coefficients")
    return coef


def fit_learner(spec: LearnerSpec, features, responses, is_probability: bool = False):
    """Train one learner; returns a model exposing ``predict(rows) -> values``.

    ``is_probability`` clamps non-logistic predictions into [0, 1] (the
    positivity clip to [eps, 1-eps] is applied later by the cross-fitter).
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(responses, dtype=float).reshape(-1)
    if features.shape[0] != y.shape[0]:
        raise DataError("features and responses must have equal length")
    if features.shape[0] < 2:
        raise DataError(f"need at least 2 training rows, got {features.shape[0]}")
    if spec.family == "logistic":
        if not np.isin(y, (0.0, 1.0)).all():
            raise DataError("logistic learner requires responses in {0, 1}")
        return LogisticModel(_fit_logistic_irls(features, y, spec))
    if spec.family == "ridge":
        return RidgeModel(_fit_ridge(features, y, spec), clamp01=is_probability)
    if spec.family == "knn":
        return KnnModel(features, y, spec.k_nn, clamp01=is_probability)
    return ConstantModel(y.mean(), clamp01=is_probability)
