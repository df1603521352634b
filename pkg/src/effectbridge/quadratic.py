"""Second-order (quadratic) estimators for the shared-covariate case V = X.

The quadratic estimator adds a U-statistic correction to the first-order
influence average. The correction kernel projects the inverse-weight error
onto the span of a k-dimensional basis through the inverse of a Gram matrix
estimated under the weight rho * pi_a, shrinking the residual bias to a
basis-approximation term plus a third-order product. Three disjoint folds
keep nuisance training, Gram estimation, and the final averages independent.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import CombinedSample, EffectEstimate, EstimandSpec, _freeze, split_folds
from .errors import ConfigError, DataError, ProtocolError
from .learners import fit_learner
from .nuisance import NuisanceFit, fit_from_functions, _paired_propensity
from .data import clip_probabilities

BASIS_KINDS = ("histogram", "cosine")


def sample_global_ids(sample: CombinedSample) -> np.ndarray:
    src = sample.source_ids if sample.source_ids is not None else np.arange(sample.n1)
    tgt = sample.target_ids if sample.target_ids is not None else sample.n1 + np.arange(sample.n2)
    return np.concatenate([src, tgt])


def stacked_x(sample: CombinedSample) -> np.ndarray:
    """All covariate rows, source block first; valid only when V = X."""
    if not sample.is_v_equal_x:
        raise ConfigError(
            "the quadratic machinery supports only V = X; nested-covariate "
            "second-order estimation is an open problem")
    return np.vstack([sample.x, sample.v_target])


@dataclass(frozen=True)
class BasisSpec:
    kind: str
    k: int
    d: int

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ConfigError(f"basis kind must be one of {BASIS_KINDS}, got {self.kind!r}")
        if self.k < 1 or self.d < 1:
            raise ConfigError("basis dimension k and covariate dimension d must be >= 1")
        if self.kind == "histogram":
            m = round(self.k ** (1.0 / self.d))
            if m ** self.d != self.k:
                raise ConfigError(
                    f"histogram basis needs k = m^d for integer m; got k={self.k}, d={self.d}")
            object.__setattr__(self, "cells_per_axis", m)


class EcdfTransform:
    """Per-coordinate empirical-CDF map onto (0, 1] learned from training rows."""

    def __init__(self, train_x: np.ndarray):
        self.sorted_cols = np.sort(np.asarray(train_x, dtype=float), axis=0)
        self.n = train_x.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for j in range(x.shape[1]):
            out[:, j] = np.searchsorted(self.sorted_cols[:, j], x[:, j],
                                        side="right") / self.n
        return out


class HistogramBasis:
    """One-hot indicators of an equal-mass tensor-product partition."""

    def __init__(self, spec: BasisSpec, transform: EcdfTransform,
                 record_ids: Optional[np.ndarray]):
        self.spec = spec
        self.k = spec.k
        self.transform = transform
        self.record_ids = record_ids

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        t = self.transform(x)
        m = self.spec.cells_per_axis
        bins = np.clip(np.ceil(t * m).astype(int) - 1, 0, m - 1)
        cell = np.zeros(t.shape[0], dtype=int)
        for j in range(self.spec.d):
            cell = cell * m + bins[:, j]
        out = np.zeros((t.shape[0], self.k))
        out[np.arange(t.shape[0]), cell] = 1.0
        return out


class CosineBasis:
    """Tensor products of {1, sqrt(2) cos(pi j t)} in total-degree order."""

    def __init__(self, spec: BasisSpec, transform: EcdfTransform,
                 record_ids: Optional[np.ndarray]):
        self.spec = spec
        self.k = spec.k
        self.transform = transform
        self.record_ids = record_ids
        self.indices = self._total_degree_indices(spec.k, spec.d)

    @staticmethod
    def _total_degree_indices(k: int, d: int) -> np.ndarray:
        out = []
        degree = 0
        while len(out) < k:
            layer = [idx for idx in itertools.product(range(degree + 1), repeat=d)
                     if sum(idx) == degree]
            out.extend(sorted(layer))
            degree += 1
        return np.asarray(out[:k], dtype=int)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        t = self.transform(x)
        out = np.ones((t.shape[0], self.k))
        for col, idx in enumerate(self.indices):
            for j, freq in enumerate(idx):
                if freq > 0:
                    out[:, col] *= np.sqrt(2.0) * np.cos(np.pi * freq * t[:, j])
        return out


def build_basis(spec: BasisSpec, train: CombinedSample):
    """Basis evaluator with the coordinate transform learned from ``train``."""
    x = stacked_x(train)
    if x.shape[0] == 0:
        raise DataError("cannot build a basis from an empty training sample")
    if spec.d != x.shape[1]:
        raise ConfigError(f"basis d={spec.d} does not match covariate dimension {x.shape[1]}")
    if spec.kind == "histogram" and spec.k > x.shape[0]:
        raise ValueError(
            f"histogram basis with k={spec.k} cells exceeds n_train={x.shape[0]}; "
            "empty cells are guaranteed")
    transform = EcdfTransform(x)
    ids = sample_global_ids(train)
    cls = HistogramBasis if spec.kind == "histogram" else CosineBasis
    return cls(spec, transform, ids)


@dataclass(frozen=True)
class GramMatrix:
    """Weighted second-moment matrix of the basis with a ridge-regularized inverse."""

    omega: np.ndarray
    lam: float
    record_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if not np.isfinite(omega).all():
            raise DataError("Gram matrix has non-finite entries")
        if np.max(np.abs(omega - omega.T)) > 1e-12:
            raise ValueError("Gram matrix must be symmetric")
        omega = 0.5 * (omega + omega.T)
        object.__setattr__(self, "omega", _freeze(omega))
        regularized = omega + self.lam * np.eye(omega.shape[0])
        try:
            factor = cho_factor(regularized)
        except np.linalg.LinAlgError as exc:
            raise DataError("regularized Gram matrix is not positive definite") from exc
        object.__setattr__(self, "_factor", factor)
        if self.record_ids is not None:
            object.__setattr__(self, "record_ids", _freeze(np.asarray(self.record_ids)))

    @property
    def k(self) -> int:
        return self.omega.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._factor, rhs)

    def quad_diag(self, basis_values: np.ndarray) -> np.ndarray:
        """Per-row quadratic forms b_i' (Omega + lam I)^-1 b_i."""
        return np.einsum("ij,ji->i", basis_values, self.solve(basis_values.T))


def default_gram_ridge(omega: np.ndarray) -> float:
    k = omega.shape[0]
    return 1e-8 * float(np.trace(omega)) / k


def estimate_gram(basis, fit: NuisanceFit, train: CombinedSample, kind: str, arm: int,
                  lambda_omega: Optional[float] = None) -> GramMatrix:
    """Empirical Gram matrix (1/n) sum_i b(x_i) b(x_i)' rho_i pi_a,i.

    The same participation-times-propensity weight serves both the
    generalization and transportation functionals, so ``kind`` only tags the
    call. Requires a V = X fit so the weight exists at target records.
    """
    EstimandSpec(kind, arm)
    if not fit.is_v_equal_x:
        raise ConfigError("Gram estimation needs a V = X nuisance fit "
                          "(propensity and outcome values at target records)")
    if fit.n1 != train.n1 or fit.n2 != train.n2:
        raise ValueError("nuisance fit does not match the training sample")
    x = stacked_x(train)
    weight = np.concatenate([
        fit.participation_src * fit.propensity_src[:, arm],
        fit.participation_tgt * fit.propensity_tgt[:, arm]])
    b = basis.evaluate(x)
    omega = (b * weight[:, None]).T @ b / x.shape[0]
    if not np.isfinite(omega).all():
        raise DataError("Gram accumulation produced non-finite entries")
    omega = 0.5 * (omega + omega.T)
    lam = default_gram_ridge(omega) if lambda_omega is None else float(lambda_omega)
    return GramMatrix(omega=omega, lam=lam, record_ids=sample_global_ids(train))


def select_basis_dim(n: int, d: int, smoothness: Optional[tuple] = None) -> int:
    """Rate-balancing basis dimension n^(2d / (d + 2(a + b))); sqrt(n) fallback.

    Without a smoothness pair the square-root heuristic is used and flagged
    with a warning since no rate argument backs it.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if smoothness is None:
        warnings.warn("no smoothness supplied; using the heuristic k = round(sqrt(n))",
                      UserWarning, stacklevel=2)
        return max(1, round(n ** 0.5))
    a, b = smoothness
    if a <= 0 or b <= 0:
        raise ValueError("smoothness orders must be positive")
    return max(1, round(n ** (2.0 * d / (d + 2.0 * (a + b)))))


def u_statistic_bruteforce(kernel, n: int) -> float:
    """Exact double loop (1/(n(n-1))) sum_{i != j} kernel(i, j).

    The test oracle for the fast contraction inside the quadratic estimator.
    """
    if n < 2:
        raise ValueError("a U-statistic needs at least 2 records")
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += kernel(i, j)
    return total / (n * (n - 1))


def paired_kernel_u(left: np.ndarray, basis_values: np.ndarray, gram: GramMatrix,
                    right: np.ndarray) -> float:
    """U_n of the separable kernel left_i b_i' (Omega+lam I)^-1 b_j right_j.

    Computed as the full bilinear contraction minus the diagonal, so it
    matches the brute-force double loop to rounding error.
    """
    n = basis_values.shape[0]
    if n < 2:
        raise ValueError("a U-statistic needs at least 2 records")
    u = basis_values.T @ left
    w = basis_values.T @ right
    cross = float(u @ gram.solve(w))
    diag = float(np.sum(left * right * gram.quad_diag(basis_values)))
    return (cross - diag) / (n * (n - 1.0))


def _protocol_check(sample: CombinedSample, basis, gram: GramMatrix) -> None:
    est_ids = sample_global_ids(sample)
    for name, ids in (("basis", getattr(basis, "record_ids", None)),
                      ("gram", gram.record_ids)):
        if ids is not None and np.intersect1d(est_ids, ids).size:
            raise ProtocolError(
                f"the {name} training fold overlaps the estimation fold; "
                "the splitting protocol requires disjoint folds")


def qr_estimate(sample: CombinedSample, fit: NuisanceFit, basis, gram: GramMatrix,
                arm: int, kind: str) -> EffectEstimate:
    """Quadratic estimate: first-order average plus the U-statistic correction.

    Generalization:
        P_n[ 1{S=1,A=a}(Y - mu)/(rho pi) + mu ]
        - U_n[ 1{S1=1,A1=a}(Y1 - mu(X1)) b(X1)' Omega^-1 b(X2)
               (1{S2=1,A2=a} - rho pi(X2)) / (rho pi(X2)) ].
    Transportation estimates the rescaled functional P(S=0) * theta with
    kernel weight (1{S2=0} rho pi(X2) - (1-rho(X2)) 1{A2=a,S2=1}) /
    (rho pi(X2)) and divides by the empirical target share at the end.

    The reported standard error uses the first-order influence values only;
    the k/n^2 variance component of the correction is not included.
    """
    spec = EstimandSpec(kind, arm)
    if not sample.is_v_equal_x:
        raise ConfigError(
            "the quadratic estimator supports only V = X; nested-covariate "
            "second-order estimation is an open problem")
    if not fit.is_v_equal_x:
        raise ConfigError("quadratic estimation needs a V = X nuisance fit")
    if fit.n1 != sample.n1 or fit.n2 != sample.n2:
        raise ValueError("nuisance fit does not match the estimation sample")
    n = sample.n
    if n < 2:
        raise DataError("quadratic estimation needs at least 2 records")
    if basis.k >= n * (n - 1):
        raise ValueError(f"basis dimension k={basis.k} must be below n(n-1)={n*(n-1)}")
    _protocol_check(sample, basis, gram)

    x = stacked_x(sample)
    s1 = np.concatenate([np.ones(sample.n1), np.zeros(sample.n2)])
    hit = np.concatenate([(sample.a == arm).astype(float), np.zeros(sample.n2)])
    y = np.concatenate([sample.y, np.zeros(sample.n2)])
    mu = np.concatenate([fit.outcome_src[:, arm], fit.outcome_tgt[:, arm]])
    rho = np.concatenate([fit.participation_src, fit.participation_tgt])
    weight = rho * np.concatenate([fit.propensity_src[:, arm], fit.propensity_tgt[:, arm]])

    residual = hit * (y - mu)
    b = basis.evaluate(x)
    if spec.kind == "generalization":
        first = residual / weight + mu
        correction = -paired_kernel_u(residual, b, gram, (hit - weight) / weight)
        point = first.mean() + correction
        influence = first
    else:
        if sample.n2 == 0:
            raise DataError("transportation requires at least one target record")
        first = (1.0 - rho) * residual / weight + (1.0 - s1) * mu
        kernel_right = ((1.0 - s1) * weight - (1.0 - rho) * hit) / weight
        eta = first.mean() + paired_kernel_u(residual, b, gram, kernel_right)
        p0 = sample.n2 / n
        point = eta / p0
        influence = (first - point * (1.0 - s1)) / p0
    se = float(np.std(influence, ddof=1)) / np.sqrt(n) if n > 1 else 0.0
    return EffectEstimate.from_point_se(point, se, n, spec, method="qr")


def _fit_from_models(subset: CombinedSample, pi_model, rho_model, mu_models,
                     eps: float) -> NuisanceFit:
    x = stacked_x(subset)
    n1 = subset.n1
    pi1 = np.asarray(pi_model.predict(x), dtype=float)
    rho = clip_probabilities(np.asarray(rho_model.predict(x), dtype=float), eps)
    mu = np.column_stack([np.asarray(mu_models[a].predict(x), dtype=float) for a in (0, 1)])
    return NuisanceFit(
        propensity_src=_paired_propensity(pi1[:n1], eps),
        outcome_src=mu[:n1],
        nested_src=mu[:n1],
        participation_src=rho[:n1],
        participation_tgt=rho[n1:],
        nested_tgt=mu[n1:],
        eps=eps,
        propensity_tgt=_paired_propensity(pi1[n1:], eps),
        outcome_tgt=mu[n1:])


def quadratic_pipeline(sample: CombinedSample, arm: int, kind: str, *,
                       eps: float = 0.01, seed: int = 0, k: Optional[int] = None,
                       basis_kind: str = "cosine",
                       smoothness: Optional[tuple] = None,
                       lambda_omega: Optional[float] = None,
                       nuisance_functions: Optional[dict] = None,
                       learner_specs: Optional[dict] = None,
                       prebuilt_fit: Optional[NuisanceFit] = None) -> EffectEstimate:
    """Split-protocol driver around :func:`qr_estimate`.

    With learners, three folds: one trains the nuisance models, one carries
    the basis and Gram matrix, one is averaged over. Analytic nuisance
    functions or a prebuilt per-record fit (oracle or simulation noise
    paths, which are data independent) need no training fold, so two folds
    suffice.
    """
    supplied = sum(arg is not None for arg in
                   (nuisance_functions, learner_specs, prebuilt_fit))
    if supplied != 1:
        raise ConfigError(
            "supply exactly one of nuisance_functions, learner_specs or prebuilt_fit")
    if not sample.is_v_equal_x:
        raise ConfigError(
            "the quadratic estimator supports only V = X; nested-covariate "
            "second-order estimation is an open problem")
    n_folds = 3 if learner_specs is not None else 2
    folds = split_folds(sample.n, n_folds, seed)
    src_fold = folds.fold_ids[:sample.n1]
    tgt_fold = folds.fold_ids[sample.n1:]
    part_idx = [(np.flatnonzero(src_fold == f), np.flatnonzero(tgt_fold == f))
                for f in range(n_folds)]
    parts = [sample.subset(si, ti) for si, ti in part_idx]

    if nuisance_functions is not None:
        gram_part, est_part = parts
        make_fit = lambda part: fit_from_functions(part, eps=eps, **nuisance_functions)
    elif prebuilt_fit is not None:
        if prebuilt_fit.n1 != sample.n1 or prebuilt_fit.n2 != sample.n2:
            raise ValueError("prebuilt_fit does not match the sample")
        gram_part, est_part = parts
        by_part = {id(p): prebuilt_fit.subset(si, ti)
                   for p, (si, ti) in zip(parts, part_idx)}
        make_fit = lambda part: by_part[id(part)]
    else:
        train_part, gram_part, est_part = parts
        if train_part.n1 < 2:
            raise DataError("nuisance training fold has fewer than 2 source records")
        pi_model = fit_learner(learner_specs["pi"], train_part.x, train_part.a,
                               is_probability=True)
        rho_model = fit_learner(learner_specs["rho"], stacked_x(train_part),
                                np.concatenate([np.ones(train_part.n1),
                                                np.zeros(train_part.n2)]),
                                is_probability=True)
        mu_models = {}
        for a in (0, 1):
            mask = train_part.a == a
            if mask.sum() < 2:
                raise DataError(f"nuisance training fold, arm {a}: fewer than 2 records")
            mu_models[a] = fit_learner(learner_specs[f"mu{a}"], train_part.x[mask],
                                       train_part.y[mask])
        make_fit = lambda part: _fit_from_models(part, pi_model, rho_model, mu_models, eps)

    if k is None:
        k = select_basis_dim(sample.n, sample.d, smoothness)
    spec = BasisSpec(kind=basis_kind, k=k, d=sample.d)
    basis = build_basis(spec, gram_part)
    gram = estimate_gram(basis, make_fit(gram_part), gram_part, kind, arm, lambda_omega)
    return qr_estimate(est_part, make_fit(est_part), basis, gram, arm, kind)
