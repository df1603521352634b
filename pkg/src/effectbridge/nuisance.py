"""Cross-fitted nuisance estimation and the simulation noise-injection path.

Four nuisance functions feed every estimator: the source propensity score
P(A=a | X, S=1), the participation probability P(S=1 | V), the outcome
regression E[Y | X, A=a, S=1], and the nested regression of the outcome
regression on V in the source population. Cross-fitting trains each model
on records outside a fold and evaluates it on records inside, so no
record's prediction depends on its own fold's responses.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logit

from .data import CombinedSample, FoldAssignment, _freeze, clip_probabilities
from .errors import DataError
from .learners import LearnerSpec, fit_learner

NUISANCE_NAMES = ("pi", "rho", "mu0", "mu1", "tau0", "tau1")


def default_nuisance_specs() -> dict:
    """Logistic for the probabilities, ridge for the regressions."""
    return {
        "pi": LearnerSpec("logistic"),
        "rho": LearnerSpec("logistic"),
        "mu0": LearnerSpec("ridge", lam=1e-6),
        "mu1": LearnerSpec("ridge", lam=1e-6),
        "tau0": LearnerSpec("ridge", lam=1e-6),
        "tau1": LearnerSpec("ridge", lam=1e-6),
    }


@dataclass(frozen=True)
class NuisanceFit:
    """Per-record nuisance evaluations; columns index the treatment arm.

    ``propensity_src[:, 0]`` is defined as ``1 - propensity_src[:, 1]`` after
    the treated-arm probability has been clipped, so both arms stay inside
    [eps, 1-eps]. ``propensity_tgt``/``outcome_tgt`` are populated only when
    V = X (target covariates then determine X), which the quadratic
    estimator requires.
    """

    propensity_src: np.ndarray          # (n1, 2)
    outcome_src: np.ndarray             # (n1, 2)
    nested_src: np.ndarray              # (n1, 2)
    participation_src: np.ndarray       # (n1,)
    participation_tgt: np.ndarray       # (n2,)
    nested_tgt: np.ndarray              # (n2, 2)
    eps: float
    folds: Optional[FoldAssignment] = None
    propensity_tgt: Optional[np.ndarray] = None   # (n2, 2)
    outcome_tgt: Optional[np.ndarray] = None      # (n2, 2)

    def __post_init__(self):
        n1 = self.propensity_src.shape[0]
        n2 = self.participation_tgt.shape[0]
        shapes = {"propensity_src": (n1, 2), "outcome_src": (n1, 2),
                  "nested_src": (n1, 2), "participation_src": (n1,),
                  "participation_tgt": (n2,), "nested_tgt": (n2, 2)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _freeze(arr))
        for name in ("propensity_tgt", "outcome_tgt"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape != (n2, 2):
                    raise ValueError(f"{name} must have shape ({n2}, 2)")
                object.__setattr__(self, name, _freeze(arr))
        lo, hi = self.eps - 1e-12, 1.0 - self.eps + 1e-12
        for name in ("participation_src", "participation_tgt"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < lo or arr.max() > hi):
                raise ValueError(f"{name} has values outside [eps, 1-eps]")
        pi = self.propensity_src
        if pi.size:
            if pi.min() < lo or pi.max() > hi:
                raise ValueError("propensity values outside [eps, 1-eps]")
            if np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError("propensity arms must sum to one per record")

    @property
    def n1(self) -> int:
        return self.propensity_src.shape[0]

    @property
    def n2(self) -> int:
        return self.participation_tgt.shape[0]

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def is_v_equal_x(self) -> bool:
        return self.propensity_tgt is not None and self.outcome_tgt is not None

    def with_nested(self, arm: int, nested_src: np.ndarray,
                    nested_tgt: np.ndarray) -> "NuisanceFit":
        """Copy with one arm's nested-regression values replaced."""
        src = np.array(self.nested_src)
        tgt = np.array(self.nested_tgt)
        src[:, arm] = nested_src
        tgt[:, arm] = nested_tgt
        return replace(self, nested_src=src, nested_tgt=tgt)

    def subset(self, source_idx, target_idx) -> "NuisanceFit":
        """Row subset aligned with ``CombinedSample.subset``; drops fold metadata."""
        si = np.asarray(source_idx, dtype=int)
        ti = np.asarray(target_idx, dtype=int)
        pick = lambda arr, ix: None if arr is None else arr[ix]
        return NuisanceFit(
            propensity_src=self.propensity_src[si],
            outcome_src=self.outcome_src[si],
            nested_src=self.nested_src[si],
            participation_src=self.participation_src[si],
            participation_tgt=self.participation_tgt[ti],
            nested_tgt=self.nested_tgt[ti],
            eps=self.eps,
            folds=None,
            propensity_tgt=pick(self.propensity_tgt, ti),
            outcome_tgt=pick(self.outcome_tgt, ti))


def _paired_propensity(pi1: np.ndarray, eps: float) -> np.ndarray:
    pi1 = clip_probabilities(pi1, eps)
    return np.column_stack([1.0 - pi1, pi1])


def cross_fit_nuisances(sample: CombinedSample, specs: dict, folds: FoldAssignment,
                        eps: float, seed: int = 0,
                        tau_method: str = "nested") -> NuisanceFit:
    """Train out-of-fold models for every nuisance and evaluate them in-fold.

    ``tau_method='nested'`` regresses the fold's outcome-regression values on
    V (regression with estimated outcomes); ``'pseudo'`` regresses the
    inverse-propensity pseudo-outcome instead. When V = X the propensity and
    outcome models are additionally evaluated at the target records.
    """
    if tau_method not in ("nested", "pseudo"):
        raise ValueError(f"tau_method must be 'nested' or 'pseudo', got {tau_method!r}")
    missing = [k for k in NUISANCE_NAMES if k not in specs]
    if missing:
        raise ValueError(f"missing learner specs for {missing}")
    n1, n2 = sample.n1, sample.n2
    if folds.n != sample.n:
        raise ValueError("fold assignment does not cover the sample")
    src_fold = folds.fold_ids[:n1]
    tgt_fold = folds.fold_ids[n1:]
    v_all = np.vstack([sample.v_source, sample.v_target])
    s_label = np.concatenate([np.ones(n1), np.zeros(n2)])
    vx = sample.is_v_equal_x

    pi1_src = np.empty(n1)
    mu_src = np.empty((n1, 2))
    tau_src = np.empty((n1, 2))
    rho_src = np.empty(n1)
    rho_tgt = np.empty(n2)
    tau_tgt = np.empty((n2, 2))
    pi1_tgt = np.empty(n2) if vx else None
    mu_tgt = np.empty((n2, 2)) if vx else None

    for f in range(folds.n_folds):
        tr_s = src_fold != f
        te_s = src_fold == f
        te_t = tgt_fold == f
        tr_all = folds.fold_ids != f
        if tr_s.sum() < 2:
            raise DataError(f"fold {f}: fewer than 2 source training records")

        pi_model = fit_learner(specs["pi"], sample.x[tr_s], sample.a[tr_s],
                               is_probability=True)
        if te_s.any():
            pi1_src[te_s] = pi_model.predict(sample.x[te_s])
        if vx and te_t.any():
            pi1_tgt[te_t] = pi_model.predict(sample.v_target[te_t])

        rho_model = fit_learner(specs["rho"], v_all[tr_all], s_label[tr_all],
                                is_probability=True)
        if te_s.any():
            rho_src[te_s] = rho_model.predict(sample.v_source[te_s])
        if te_t.any():
            rho_tgt[te_t] = rho_model.predict(sample.v_target[te_t])

        pi1_train = None
        if tau_method == "pseudo":
            pi1_train = clip_probabilities(pi_model.predict(sample.x[tr_s]), eps)
        for arm in (0, 1):
            arm_mask = tr_s & (sample.a == arm)
            if arm_mask.sum() < 2:
                raise DataError(
                    f"fold {f}, arm {arm}: fewer than 2 source training records with A={arm}")
            mu_model = fit_learner(specs[f"mu{arm}"], sample.x[arm_mask],
                                   sample.y[arm_mask])
            if te_s.any():
                mu_src[te_s, arm] = mu_model.predict(sample.x[te_s])
            if vx and te_t.any():
                mu_tgt[te_t, arm] = mu_model.predict(sample.v_target[te_t])

            mu_on_train = mu_model.predict(sample.x[tr_s])
            if tau_method == "nested":
                responses = mu_on_train
            else:
                p_arm = pi1_train if arm == 1 else 1.0 - pi1_train
                hit = sample.a[tr_s] == arm
                responses = mu_on_train + np.where(
                    hit, (sample.y[tr_s] - mu_on_train) / p_arm, 0.0)
            tau_model = fit_learner(specs[f"tau{arm}"], sample.v_source[tr_s], responses)
            if te_s.any():
                tau_src[te_s, arm] = tau_model.predict(sample.v_source[te_s])
            if te_t.any():
                tau_tgt[te_t, arm] = tau_model.predict(sample.v_target[te_t])

    return NuisanceFit(
        propensity_src=_paired_propensity(pi1_src, eps),
        outcome_src=mu_src,
        nested_src=tau_src,
        participation_src=clip_probabilities(rho_src, eps),
        participation_tgt=clip_probabilities(rho_tgt, eps),
        nested_tgt=tau_tgt,
        eps=eps,
        folds=folds,
        propensity_tgt=_paired_propensity(pi1_tgt, eps) if vx else None,
        outcome_tgt=mu_tgt if vx else None)


def pseudo_outcome_tau(sample: CombinedSample, fit: NuisanceFit, spec: LearnerSpec,
                       folds: FoldAssignment, arm: int):
    """Nested regression via the inverse-propensity pseudo-outcome.

    Builds g_i = 1{A_i=a} (Y_i - mu_a(X_i)) / pi_a(X_i) + mu_a(X_i) per
    source record from the stored per-record evaluations, then regresses g
    on V within the cross-fitting scheme. Returns out-of-fold values for
    all records as ``(per-source, per-target)`` arrays.
    """
    if fit.n1 != sample.n1 or fit.n2 != sample.n2:
        raise ValueError("fit does not match the sample")
    if folds.n != sample.n:
        raise ValueError("fold assignment does not cover the sample")
    mu = fit.outcome_src[:, arm]
    p_arm = fit.propensity_src[:, arm]
    hit = sample.a == arm
    g = mu + np.where(hit, (sample.y - mu) / p_arm, 0.0)

    src_fold = folds.fold_ids[:sample.n1]
    tgt_fold = folds.fold_ids[sample.n1:]
    tau_src = np.empty(sample.n1)
    tau_tgt = np.empty(sample.n2)
    for f in range(folds.n_folds):
        tr = src_fold != f
        if tr.sum() < 2:
            raise DataError(f"fold {f}: fewer than 2 source training records")
        model = fit_learner(spec, sample.v_source[tr], g[tr])
        te_s = src_fold == f
        te_t = tgt_fold == f
        if te_s.any():
            tau_src[te_s] = model.predict(sample.v_source[te_s])
        if te_t.any():
            tau_tgt[te_t] = model.predict(sample.v_target[te_t])
    return tau_src, tau_tgt


def fit_from_functions(sample: CombinedSample, outcome_mean: Callable,
                       propensity: Callable, participation: Callable,
                       nested_mean: Optional[Callable] = None,
                       eps: float = 0.01) -> NuisanceFit:
    """Evaluate analytic nuisance functions at every record.

    ``outcome_mean(x_rows, arm)`` and ``propensity(x_rows)`` (treated-arm
    probability) are evaluated on source covariates, ``participation(v_rows)``
    and ``nested_mean(v_rows, arm)`` everywhere. ``nested_mean`` defaults to
    ``outcome_mean`` when V = X. Used for oracle and deliberately-wrong
    nuisances in simulations; such fits bypass cross-fitting by design.
    """
    if nested_mean is None:
        if not sample.is_v_equal_x:
            raise ValueError("nested_mean is required when V is a strict subset of X")
        nested_mean = outcome_mean
    ones1 = np.ones(sample.n1)
    ones2 = np.ones(sample.n2)
    ev = lambda f, rows, arm, ones: np.broadcast_to(
        np.asarray(f(rows, arm), dtype=float), ones.shape).astype(float)
    evp = lambda f, rows, ones: np.broadcast_to(
        np.asarray(f(rows), dtype=float), ones.shape).astype(float)

    mu_src = np.column_stack([ev(outcome_mean, sample.x, a, ones1) for a in (0, 1)])
    tau_src = np.column_stack([ev(nested_mean, sample.v_source, a, ones1) for a in (0, 1)])
    tau_tgt = np.column_stack([ev(nested_mean, sample.v_target, a, ones2) for a in (0, 1)])
    vx = sample.is_v_equal_x
    return NuisanceFit(
        propensity_src=_paired_propensity(evp(propensity, sample.x, ones1), eps),
        outcome_src=mu_src,
        nested_src=tau_src,
        participation_src=clip_probabilities(evp(participation, sample.v_source, ones1), eps),
        participation_tgt=clip_probabilities(evp(participation, sample.v_target, ones2), eps),
        nested_tgt=tau_tgt,
        eps=eps,
        propensity_tgt=_paired_propensity(evp(propensity, sample.v_target, ones2), eps)
        if vx else None,
        outcome_tgt=np.column_stack([ev(outcome_mean, sample.v_target, a, ones2)
                                     for a in (0, 1)]) if vx else None)


def oracle_noisy_nuisances(sample: CombinedSample, dgp, alpha: float, seed: int,
                           eps: float = 0.01, zero_noise: bool = False) -> NuisanceFit:
    """True nuisances perturbed by Normal(n^-alpha, n^-2alpha) noise.

    One independent draw per record per nuisance; regressions receive
    additive noise, probabilities receive noise on the log-odds scale. With
    ``zero_noise=True`` the true nuisance values are returned unchanged
    (up to the positivity clip).
    """
    if not 0.0 < alpha <= 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5], got {alpha}")
    n = sample.n
    scale = float(n) ** (-alpha)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 2718, n)))
    noise = (lambda size: np.zeros(size)) if zero_noise else (
        lambda size: rng.normal(scale, scale, size))

    mu_src = np.column_stack([
        np.asarray(dgp.outcome_mean(sample.x, a), dtype=float) + noise(sample.n1)
        for a in (0, 1)])
    tau_src = np.column_stack([
        np.asarray(dgp.nested_mean(sample.v_source, a), dtype=float) + noise(sample.n1)
        for a in (0, 1)])
    tau_tgt = np.column_stack([
        np.asarray(dgp.nested_mean(sample.v_target, a), dtype=float) + noise(sample.n2)
        for a in (0, 1)])
    rho_src = expit(logit(np.asarray(dgp.participation(sample.v_source), dtype=float))
                    + noise(sample.n1))
    rho_tgt = expit(logit(np.asarray(dgp.participation(sample.v_target), dtype=float))
                    + noise(sample.n2))
    pi1_src = expit(logit(np.asarray(dgp.propensity(sample.x), dtype=float))
                    + noise(sample.n1))

    vx = sample.is_v_equal_x
    pi1_tgt = mu_tgt = None
    if vx:
        pi1_tgt = expit(logit(np.asarray(dgp.propensity(sample.v_target), dtype=float))
                        + noise(sample.n2))
        mu_tgt = np.column_stack([
            np.asarray(dgp.outcome_mean(sample.v_target, a), dtype=float) + noise(sample.n2)
            for a in (0, 1)])

    return NuisanceFit(
        propensity_src=_paired_propensity(pi1_src, eps),
        outcome_src=mu_src,
        nested_src=tau_src,
        participation_src=clip_probabilities(rho_src, eps),
        participation_tgt=clip_probabilities(rho_tgt, eps),
        nested_tgt=tau_tgt,
        eps=eps,
        propensity_tgt=_paired_propensity(pi1_tgt, eps) if vx else None,
        outcome_tgt=mu_tgt)
