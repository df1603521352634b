"""Plug-in and doubly robust effect estimators with influence-based inference.

The doubly robust estimator augments the plug-in (mean of the nested
regression) with centered inverse-probability terms so its error is a
product of nuisance errors. Standard errors come from the empirical
standard deviation of the estimated influence values; the transportation
functional divides the bracket average by the empirical target share.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import CombinedSample, EffectEstimate, EstimandSpec, _freeze
from .errors import DataError
from .nuisance import NuisanceFit


@dataclass(frozen=True)
class InfluenceValues:
    """Uncentered per-record influence contributions, source block first.

    For transportation these are the bracket terms; the recorded
    ``normalization`` (the empirical target share) is applied by the
    estimator, not here.
    """

    values: np.ndarray
    arm: int
    kind: str
    normalization: float
    n1: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if not np.isfinite(arr).all():
            raise DataError("influence values contain non-finite entries")
        object.__setattr__(self, "values", _freeze(arr))


def _check_fit(sample: CombinedSample, fit: NuisanceFit, arm: int) -> None:
    if fit.n1 != sample.n1 or fit.n2 != sample.n2:
        raise ValueError("nuisance fit does not match the sample")
    if arm not in (0, 1):
        raise ValueError(f"arm must be 0 or 1, got {arm!r}")
    if sample.n1 > 0 and not (sample.a == arm).any():
        raise DataError(f"no source record with A={arm}; refusing the degenerate arm")


def influence_values(sample: CombinedSample, fit: NuisanceFit, arm: int,
                     kind: str) -> InfluenceValues:
    """Evaluate the uncentered influence function at every record.

    Generalization, per record:
        1{A=a,S=1}(Y - mu_a)/(rho pi_a) + 1{S=1}(mu_a - tau_a)/rho + tau_a.
    Transportation (bracket of the ratio estimator):
        1{A=a,S=1}(1-rho)(Y - mu_a)/(rho pi_a)
        + 1{S=1}(1-rho)(mu_a - tau_a)/rho + 1{S=0} tau_a.
    """
    kind = EstimandSpec(kind, arm).kind
    _check_fit(sample, fit, arm)
    hit = (sample.a == arm).astype(float)
    mu = fit.outcome_src[:, arm]
    tau_s = fit.nested_src[:, arm]
    rho_s = fit.participation_src
    p_arm = fit.propensity_src[:, arm]
    resid = hit * (sample.y - mu) / (rho_s * p_arm)
    if kind == "generalization":
        src = resid + (mu - tau_s) / rho_s + tau_s
        tgt = fit.nested_tgt[:, arm]
        normalization = 1.0
    else:
        odds = (1.0 - rho_s) / rho_s
        src = (1.0 - rho_s) * resid + odds * (mu - tau_s)
        tgt = fit.nested_tgt[:, arm]
        normalization = sample.n2 / sample.n if sample.n else 0.0
    return InfluenceValues(values=np.concatenate([src, tgt]), arm=arm, kind=kind,
                           normalization=normalization, n1=sample.n1)


def _sd(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def plugin_estimate(sample: CombinedSample, fit: NuisanceFit, arm: int,
                    kind: str) -> EffectEstimate:
    """Average of the nested-regression values; the naive benchmark.

    Generalization averages over all records, transportation over the
    target records only. The reported standard error is the naive sample
    one and is flagged as such (this estimator has no tractable efficient
    standard error).
    """
    spec = EstimandSpec(kind, arm)
    _check_fit(sample, fit, arm)
    if spec.kind == "generalization":
        vals = np.concatenate([fit.nested_src[:, arm], fit.nested_tgt[:, arm]])
    else:
        if sample.n2 == 0:
            raise DataError("transportation requires at least one target record")
        vals = fit.nested_tgt[:, arm]
    se = _sd(vals) / np.sqrt(len(vals))
    return EffectEstimate.from_point_se(vals.mean(), se, len(vals), spec,
                                        method="plugin", naive=True)


def plugin_contrast(sample: CombinedSample, fit: NuisanceFit, kind: str) -> EffectEstimate:
    """Plug-in treated-minus-control contrast with a naive paired standard error."""
    spec = EstimandSpec(kind, "contrast")
    _check_fit(sample, fit, 0)
    _check_fit(sample, fit, 1)
    if spec.kind == "generalization":
        diff = np.concatenate([fit.nested_src[:, 1] - fit.nested_src[:, 0],
                               fit.nested_tgt[:, 1] - fit.nested_tgt[:, 0]])
    else:
        if sample.n2 == 0:
            raise DataError("transportation requires at least one target record")
        diff = fit.nested_tgt[:, 1] - fit.nested_tgt[:, 0]
    se = _sd(diff) / np.sqrt(len(diff))
    return EffectEstimate.from_point_se(diff.mean(), se, len(diff), spec,
                                        method="plugin", naive=True)


def dr_estimate(sample: CombinedSample, fit: NuisanceFit, arm: int,
                kind: str) -> EffectEstimate:
    """Doubly robust estimate with influence-function standard error.

    Generalization: the sample mean of the uncentered influence values.
    Transportation: bracket average divided by the empirical target share
    n2/n, with the centered influence values carrying the 1/P(S=0) factor
    and the centered target term.
    """
    spec = EstimandSpec(kind, arm)
    infl = influence_values(sample, fit, arm, spec.kind)
    n = sample.n
    if spec.kind == "generalization":
        point = infl.values.mean()
        se = _sd(infl.values) / np.sqrt(n)
    else:
        if sample.n2 == 0:
            raise DataError("transportation requires at least one target record")
        p0 = infl.normalization
        point = infl.values.mean() / p0
        is_target = np.arange(n) >= sample.n1
        centered = (infl.values - np.where(is_target, point, 0.0)) / p0
        se = _sd(centered) / np.sqrt(n)
    return EffectEstimate.from_point_se(point, se, n, spec, method="dr")


def ate_contrast(sample: CombinedSample, fit: NuisanceFit, kind: str) -> EffectEstimate:
    """Treated-minus-control contrast with paired per-record differencing.

    The standard error uses the difference of the two arms' centered
    influence values, so the covariance between arms (which share records)
    is respected.
    """
    spec = EstimandSpec(kind, "contrast")
    one = influence_values(sample, fit, 1, spec.kind)
    zero = influence_values(sample, fit, 0, spec.kind)
    diff = one.values - zero.values
    n = sample.n
    if spec.kind == "generalization":
        point = diff.mean()
        se = _sd(diff) / np.sqrt(n)
    else:
        if sample.n2 == 0:
            raise DataError("transportation requires at least one target record")
        p0 = one.normalization
        point = diff.mean() / p0
        is_target = np.arange(n) >= sample.n1
        centered = (diff - np.where(is_target, point, 0.0)) / p0
        se = _sd(centered) / np.sqrt(n)
    return EffectEstimate.from_point_se(point, se, n, spec, method="dr")


def efficiency_bound_mc(dgp, kind: str, arm: int, n_mc: int, seed: int) -> float:
    """Monte Carlo evaluation of the semiparametric variance bound.

    Draws covariates from the data-generating process and averages the
    three bound components: the inverse-weighted outcome variance, the
    inverse-weighted conditional variance of the outcome regression given
    V, and the variance of the nested regression in the relevant
    population. Selection is assumed to depend on X only through V (true
    for every DGP shipped here), so P(S=1 | X) equals the participation
    probability.
    """
    kind = EstimandSpec(kind, arm).kind
    if n_mc < 1:
        raise ValueError("n_mc must be positive")
    if n_mc < 1000:
        warnings.warn("n_mc below 1000 gives a high-Monte-Carlo-error bound",
                      UserWarning, stacklevel=2)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 31415)))
    x = dgp.draw_x(rng, n_mc)
    v = x[:, list(dgp.v_indices)]
    ones = np.ones(n_mc)
    rho = np.broadcast_to(np.asarray(dgp.participation(v), dtype=float), ones.shape)
    pi1 = np.broadcast_to(np.asarray(dgp.propensity(x), dtype=float), ones.shape)
    pi_a = pi1 if arm == 1 else 1.0 - pi1
    sigma2 = np.broadcast_to(np.asarray(dgp.outcome_sd(x, arm), dtype=float),
                             ones.shape) ** 2
    nested_var = np.broadcast_to(np.asarray(dgp.nested_var(v, arm), dtype=float),
                                 ones.shape)
    tau = np.broadcast_to(np.asarray(dgp.nested_mean(v, arm), dtype=float), ones.shape)

    if kind == "generalization":
        term1 = np.mean(sigma2 / (rho * pi_a))
        term2 = np.mean(nested_var / rho)
        term3 = np.var(tau, ddof=1)
        return float(term1 + term2 + term3)
    w = 1.0 - rho
    p0 = w.mean()
    if p0 <= 0:
        raise DataError("transportation bound undefined: P(S=0) is zero under the DGP")
    term1 = np.mean(w ** 2 * sigma2 / (rho * pi_a))
    term2 = np.mean(w ** 2 * nested_var / rho)
    tau_mean = np.sum(w * tau) / np.sum(w)
    var_tau_s0 = np.sum(w * (tau - tau_mean) ** 2) / np.sum(w)
    return float((term1 + term2 + p0 * var_tau_s0) / p0 ** 2)
