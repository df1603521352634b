"""Stratified cluster sampling adjustment for survey-drawn target samples.

Target datasets drawn by complex surveys carry per-record stratum, cluster
and weight columns. The weighted mean uses the ratio form sum(w y)/sum(w);
its variance comes from the standard with-replacement between-cluster
linearization within strata. The transportation estimator then combines the
simple source average with the survey-weighted target average.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import CombinedSample, EffectEstimate, EstimandSpec, _freeze
from .errors import DataError
from .estimators import influence_values
from .nuisance import NuisanceFit


class SingleClusterWarning(UserWarning):
    """A stratum with one sampled cluster cannot contribute to the variance."""


@dataclass(frozen=True)
class SurveyDesign:
    stratum: np.ndarray
    cluster: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.stratum)
        c = np.asarray(self.cluster)
        w = np.asarray(self.weight, dtype=float)
        if not (len(s) == len(c) == len(w)):
            raise ValueError("stratum, cluster and weight must have equal length")
        if len(w) == 0:
            raise DataError("survey design has no records")
        if not (w > 0).all():
            raise DataError("survey weights must all be positive")
        object.__setattr__(self, "stratum", _freeze(s))
        object.__setattr__(self, "cluster", _freeze(c))
        object.__setattr__(self, "weight", _freeze(w))

    @property
    def n(self) -> int:
        return len(self.weight)

    @classmethod
    def from_sample(cls, sample: CombinedSample) -> "SurveyDesign":
        if not sample.has_survey:
            raise DataError("sample has no survey columns (stratum, cluster, weight)")
        return cls(sample.target_stratum, sample.target_cluster, sample.target_weight)


def weighted_mean_variance(design: SurveyDesign, values) -> tuple:
    """Survey-weighted mean of ``values`` and the variance of that mean.

    Mean: sum(w y) / sum(w). Variance: the ratio linearization
    [Var(Yhat) + mean^2 Var(Nhat) - 2 mean Cov(Yhat, Nhat)] / Nhat^2 with
    the three pieces estimated by the with-replacement between-cluster
    formula a_h/(a_h - 1) * sum_clusters (total - stratum mean)^2 within
    each stratum. Strata with a single cluster contribute zero with a
    warning; the mean is unaffected.
    """
    y = np.asarray(values, dtype=float).reshape(-1)
    if y.shape[0] != design.n:
        raise ValueError("values must align with the survey design")
    w = design.weight
    y_hat = float(np.sum(w * y))
    n_hat = float(np.sum(w))
    mean = y_hat / n_hat

    var_y = var_n = cov_yn = 0.0
    flagged = []
    for h in np.unique(design.stratum):
        in_h = design.stratum == h
        clusters = np.unique(design.cluster[in_h])
        a_h = len(clusters)
        if a_h < 2:
            flagged.append(h.item() if hasattr(h, "item") else h)
            continue
        t = np.array([np.sum(w[in_h & (design.cluster == c)] * y[in_h & (design.cluster == c)])
                      for c in clusters])
        u = np.array([np.sum(w[in_h & (design.cluster == c)]) for c in clusters])
        factor = a_h / (a_h - 1.0)
        var_y += factor * np.sum((t - t.mean()) ** 2)
        var_n += factor * np.sum((u - u.mean()) ** 2)
        cov_yn += factor * np.sum((t - t.mean()) * (u - u.mean()))
    if flagged:
        warnings.warn(
            f"strata {flagged} have a single cluster; their variance contribution "
            "is unavailable and set to 0", SingleClusterWarning, stacklevel=2)
    variance = (var_y + mean ** 2 * var_n - 2.0 * mean * cov_yn) / n_hat ** 2
    return mean, max(float(variance), 0.0)


def combined_transport_estimate(source_values, survey_result, n1: int, n2: int,
                                spec: Optional[EstimandSpec] = None) -> EffectEstimate:
    """Combine the source average with the survey-weighted target average.

    ``source_values`` are the normalized per-source-record influence values;
    ``survey_result`` is the (mean, variance-of-mean) pair from
    :func:`weighted_mean_variance` on the normalized target values. The
    combined point is the n1/n, n2/n convex combination and the variance is
    (n1^2 var1 + n2^2 var2) / n^2.
    """
    if n1 < 1 or n2 < 1:
        raise DataError("combined estimator needs records in both populations")
    src = np.asarray(source_values, dtype=float).reshape(-1)
    if src.shape[0] != n1:
        raise ValueError("source_values must have length n1")
    theta_src = src.mean()
    var_src = float(np.var(src, ddof=1)) / n1 if n1 > 1 else 0.0
    theta_svy, var_svy = survey_result
    n = n1 + n2
    point = (n1 * theta_src + n2 * theta_svy) / n
    variance = (n1 ** 2 * var_src + n2 ** 2 * var_svy) / n ** 2
    spec = spec or EstimandSpec("transportation", "contrast")
    return EffectEstimate.from_point_se(point, np.sqrt(variance), n, spec,
                                        method="dr", survey=True)


def survey_transport_estimate(sample: CombinedSample, fit: NuisanceFit, arm,
                              design: Optional[SurveyDesign] = None) -> EffectEstimate:
    """Survey-adjusted doubly robust transportation estimate.

    Normalizes the per-record bracket values by the empirical target share,
    weights the target block by the survey design, and combines with the
    plain source average. ``arm`` may be 0, 1 or ``'contrast'``.
    """
    design = design or SurveyDesign.from_sample(sample)
    if design.n != sample.n2:
        raise ValueError("survey design must cover exactly the target records")
    if sample.n2 == 0 or sample.n1 == 0:
        raise DataError("survey transportation needs records in both populations")
    if arm == "contrast":
        vals = (influence_values(sample, fit, 1, "transportation").values
                - influence_values(sample, fit, 0, "transportation").values)
    else:
        vals = influence_values(sample, fit, arm, "transportation").values
    p0 = sample.n2 / sample.n
    normalized = vals / p0
    survey_result = weighted_mean_variance(design, normalized[sample.n1:])
    return combined_transport_estimate(
        normalized[:sample.n1], survey_result, sample.n1, sample.n2,
        spec=EstimandSpec("transportation", arm))
