"""Interval bounds under relaxed exchangeability and transportability.

Two nonnegative sensitivity parameters bound the assumption violations:
``delta1`` caps the treated/control difference in conditional potential
outcomes within the source (exchangeability slack) and ``delta2`` caps the
source/target difference in conditional potential-outcome means given V
(transportability slack). The identified point sits at the interval center;
widths are exactly linear in the deltas, so break-even values have closed
forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import CombinedSample, EstimandSpec, split_folds
from .errors import DataError
from .estimators import ate_contrast, dr_estimate
from .learners import LearnerSpec, fit_learner
from .nuisance import NuisanceFit

CURVE_GRID = 101


@dataclass(frozen=True)
class SensitivityBound:
    delta1: float
    delta2: float
    lower: float
    upper: float
    spec: EstimandSpec
    center: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower bound exceeds upper bound")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {"delta1": self.delta1, "delta2": self.delta2,
                "lower": self.lower, "upper": self.upper,
                "center": self.center, "kind": self.spec.kind, "arm": self.spec.arm}


def _half_width(delta1: float, delta2: float, spec: EstimandSpec,
                p_s0: Optional[float], offarm_mean: Optional[float]) -> float:
    if delta1 < 0 or delta2 < 0:
        raise ValueError("sensitivity deltas must be nonnegative")
    ge = spec.kind == "generalization"
    if ge and p_s0 is None:
        raise ValueError("generalization bounds need the target share P(S=0)")
    if spec.arm == "contrast":
        # off-arm probabilities over the two arms sum to one
        return delta1 + 2.0 * delta2 * (p_s0 if ge else 1.0)
    if offarm_mean is None:
        raise ValueError("single-arm bounds need the mean off-arm treatment probability")
    return delta1 * offarm_mean + delta2 * (p_s0 if ge else 1.0)


def interval_from_point(point: float, delta1: float, delta2: float,
                        spec: EstimandSpec, p_s0: Optional[float] = None,
                        offarm_mean: Optional[float] = None) -> SensitivityBound:
    """Bound interval centered at an already-computed point estimate."""
    if not math.isfinite(point):
        raise ValueError("point estimate must be finite")
    half = _half_width(delta1, delta2, spec, p_s0, offarm_mean)
    return SensitivityBound(delta1=float(delta1), delta2=float(delta2),
                            lower=point - half, upper=point + half,
                            spec=spec, center=float(point))


def offarm_probability(sample: CombinedSample, arm: int, spec: LearnerSpec,
                       folds) -> tuple:
    """Cross-fitted regression of 1{A = 1-a} on V among source records.

    Returns out-of-fold evaluations ``(per-source, per-target)``, the
    estimated P(A = 1-a | V, S=1) needed by the single-arm bounds.
    """
    label = (sample.a == 1 - arm).astype(float)
    src_fold = folds.fold_ids[:sample.n1]
    tgt_fold = folds.fold_ids[sample.n1:]
    out_src = np.empty(sample.n1)
    out_tgt = np.empty(sample.n2)
    for f in range(folds.n_folds):
        tr = src_fold != f
        if tr.sum() < 2:
            raise DataError(f"fold {f}: fewer than 2 source records to fit the off-arm model")
        model = fit_learner(spec, sample.v_source[tr], label[tr], is_probability=True)
        te_s, te_t = src_fold == f, tgt_fold == f
        if te_s.any():
            out_src[te_s] = model.predict(sample.v_source[te_s])
        if te_t.any():
            out_tgt[te_t] = model.predict(sample.v_target[te_t])
    return out_src, out_tgt


def sensitivity_interval(sample: CombinedSample, fit: NuisanceFit, delta1: float,
                         delta2: float, spec: EstimandSpec,
                         offarm_spec: Optional[LearnerSpec] = None,
                         seed: int = 0) -> SensitivityBound:
    """Bound interval around the doubly robust point estimate.

    Contrasts need no extra nuisance (half-width delta1 + 2 delta2, scaled
    by the target share for generalization). Single-arm bounds estimate the
    mean off-arm treatment probability by a dedicated cross-fitted
    regression averaged over the relevant population.
    """
    if delta1 < 0 or delta2 < 0:
        raise ValueError("sensitivity deltas must be nonnegative")
    p_s0 = sample.n2 / sample.n if sample.n else 0.0
    if spec.arm == "contrast":
        center = ate_contrast(sample, fit, spec.kind).point
        offarm_mean = None
    else:
        center = dr_estimate(sample, fit, spec.arm, spec.kind).point
        folds = fit.folds
        if folds is None or folds.n != sample.n:
            folds = split_folds(sample.n, min(5, max(2, sample.n)), seed)
        q_src, q_tgt = offarm_probability(
            sample, spec.arm, offarm_spec or LearnerSpec("logistic"), folds)
        if spec.kind == "generalization":
            offarm_mean = float(np.concatenate([q_src, q_tgt]).mean())
        else:
            if sample.n2 == 0:
                raise DataError("transportation bounds need target records")
            offarm_mean = float(q_tgt.mean())
    return interval_from_point(center, delta1, delta2, spec,
                               p_s0=p_s0, offarm_mean=offarm_mean)


def breakeven_deltas(point: float, mode: str, kind: str = "transportation",
                     p_s0: Optional[float] = None):
    """Sensitivity magnitudes at which the interval first touches zero.

    For the transportation contrast the interval is point -+ (delta1 +
    2 delta2), so the sign flips at delta1 = |point| (delta2 = 0) and at
    delta2 = |point| / 2 (delta1 = 0); generalization scales the delta2
    term by the target share. ``mode='curve'`` samples the break-even line
    delta1 + 2 delta2 (x share) = |point| on a fixed grid and returns rows
    of (delta1, delta2, lower, upper).
    """
    if not math.isfinite(point):
        raise ValueError("point must be finite")
    spec = EstimandSpec(kind, "contrast")
    ge = spec.kind == "generalization"
    if ge:
        if p_s0 is None or not 0.0 < p_s0 <= 1.0:
            raise ValueError("generalization break-even needs the target share P(S=0)")
        scale = p_s0
    else:
        scale = 1.0
    magnitude = abs(point)
    if mode == "delta1_only":
        return magnitude
    if mode == "delta2_only":
        return magnitude / (2.0 * scale)
    if mode == "curve":
        d1 = np.linspace(0.0, magnitude, CURVE_GRID)
        d2 = (magnitude - d1) / (2.0 * scale)
        half = d1 + 2.0 * d2 * scale
        return np.column_stack([d1, d2, point - half, point + half])
    raise ValueError(f"mode must be 'delta1_only', 'delta2_only' or 'curve', got {mode!r}")
