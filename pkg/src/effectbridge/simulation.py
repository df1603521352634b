"""Synthetic data generation, the RMSE comparison study, and exact
identification checks on finite-support designs.

The default design draws five standard-normal covariates of which the first
three are shared with the target population, selects into the source with
probability one half, assigns treatment by a logistic propensity in x1 and
x3, and generates linear outcomes with unit noise; the target-population
effect equals one. Injected nuisance noise with mean and standard deviation
n^-alpha emulates estimators converging at rate n^-alpha.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import CombinedSample
from .errors import ConfigError, DataError
from .estimators import dr_estimate, plugin_estimate
from .nuisance import oracle_noisy_nuisances
from .quadratic import quadratic_pipeline

ESTIMATOR_TAGS = ("plugin", "dr", "qr")


@dataclass(frozen=True)
class DGPSpec:
    """Analytic data-generating process with every nuisance in closed form.

    Selection depends on X only through V, covariates are standard normal,
    and outcomes are the arm mean plus centered Gaussian noise. ``truths``
    maps (kind, arm) to the true mean potential outcome.
    """

    d: int
    v_indices: tuple
    participation: Callable     # v rows -> P(S=1 | V)
    propensity: Callable        # x rows -> P(A=1 | X, S=1)
    outcome_mean: Callable      # (x rows, arm) -> E[Y | X, A=arm, S=1]
    nested_mean: Callable       # (v rows, arm) -> E[outcome_mean | V, S=1]
    nested_var: Callable        # (v rows, arm) -> Var(outcome_mean | V, S=1)
    outcome_sd: Callable        # (x rows, arm) -> sd(Y | X, A=arm, S=1)
    truths: dict
    name: str = "dgp"

    @property
    def is_v_equal_x(self) -> bool:
        return self.v_indices == tuple(range(self.d))

    def draw_x(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.d))

    def truth(self, kind: str, arm) -> float:
        if arm == "contrast":
            return self.truths[(kind, 1)] - self.truths[(kind, 0)]
        return self.truths[(kind, arm)]


def _half(rows):
    return np.full(np.atleast_2d(rows).shape[0], 0.5)


def _dgp7_propensity(x):
    x = np.atleast_2d(x)
    return expit(0.3 * x[:, 0] - 0.3 * x[:, 2])


def _dgp7_outcome_mean(x, arm):
    x = np.atleast_2d(x)
    return 1.5 * x[:, 0] + x[:, 3] + 1.0 if arm == 1 else x[:, 0]


def _dgp7_nested_mean(v, arm):
    v = np.atleast_2d(v)
    return 1.5 * v[:, 0] + 1.0 if arm == 1 else v[:, 0]


def _dgp7_nested_var(v, arm):
    # arm 1 outcome mean carries the x4 coordinate, not in V, with unit variance
    return np.full(np.atleast_2d(v).shape[0], 1.0 if arm == 1 else 0.0)


def _unit_sd(x, arm):
    return np.ones(np.atleast_2d(x).shape[0])


def default_dgp() -> DGPSpec:
    """Five covariates, V = (x1, x2, x3), target-population effect 1."""
    truths = {("generalization", 1): 1.0, ("generalization", 0): 0.0,
              ("transportation", 1): 1.0, ("transportation", 0): 0.0}
    return DGPSpec(d=5, v_indices=(0, 1, 2), participation=_half,
                   propensity=_dgp7_propensity, outcome_mean=_dgp7_outcome_mean,
                   nested_mean=_dgp7_nested_mean, nested_var=_dgp7_nested_var,
                   outcome_sd=_unit_sd, truths=truths, name="split-covariates")


def _vx_propensity(x):
    x = np.atleast_2d(x)
    return expit(0.3 * x[:, 0] - 0.3 * x[:, 1])


def _vx_outcome_mean(x, arm):
    x = np.atleast_2d(x)
    return 1.0 + x[:, 0] + 0.5 * x[:, 1] if arm == 1 else x[:, 0]


def _zero_var(v, arm):
    return np.zeros(np.atleast_2d(v).shape[0])


def vx_dgp() -> DGPSpec:
    """Two covariates fully shared (V = X); used by the quadratic comparisons."""
    truths = {("generalization", 1): 1.0, ("generalization", 0): 0.0,
              ("transportation", 1): 1.0, ("transportation", 0): 0.0}
    return DGPSpec(d=2, v_indices=(0, 1), participation=_half,
                   propensity=_vx_propensity, outcome_mean=_vx_outcome_mean,
                   nested_mean=_vx_outcome_mean, nested_var=_zero_var,
                   outcome_sd=_unit_sd, truths=truths, name="shared-covariates")


class SimulationDraw(NamedTuple):
    sample: CombinedSample
    truth: dict


def simulate_dgp(n: int, seed: int, dgp: Optional[DGPSpec] = None) -> SimulationDraw:
    """One dataset draw: covariates, selection, treatment, outcome.

    Target rows keep only the shared covariates. The attached truth maps
    '<kind>_arm<a>' and '<kind>_ate' to the exact population values.
    """
    if n < 10:
        raise ValueError(f"n must be at least 10, got {n}")
    dgp = dgp or default_dgp()
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 977, int(n))))
    x = dgp.draw_x(rng, n)
    v = x[:, list(dgp.v_indices)]
    rho = np.broadcast_to(np.asarray(dgp.participation(v), dtype=float), (n,))
    s = rng.random(n) < rho
    x_src = x[s]
    pi1 = np.broadcast_to(np.asarray(dgp.propensity(x_src), dtype=float),
                          (int(s.sum()),))
    a = (rng.random(s.sum()) < pi1).astype(int)
    mu = np.where(a == 1, dgp.outcome_mean(x_src, 1), dgp.outcome_mean(x_src, 0))
    sd = np.where(a == 1, dgp.outcome_sd(x_src, 1), dgp.outcome_sd(x_src, 0))
    y = mu + sd * rng.standard_normal(s.sum())
    sample = CombinedSample(x=x_src, a=a, y=y, v_target=x[~s][:, list(dgp.v_indices)],
                            v_index_map=dgp.v_indices)
    truth = {}
    for kind in ("generalization", "transportation"):
        for arm in (0, 1):
            truth[f"{kind}_arm{arm}"] = dgp.truth(kind, arm)
        truth[f"{kind}_ate"] = dgp.truth(kind, "contrast")
    return SimulationDraw(sample=sample, truth=truth)


@dataclass(frozen=True)
class RmseRow:
    estimator: str
    n: int
    alpha: float
    rmse: float
    bias: float
    mc_se: float
    replications: int


@dataclass(frozen=True)
class RmseTable:
    rows: tuple

    def __post_init__(self):
        for row in self.rows:
            if row.replications < 1:
                raise ValueError("replications must be positive")
            if row.rmse ** 2 < row.bias ** 2 - 1e-9:
                raise ValueError("rmse**2 cannot fall below bias**2")

    def cell(self, estimator: str, n: int, alpha: float) -> RmseRow:
        for row in self.rows:
            if (row.estimator == estimator and row.n == n
                    and abs(row.alpha - alpha) < 1e-12):
                return row
        raise KeyError((estimator, n, alpha))


def _rep_seeds(seed: int, n_idx: int, a_idx: int, rep: int) -> tuple:
    state = np.random.SeedSequence((int(seed), n_idx, a_idx, rep)).generate_state(2)
    return int(state[0]), int(state[1])


def _run_cell(args) -> list:
    (dgp, n, alpha, n_idx, a_idx, replications, seed, estimators,
     eps, arm, kind, k_basis) = args
    points = {tag: np.empty(replications) for tag in estimators}
    for rep in range(replications):
        sim_seed, fit_seed = _rep_seeds(seed, n_idx, a_idx, rep)
        draw = simulate_dgp(n, sim_seed, dgp)
        fit = oracle_noisy_nuisances(draw.sample, dgp, alpha, fit_seed, eps=eps)
        for tag in estimators:
            if tag == "plugin":
                est = plugin_estimate(draw.sample, fit, arm, kind)
            elif tag == "dr":
                est = dr_estimate(draw.sample, fit, arm, kind)
            else:
                est = quadratic_pipeline(draw.sample, arm, kind, eps=eps,
                                         seed=fit_seed, k=k_basis,
                                         prebuilt_fit=fit)
            points[tag][rep] = est.point
    truth = dgp.truth(kind, arm)
    out = []
    for tag in estimators:
        vals = points[tag]
        out.append(RmseRow(
            estimator=tag, n=n, alpha=alpha,
            rmse=float(np.sqrt(np.mean((vals - truth) ** 2))),
            bias=float(vals.mean() - truth),
            mc_se=float(np.std(vals, ddof=1) / np.sqrt(replications))
            if replications > 1 else 0.0,
            replications=replications))
    return out


def rmse_study(n_grid: Sequence[int], alpha_grid: Sequence[float], replications: int,
               seed: int, estimators: Sequence[str] = ("plugin", "dr"),
               dgp: Optional[DGPSpec] = None, eps: float = 0.01, arm: int = 1,
               kind: str = "transportation", workers: int = 1,
               k_basis: Optional[int] = None) -> RmseTable:
    """Replicated accuracy comparison across sample sizes and noise rates.

    Each cell replays ``replications`` draws of the DGP plus injected
    nuisance noise at the cell's alpha and reports RMSE, bias and the Monte
    Carlo standard error against the exact truth. Per-replication seeds are
    derived from (seed, n index, alpha index, rep), so any parallel
    execution order reproduces the identical table.
    """
    if not n_grid or not len(alpha_grid):
        raise ValueError("n_grid and alpha_grid must be nonempty")
    if replications < 1:
        raise ValueError("replications must be at least 1")
    estimators = tuple(estimators)
    unknown = [t for t in estimators if t not in ESTIMATOR_TAGS]
    if unknown:
        raise ConfigError(f"unknown estimator tag(s) {unknown}; choose from {ESTIMATOR_TAGS}")
    dgp = dgp or default_dgp()
    if "qr" in estimators and not dgp.is_v_equal_x:
        raise ConfigError("the qr estimator requires a V = X data-generating process")
    cells = [(dgp, int(n), float(alpha), n_idx, a_idx, replications, seed,
              estimators, eps, arm, kind, k_basis)
             for n_idx, n in enumerate(n_grid)
             for a_idx, alpha in enumerate(alpha_grid)]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(cell) for cell in cells]
    rows = tuple(row for cell_rows in results for row in cell_rows)
    return RmseTable(rows=rows)


@dataclass(frozen=True)
class CompareRow:
    method: str
    n: int
    k: int
    alpha: float
    bias: float
    rmse: float
    var: float


def _run_compare_cell(args) -> list:
    dgp, n, k, alpha, idx, replications, seed, eps, arm, kind = args
    points = {"dr": np.empty(replications), "qr": np.empty(replications)}
    for rep in range(replications):
        sim_seed, fit_seed = _rep_seeds(seed, idx, rep, 7)
        draw = simulate_dgp(n, sim_seed, dgp)
        fit = oracle_noisy_nuisances(draw.sample, dgp, alpha, fit_seed, eps=eps)
        points["dr"][rep] = dr_estimate(draw.sample, fit, arm, kind).point
        points["qr"][rep] = quadratic_pipeline(
            draw.sample, arm, kind, eps=eps, seed=fit_seed, k=k,
            prebuilt_fit=fit).point
    truth = dgp.truth(kind, arm)
    return [CompareRow(method=m, n=n, k=k, alpha=alpha,
                       bias=float(points[m].mean() - truth),
                       rmse=float(np.sqrt(np.mean((points[m] - truth) ** 2))),
                       var=float(np.var(points[m], ddof=1)) if replications > 1 else 0.0)
            for m in ("dr", "qr")]


def quadratic_compare_study(n_grid: Sequence[int], k_grid: Sequence[int],
                            alpha_grid: Sequence[float], replications: int,
                            seed: int, dgp: Optional[DGPSpec] = None,
                            eps: float = 0.01, arm: int = 1,
                            kind: str = "transportation",
                            workers: int = 1) -> list:
    """Doubly robust versus quadratic comparison on a V = X design."""
    dgp = dgp or vx_dgp()
    if not dgp.is_v_equal_x:
        raise ConfigError("quadratic comparison requires a V = X data-generating process")
    cells = [(dgp, int(n), int(k), float(alpha), idx, replications, seed, eps, arm, kind)
             for idx, (n, k, alpha) in enumerate(
                 (n, k, alpha) for n in n_grid for k in k_grid for alpha in alpha_grid)]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_compare_cell, cells))
    else:
        results = [_run_compare_cell(cell) for cell in cells]
    return [row for cell_rows in results for row in cell_rows]


@dataclass(frozen=True)
class DiscreteLaw:
    """Finite-support joint law over (X, A, Y, S) given structurally.

    ``potential_mean[j, a, s]`` is E[Y^a | X = x_j, S = s]; specifying it
    per (x, s) with treatment drawn from ``treat_prob`` builds in the
    within-source exchangeability assumption, and making it equal across
    s encodes transportability.
    """

    x_support: np.ndarray      # (m, d)
    x_probs: np.ndarray        # (m,)
    v_indices: tuple
    source_prob: np.ndarray    # (m,) P(S=1 | x_j)
    treat_prob: np.ndarray     # (m,) P(A=1 | x_j, S=1)
    potential_mean: np.ndarray  # (m, 2, 2) indexed [point, arm, s]

    def __post_init__(self):
        p = np.asarray(self.x_probs, dtype=float)
        if abs(p.sum() - 1.0) > 1e-12 or (p < 0).any():
            raise ValueError("x_probs must be a probability vector")


class IdentificationCheck(NamedTuple):
    lhs: float
    rhs: float
    gap: float


def identification_oracle(law: DiscreteLaw, arm: int = 1,
                          kind: str = "transportation") -> IdentificationCheck:
    """Exact-enumeration check of the identification identity.

    lhs is the mean potential outcome built directly from the law (over the
    whole population, or the target population for transportation). rhs is
    the triple expectation: regress the observed outcome on X in the
    source arm, average that over X given (V, S=1), then average over V in
    the relevant population. Under consistency, within-source
    exchangeability, positivity, and mean transportability the gap is zero
    up to rounding; violating transportability makes it positive.
    """
    kind = "generalization" if kind in ("ge", "generalization") else "transportation"
    x = np.atleast_2d(law.x_support)
    p = np.asarray(law.x_probs, dtype=float)
    rho = np.asarray(law.source_prob, dtype=float)
    pi1 = np.asarray(law.treat_prob, dtype=float)
    pm = np.asarray(law.potential_mean, dtype=float)
    m = x.shape[0]
    for j in range(m):
        if p[j] == 0.0:
            raise DataError(f"support point {j} (x={x[j]}) has zero mass")
        if not rho[j] > 0.0:
            raise DataError(
                f"selection positivity fails at support point {j} (x={x[j]}): "
                f"P(S=1|x)={rho[j]}")
        pi_a = pi1[j] if arm == 1 else 1.0 - pi1[j]
        if not pi_a > 0.0:
            raise DataError(
                f"treatment positivity fails at support point {j} (x={x[j]}): "
                f"P(A={arm}|x,S=1)={pi_a}")

    mu = pm[:, arm, 1]  # observed regression in the source arm
    v_rows = x[:, list(law.v_indices)]
    _, group = np.unique(v_rows, axis=0, return_inverse=True)
    n_groups = group.max() + 1
    tau = np.empty(n_groups)
    for g in range(n_groups):
        members = group == g
        mass_s1 = np.sum(p[members] * rho[members])
        if mass_s1 == 0.0:
            raise DataError(
                f"positivity cell with zero mass: no source mass at V stratum "
                f"{v_rows[members][0]}")
        tau[g] = np.sum(p[members] * rho[members] * mu[members]) / mass_s1

    if kind == "generalization":
        lhs = float(np.sum(p * (rho * pm[:, arm, 1] + (1.0 - rho) * pm[:, arm, 0])))
        group_mass = np.bincount(group, weights=p, minlength=n_groups)
        rhs = float(np.sum(group_mass * tau))
    else:
        p0 = float(np.sum(p * (1.0 - rho)))
        if p0 <= 0.0:
            raise DataError("target population has zero mass")
        lhs = float(np.sum(p * (1.0 - rho) * pm[:, arm, 0]) / p0)
        group_mass = np.bincount(group, weights=p * (1.0 - rho), minlength=n_groups)
        rhs = float(np.sum(group_mass * tau) / p0)
    return IdentificationCheck(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))
