"""Acceptance suite: one test per exit criterion, run at the stated sizes.

Each criterion prints a PASS/FAIL line on the real stdout (bypassing
capture) so the tee'd run log shows the scorecard. Criterion 1 is split
into its two clauses; the alpha=0.5 ratio clause is expected to fail:
under the pinned noise model the doubly robust estimator's variance
exceeds the infeasible-oracle plug-in's by a structural factor of about
1.4 at the parametric rate (see the README for the full accounting).
"""

import hashlib
import json

import numpy as np
import pytest
from scipy.special import expit

from effectbridge import (CombinedSample, GramMatrix, BasisSpec, DiscreteLaw,
                          EstimandSpec, build_basis, breakeven_deltas,
                          combined_transport_estimate, default_dgp, dr_estimate,
                          efficiency_bound_mc, estimate_gram, fit_from_functions,
                          identification_oracle, interval_from_point,
                          oracle_noisy_nuisances, paired_kernel_u, qr_estimate,
                          rmse_study, simulate_dgp, SurveyDesign,
                          u_statistic_bruteforce, vx_dgp, weighted_mean_variance)
from effectbridge.cli import main as cli_main
from effectbridge.quadratic import stacked_x

import conftest
from enum_oracle import (enum_first_order_mean, enum_second_order_mean, enum_truth)

SEED = 20260810


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}: acceptance {criterion} - {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


# -------------------------------------------------------------------------
# Criterion 1: simulation ordering at n=5000, 1000 replications
# -------------------------------------------------------------------------

ALPHAS_LOW = (0.10, 0.15, 0.20, 0.25, 0.30, 0.35)


@pytest.fixture(scope="module")
def rmse_table():
    return rmse_study([5000], list(ALPHAS_LOW) + [0.5], replications=1000,
                      seed=SEED, estimators=("plugin", "dr"))


def test_criterion_1a_dr_dominates_at_slow_rates(rmse_table):
    ratios = {}
    for alpha in ALPHAS_LOW:
        dr = rmse_table.cell("dr", 5000, alpha).rmse
        plugin = rmse_table.cell("plugin", 5000, alpha).rmse
        ratios[alpha] = dr / plugin
    ok = all(r < 1.0 for r in ratios.values())
    report("1a", ok, "RMSE(dr) < RMSE(plugin) for alpha in {0.10..0.35}: "
           + ", ".join(f"{a}:{r:.3f}" for a, r in ratios.items()))
    assert ok, ratios


def test_criterion_1b_parametric_rate_ratio_band(rmse_table):
    dr = rmse_table.cell("dr", 5000, 0.5).rmse
    plugin = rmse_table.cell("plugin", 5000, 0.5).rmse
    ratio = dr / plugin
    ok = 0.5 <= ratio <= 1.3
    report("1b", ok, f"RMSE(dr)/RMSE(plugin) at alpha=0.5 is {ratio:.4f}, "
           "required within [0.5, 1.3]"
           + ("" if ok else " (structurally unattainable under the pinned "
              "noise model; see the README)"))
    assert ok, (f"ratio {ratio:.4f} outside [0.5, 1.3]: the transportation "
                "efficiency bound (~10.7) exceeds the infeasible-oracle plug-in "
                "variance (~5.5) by a structural factor ~1.39 at alpha=0.5")


# -------------------------------------------------------------------------
# Criterion 2: oracle unbiasedness and CI coverage
# -------------------------------------------------------------------------

def test_criterion_2_oracle_unbiasedness_and_coverage():
    dgp = default_dgp()
    reps = 1000
    points = np.empty(reps)
    covered = 0
    for rep in range(reps):
        draw = simulate_dgp(5000, seed=SEED + rep, dgp=dgp)
        fit = oracle_noisy_nuisances(draw.sample, dgp, 0.5, seed=rep, zero_noise=True)
        est = dr_estimate(draw.sample, fit, 1, "transportation")
        points[rep] = est.point
        covered += est.ci_lower <= 1.0 <= est.ci_upper
    mc_se = points.std(ddof=1) / np.sqrt(reps)
    bias = points.mean() - 1.0
    coverage = covered / reps
    ok = abs(bias) <= 3.0 * mc_se and 0.93 <= coverage <= 0.97
    report("2", ok, f"bias {bias:+.5f} ({abs(bias)/mc_se:.2f} MC SEs), "
           f"95% CI coverage {coverage:.3f} in [0.93, 0.97]")
    assert abs(bias) <= 3.0 * mc_se
    assert 0.93 <= coverage <= 0.97


# -------------------------------------------------------------------------
# Criterion 3: double robustness under single-sided misspecification
# -------------------------------------------------------------------------

def test_criterion_3_double_robustness():
    dgp = default_dgp()
    reps = 500
    const = lambda value: (lambda rows: np.full(np.atleast_2d(rows).shape[0], value))
    zero = lambda rows, arm: np.zeros(np.atleast_2d(rows).shape[0])

    wrong_weights = np.empty(reps)
    wrong_regressions = np.empty(reps)
    for rep in range(reps):
        draw = simulate_dgp(5000, seed=SEED + 10000 + rep, dgp=dgp)
        fit_a = fit_from_functions(draw.sample, outcome_mean=dgp.outcome_mean,
                                   propensity=const(0.3), participation=const(0.7),
                                   nested_mean=dgp.nested_mean)
        wrong_weights[rep] = dr_estimate(draw.sample, fit_a, 1, "transportation").point
        fit_b = fit_from_functions(draw.sample, outcome_mean=zero,
                                   propensity=dgp.propensity,
                                   participation=dgp.participation, nested_mean=zero)
        wrong_regressions[rep] = dr_estimate(draw.sample, fit_b, 1,
                                             "generalization").point
    results = {}
    for label, pts in (("wrong pi/rho", wrong_weights),
                       ("wrong mu/tau", wrong_regressions)):
        mc_se = pts.std(ddof=1) / np.sqrt(reps)
        results[label] = (abs(pts.mean() - 1.0), mc_se)
    ok = all(bias <= 3.0 * se for bias, se in results.values())
    report("3", ok, "; ".join(f"{k}: |bias| {b:.5f} = {b/s:.2f} MC SEs"
                              for k, (b, s) in results.items()))
    for label, (bias, se) in results.items():
        assert bias <= 3.0 * se, label


# -------------------------------------------------------------------------
# Criterion 4: identification by exact enumeration
# -------------------------------------------------------------------------

def _law_single_cell():
    return DiscreteLaw(x_support=np.array([[0.0]]), x_probs=np.array([1.0]),
                       v_indices=(0,), source_prob=np.array([0.5]),
                       treat_prob=np.array([0.5]),
                       potential_mean=np.tile([[0.0], [1.0]], (1, 1, 2)))


def _law_two_point_v():
    pm = np.empty((2, 2, 2))
    pm[:, 0, :] = np.array([[0.2], [0.4]])  # control mean per point, both populations
    pm[:, 1, :] = np.array([[1.0], [2.5]])
    return DiscreteLaw(x_support=np.array([[0.0], [1.0]]),
                       x_probs=np.array([0.25, 0.75]), v_indices=(0,),
                       source_prob=np.array([0.8, 0.3]),
                       treat_prob=np.array([0.4, 0.6]), potential_mean=pm)


def _law_nested_covariates(shift=0.0):
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    p = np.array([0.3, 0.2, 0.1, 0.4])
    pm = np.empty((4, 2, 2))
    pm[:, 0, 1] = [0.0, 0.5, 1.0, 0.25]
    pm[:, 1, 1] = [1.0, 2.0, 1.5, 3.0]
    pm[:, :, 0] = pm[:, :, 1] + shift
    return DiscreteLaw(x_support=x, x_probs=p, v_indices=(0,),
                       source_prob=np.array([0.4, 0.4, 0.7, 0.7]),
                       treat_prob=np.array([0.3, 0.6, 0.5, 0.7]),
                       potential_mean=pm)


def test_criterion_4_identification():
    laws = [_law_single_cell(), _law_two_point_v(), _law_nested_covariates()]
    gaps = []
    for law in laws:
        for kind in ("generalization", "transportation"):
            for arm in (0, 1):
                gaps.append(identification_oracle(law, arm, kind).gap)
    violation = identification_oracle(_law_nested_covariates(shift=0.5), 1,
                                      "transportation").gap
    ok = max(gaps) < 1e-14 and violation > 0.01
    report("4", ok, f"max gap over {len(gaps)} checks on 3 designs: "
           f"{max(gaps):.2e} (< 1e-14); transportability violation gap "
           f"{violation:.3f} (> 0.01)")
    assert max(gaps) < 1e-14
    assert violation > 0.01


# -------------------------------------------------------------------------
# Criterion 5: sensitivity arithmetic
# -------------------------------------------------------------------------

def test_criterion_5_sensitivity_arithmetic():
    spec = EstimandSpec("transportation", "contrast")
    be2 = breakeven_deltas(0.024, "delta2_only")
    be1 = breakeven_deltas(0.024, "delta1_only")
    collapse = interval_from_point(0.024, 0.0, 0.0, spec)
    grid = np.linspace(0.0, 0.05, 10)
    nested = True
    prev_rows = None
    for d1 in grid:
        rows = [interval_from_point(0.024, d1, d2, spec) for d2 in grid]
        widths = [r.width for r in rows]
        nested &= all(np.diff(widths) >= -1e-15)
        if prev_rows is not None:
            nested &= all(a.lower >= b.lower and a.upper <= b.upper
                          for a, b in zip(prev_rows, rows))
        prev_rows = rows
    ok = (be2 == 0.012 and be1 == 0.024
          and collapse.lower == collapse.upper == 0.024 and nested)
    report("5", ok, f"break-even delta2 {be2} (= 0.012 exact), delta1 {be1} "
           f"(= 0.024 exact); zero-delta collapse exact; 10x10 grid nesting holds")
    assert be2 == 0.012 and be1 == 0.024
    assert collapse.lower == collapse.upper == 0.024
    assert nested


# -------------------------------------------------------------------------
# Criterion 6: efficiency bound consistency
# -------------------------------------------------------------------------

def test_criterion_6_efficiency_bound():
    # parametric-rate noisy-oracle nuisances: n*Var and n*MSE both approach
    # the transportation bound (the alpha=0.5 bias contributes O(1/n))
    dgp = default_dgp()
    bound = efficiency_bound_mc(dgp, "transportation", 1, n_mc=2_000_000, seed=SEED)
    reps, n = 2000, 20000
    points = np.empty(reps)
    for rep in range(reps):
        draw = simulate_dgp(n, seed=SEED + 50000 + rep, dgp=dgp)
        fit = oracle_noisy_nuisances(draw.sample, dgp, 0.5, seed=rep)
        points[rep] = dr_estimate(draw.sample, fit, 1, "transportation").point
    n_var = n * points.var(ddof=1)
    n_mse = n * np.mean((points - 1.0) ** 2)
    rel = abs(n_var - bound) / bound
    rel_mse = abs(n_mse - bound) / bound

    flat = _flat_spot_dgp()
    spot = efficiency_bound_mc(flat, "generalization", 1, n_mc=200_000, seed=1)
    spot_rel = abs(spot - 4.0) / 4.0
    ok = rel <= 0.10 and rel_mse <= 0.10 and spot_rel <= 0.01
    report("6", ok, f"n*Var(dr) {n_var:.3f}, n*MSE {n_mse:.3f} vs Monte Carlo "
           f"bound {bound:.3f} (rel diffs {rel:.3%}, {rel_mse:.3%} <= 10%); "
           f"analytic spot case {spot:.6f} (rel err {spot_rel:.2e} <= 1%)")
    assert rel <= 0.10
    assert rel_mse <= 0.10
    assert spot_rel <= 0.01


def _flat_spot_dgp():
    from effectbridge import DGPSpec
    const = lambda v: (lambda rows: np.full(np.atleast_2d(rows).shape[0], v))
    return DGPSpec(d=1, v_indices=(0,), participation=const(0.5),
                   propensity=const(0.5),
                   outcome_mean=lambda rows, arm: np.zeros(np.atleast_2d(rows).shape[0]),
                   nested_mean=lambda rows, arm: np.zeros(np.atleast_2d(rows).shape[0]),
                   nested_var=lambda rows, arm: np.zeros(np.atleast_2d(rows).shape[0]),
                   outcome_sd=lambda rows, arm: np.ones(np.atleast_2d(rows).shape[0]),
                   truths={(k, a): 0.0 for k in ("generalization", "transportation")
                           for a in (0, 1)}, name="flat-spot")


# -------------------------------------------------------------------------
# Criterion 7: quadratic estimator
# -------------------------------------------------------------------------

def _vx_oracle_pieces(n, seed, k):
    """Training-fold basis/gram plus an estimation sample with a noisy fit."""
    dgp = vx_dgp()
    train = simulate_dgp(n, seed=seed, dgp=dgp).sample
    train = CombinedSample(x=train.x, a=train.a, y=train.y, v_target=train.v_target,
                           v_index_map=train.v_index_map,
                           source_ids=10 ** 7 + np.arange(train.n1),
                           target_ids=2 * 10 ** 7 + np.arange(train.n2))
    fit_train = oracle_noisy_nuisances(train, dgp, 0.3, seed=seed + 1)
    basis = build_basis(BasisSpec("cosine", k=k, d=2), train)
    gram = estimate_gram(basis, fit_train, train, "transportation", 1)
    est = simulate_dgp(n, seed=seed + 2, dgp=dgp).sample
    fit_est = oracle_noisy_nuisances(est, dgp, 0.3, seed=seed + 3)
    return dgp, basis, gram, est, fit_est


def test_criterion_7a_fast_contraction_equals_bruteforce():
    worst = 0.0
    for n, k, seed in ((60, 4, 1), (150, 9, 2), (300, 16, 3)):
        _, basis, gram, est, fit = _vx_oracle_pieces(n, seed, k)
        x = stacked_x(est)
        s1 = np.concatenate([np.ones(est.n1), np.zeros(est.n2)])
        hit = np.concatenate([(est.a == 1).astype(float), np.zeros(est.n2)])
        y = np.concatenate([est.y, np.zeros(est.n2)])
        mu = np.concatenate([fit.outcome_src[:, 1], fit.outcome_tgt[:, 1]])
        rho = np.concatenate([fit.participation_src, fit.participation_tgt])
        w = rho * np.concatenate([fit.propensity_src[:, 1], fit.propensity_tgt[:, 1]])
        r = hit * (y - mu)
        g = ((1.0 - s1) * w - (1.0 - rho) * hit) / w
        b_vals = basis.evaluate(x)
        fast = paired_kernel_u(r, b_vals, gram, g)
        solved = gram.solve(b_vals.T)
        brute = u_statistic_bruteforce(
            lambda i, j: r[i] * (b_vals[i] @ solved[:, j]) * g[j], est.n)
        worst = max(worst, abs(fast - brute) / max(abs(brute), 1e-300))
        # the same kernel drives the estimator itself
        first = (1.0 - rho) * r / w + (1.0 - s1) * mu
        point = qr_estimate(est, fit, basis, gram, 1, "transportation").point
        assert point == pytest.approx(
            (first.mean() + fast) / (est.n2 / est.n), rel=1e-12)
    ok = worst <= 1e-10
    report("7a", ok, f"U-statistic contraction vs brute force, n<=300: worst "
           f"relative gap {worst:.2e} <= 1e-10")
    assert ok


def test_criterion_7b_exact_gram_kills_conditional_bias():
    rng = np.random.default_rng(4)
    k = 6
    p = np.full(k, 1.0 / k)
    rho = np.full(k, 0.5)
    pi = expit(np.linspace(-0.8, 0.8, k))
    mu = np.linspace(-1.0, 2.0, k)
    mu_hat = mu + rng.uniform(-0.5, 0.5, k)
    w_hat = np.clip(rho * pi * rng.uniform(0.5, 1.6, k), 0.01, 0.99)
    gram = GramMatrix(omega=np.diag(p * rho * pi), lam=0.0)
    first = enum_first_order_mean(p, rho, pi, mu, mu_hat, w_hat)
    second = enum_second_order_mean(p, rho, pi, mu, mu_hat, w_hat, gram)
    psi = enum_truth(p, mu)
    qr_bias = abs(first + second - psi)
    dr_bias = abs(first - psi)
    ok = qr_bias < 1e-12 and dr_bias > 1e-3
    report("7b", ok, f"exact-Gram enumeration: quadratic conditional bias "
           f"{qr_bias:.2e} (= 0), first-order bias {dr_bias:.4f} (nonzero)")
    assert qr_bias < 1e-12
    assert dr_bias > 1e-3


def test_criterion_7c_variance_envelope():
    dgp = vx_dgp()
    # fixed wrong nuisance functions and a fixed basis/gram from one big draw
    nuisances = dict(
        outcome_mean=lambda rows, arm: dgp.outcome_mean(rows, arm)
        + 0.3 * np.sin(np.atleast_2d(rows)[:, 0]),
        propensity=lambda rows: np.clip(
            expit(0.25 * np.atleast_2d(rows)[:, 0]), 0.05, 0.95),
        participation=lambda rows: np.full(np.atleast_2d(rows).shape[0], 0.55))
    train = simulate_dgp(4000, seed=SEED + 1, dgp=dgp).sample
    train = CombinedSample(x=train.x, a=train.a, y=train.y, v_target=train.v_target,
                           v_index_map=train.v_index_map,
                           source_ids=10 ** 7 + np.arange(train.n1),
                           target_ids=2 * 10 ** 7 + np.arange(train.n2))
    fit_train = fit_from_functions(train, **nuisances)
    reps = 250
    ratios = {}
    for k in (10, 50, 200):
        basis = build_basis(BasisSpec("cosine", k=k, d=2), train)
        gram = estimate_gram(basis, fit_train, train, "transportation", 1)
        for n in (500, 1000):
            pts = np.empty(reps)
            for rep in range(reps):
                est = simulate_dgp(n, seed=SEED + 1000 * k + 7 * n + rep,
                                   dgp=dgp).sample
                fit = fit_from_functions(est, **nuisances)
                pts[rep] = qr_estimate(est, fit, basis, gram, 1,
                                       "transportation").point
            ratios[(n, k)] = pts.var(ddof=1) / (1.0 / n + k / n ** 2)
    spread = max(ratios.values()) / min(ratios.values())
    ok = spread <= 2.5
    report("7c", ok, "Var(qr)/(1/n + k/n^2) across (n,k) grid: "
           + ", ".join(f"{nk}:{r:.2f}" for nk, r in ratios.items())
           + f"; max/min {spread:.2f} <= 2.5 (single-constant envelope)")
    assert ok, ratios


def test_criterion_7d_basis_bound_inequalities():
    rng = np.random.default_rng(11)
    failures = 0
    for _ in range(100):
        m, k = 12, 4
        f = rng.dirichlet(np.ones(m))
        w = rng.uniform(0.1, 0.9, m)
        b = rng.standard_normal((m, k))
        omega = b.T @ np.diag(f * w) @ b
        omega_hat = b.T @ np.diag(rng.dirichlet(np.ones(m)) * rng.uniform(0.1, 0.9, m)) @ b
        g1, g2 = rng.standard_normal((2, m))
        norm = lambda g: np.sqrt(np.sum(g ** 2 * f * w))
        proj = b @ np.linalg.solve(omega, b.T @ (f * w * g2))
        proj_hat = b @ np.linalg.solve(omega_hat, b.T @ (f * w * g2))
        lhs1 = abs(np.sum(g1 * (proj - proj_hat) * f * w))
        rhs1 = (np.linalg.norm(omega, 2) * norm(g1) * norm(g2)
                * np.linalg.norm(np.linalg.inv(omega) - np.linalg.inv(omega_hat), 2))
        oi = np.linalg.inv(omega_hat)
        lhs3 = np.sum((b @ (oi @ (b.T @ (f * w * g2)))) ** 2 * f * w)
        rhs3 = (np.linalg.norm(omega, 2) * np.linalg.norm(oi @ omega @ oi, 2)
                * norm(g2) ** 2)
        failures += not (lhs1 <= rhs1 * (1 + 1e-9) and lhs3 <= rhs3 * (1 + 1e-9))
    ok = failures == 0
    report("7d", ok, f"projection-error and projection-norm bounds held on "
           f"{100 - failures}/100 random draws")
    assert ok


# -------------------------------------------------------------------------
# Criterion 8: survey weighting
# -------------------------------------------------------------------------

def test_criterion_8_survey_weighting():
    rng = np.random.default_rng(2)
    y = rng.standard_normal(40)
    design = SurveyDesign(stratum=np.zeros(40, dtype=int), cluster=np.arange(40),
                          weight=np.ones(40))
    mean, var = weighted_mean_variance(design, y)
    reduction = abs(mean - y.mean()) <= 1e-12

    w = rng.uniform(0.5, 3.0, 40)
    base = weighted_mean_variance(
        SurveyDesign(design.stratum, design.cluster, w), y)
    scaled = weighted_mean_variance(
        SurveyDesign(design.stratum, design.cluster, 4.0 * w), y)
    scale_invariant = base == scaled

    combo = combined_transport_estimate(np.full(100, 0.2), (0.4, 0.0), 100, 300)
    hand_exact = combo.point == 0.35

    ok = reduction and scale_invariant and hand_exact
    report("8", ok, f"equal-weight mean gap {abs(mean - y.mean()):.1e} <= 1e-12; "
           f"weight-scale invariance exact: {scale_invariant}; "
           f"combined hand example = {combo.point} (0.35 exact)")
    assert reduction and scale_invariant and hand_exact


# -------------------------------------------------------------------------
# Criterion 9: byte-level determinism of every subcommand
# -------------------------------------------------------------------------

def _digest_tree(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir())}


def test_criterion_9_determinism(tmp_path):
    draw = simulate_dgp(300, seed=3)
    from effectbridge import default_schema, write_combined_csv
    schema = default_schema(draw.sample)
    write_combined_csv(draw.sample, tmp_path / "s.csv", tmp_path / "t.csv", schema)
    (tmp_path / "schema.json").write_text(json.dumps(
        {"treatment": "treatment", "outcome": "outcome",
         "x": list(schema.x_columns), "v": list(schema.v_columns)}))

    runs = {
        "estimate": ["estimate", "--source", str(tmp_path / "s.csv"), "--target",
                     str(tmp_path / "t.csv"), "--schema", str(tmp_path / "schema.json"),
                     "--seed", "7", "--dump-influence"],
        "simulate": ["simulate", "--n-grid", "120,150", "--alpha-grid", "0.3,0.5",
                     "--reps", "5", "--seed", "7"],
        "sensitivity": ["sensitivity", "--point", "0.024", "--delta2", "0.012"],
        "quadratic-compare": ["quadratic-compare", "--n-grid", "200", "--k-grid",
                              "4", "--alpha-grid", "0.5", "--reps", "4",
                              "--seed", "7"],
    }
    all_ok = True
    details = []
    for name, args in runs.items():
        assert cli_main(args + ["--out", str(tmp_path / f"{name}_a")]) == 0
        assert cli_main(args + ["--out", str(tmp_path / f"{name}_b")]) == 0
        same = (_digest_tree(tmp_path / f"{name}_a")
                == _digest_tree(tmp_path / f"{name}_b"))
        if name in ("simulate", "quadratic-compare"):
            assert cli_main(args + ["--workers", "4",
                                    "--out", str(tmp_path / f"{name}_par")]) == 0
            same &= (_digest_tree(tmp_path / f"{name}_a")
                     == _digest_tree(tmp_path / f"{name}_par"))
        all_ok &= same
        details.append(f"{name}:{'ok' if same else 'DIFFERS'}")
    report("9", all_ok, "byte-identical reruns (and parallel workers): "
           + ", ".join(details))
    assert all_ok
