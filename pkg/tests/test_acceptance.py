"""Acceptance suite: ten numbered checks at their contracted tolerances.

Each test prints one PASS/FAIL line.  The bias-rate study honours
MARGINALSMC_ACCEPTANCE=smoke (reduced replication, sign/monotonicity
check only); everything else always runs at full strength.  Worker
count comes from MARGINALSMC_THREADS (default 2) and never affects
results, only wall time.
"""

import os
import time

import numpy as np
import pytest
from scipy import stats

from marginalsmc.engine import (
    EngineConfig,
    check_conditional_expectations,
    multinomial_resample,
    run_msmc,
)
from marginalsmc.filters import (
    abc_gaussian_posterior,
    fixture_lgssm,
    make_mapf,
    make_mpf,
)
from marginalsmc.model import test_function
from marginalsmc.numerics import fit_loglog_slope
from marginalsmc.oracles import grid_filter, grid_for_ssm, kalman_filter
from marginalsmc.replicates import AbcReplicateJob, FilterReplicateJob, run_replicates
from marginalsmc.streams import SeededStream
from marginalsmc.variance import (
    clt_variance_recursion,
    closed_form_variance,
    compare_variances,
    empirical_asymptotic_variance,
    mpf_asymptotic_variance,
)

THREADS = int(os.environ.get("MARGINALSMC_THREADS", "2"))
SMOKE = os.environ.get("MARGINALSMC_ACCEPTANCE", "full").lower() == "smoke"

PHIS = {"one": test_function("one"), "identity": test_function("identity")}


def report(num: int, ok: bool, detail: str, started: float) -> None:
    status = "PASS" if ok else "FAIL"
    elapsed = time.perf_counter() - started
    print(f"[criterion {num:2d}] {status} ({elapsed:.1f}s) {detail}")
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="module")
def ssm():
    return fixture_lgssm()


@pytest.fixture(scope="module")
def kalman(ssm):
    return kalman_filter(ssm)


def convergence_errors(ssm, truth, n_list, replicates, seed_label,
                       proposal="locally_optimal", filter_kind="mpf",
                       aux=None, estimator="pre"):
    """Per-N (rmse, bias, bias_se) of the final-step estimate."""
    stream = SeededStream(815001).child(seed_label)
    out = {}
    for n in n_list:
        job = FilterReplicateJob(
            ssm=ssm, filter_kind=filter_kind, proposal=proposal, aux=aux,
            n_particles=n, phi_names=("identity",), estimator=estimator)
        est = run_replicates(job, stream.child("N", n), replicates,
                             threads=THREADS)[:, 0]
        rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
        bias = float(est.mean() - truth)
        bias_se = float(est.std(ddof=1) / np.sqrt(replicates))
        out[n] = (rmse, bias, bias_se)
    return out


def test_criterion_01_oracle_agreement(ssm, kalman):
    started = time.perf_counter()
    grid = grid_for_ssm(ssm, n_points=2001, half_width=8.0)
    flow = grid_filter(make_mpf(ssm, "locally_optimal"), grid)
    means = np.array([d.mean() for d in flow.updated])
    sup_gap = float(np.max(np.abs(means - kalman.filt_mean)))
    logz_gap = abs(flow.log_z - kalman.log_z)
    elapsed = time.perf_counter() - started
    ok = sup_gap < 1e-6 and logz_gap < 1e-6 and elapsed < 5.0
    report(1, ok, f"grid-vs-exact: sup mean gap {sup_gap:.2e}, "
                  f"log-evidence gap {logz_gap:.2e}, {elapsed:.2f}s", started)


def test_criterion_04_conditional_expectation(ssm):
    started = time.perf_counter()
    model = make_mpf(ssm, "locally_optimal")
    cfg = EngineConfig(64)
    stream = SeededStream(815004)
    from marginalsmc.engine import _initial_step, msmc_step

    uniform, weighted, _ = _initial_step(model, cfg, stream.child("warmup"), PHIS, None)
    for n in (1, 2):
        uniform, weighted, _ = msmc_step(uniform, weighted, model, n, cfg,
                                         stream.child("warmup"), PHIS)
    grid = grid_for_ssm(ssm, 2001)
    phis = {name: test_function(name) for name in ("one", "identity", "square")}
    results = check_conditional_expectations(
        weighted, model, 3, phis, 20000, stream.child("mc"), grid)
    gaps = {name: abs(mc - exact) / se
            for name, (mc, se, exact) in results.items()}
    elapsed = time.perf_counter() - started
    ok = all(g <= 4.0 for g in gaps.values()) and elapsed < 30.0
    detail = ", ".join(f"{name} {g:.2f}se" for name, g in gaps.items())
    report(4, ok, f"conditional-expectation gaps: {detail}, {elapsed:.1f}s", started)


def test_criterion_09_abc_toy(ssm):
    started = time.perf_counter()
    job = AbcReplicateJob(y_obs=1.0, n_particles=4096)
    reps = 12
    values = run_replicates(job, SeededStream(815009), reps, threads=THREADS)
    ref_mean, ref_var = abc_gaussian_posterior(1.0, job.epsilons[-1])
    mean_se = values[:, 0].std(ddof=1) / np.sqrt(reps)
    var_se = values[:, 1].std(ddof=1) / np.sqrt(reps)
    gap_mean = abs(values[:, 0].mean() - ref_mean)
    gap_var = abs(values[:, 1].mean() - ref_var)
    elapsed = time.perf_counter() - started
    ok = gap_mean <= 3 * mean_se and gap_var <= 3 * var_se and elapsed < 60.0
    report(9, ok, f"posterior mean gap {gap_mean:.4f} (3se {3*mean_se:.4f}), "
                  f"variance gap {gap_var:.4f} (3se {3*var_se:.4f}), "
                  f"{elapsed:.1f}s", started)


def test_criterion_10_resampling_law():
    started = time.perf_counter()
    fixtures = {
        "uniform16": np.full(16, 1 / 16),
        "geometric8": 0.7 ** np.arange(8) / np.sum(0.7 ** np.arange(8)),
        "lopsided3": np.array([0.7, 0.2, 0.1]),
    }
    total_draws = 1_000_000
    stream = SeededStream(815010)
    p_values = {}
    for name, weights in fixtures.items():
        k = weights.size
        calls = total_draws // k
        counts = np.zeros(k, dtype=np.int64)
        sub = stream.child(name)
        for r in range(calls):
            counts += np.bincount(multinomial_resample(weights, sub.child(r)),
                                  minlength=k)
        drawn = calls * k
        expected = weights * drawn
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        p_values[name] = float(stats.chi2.sf(chi2, df=k - 1))
    ok = all(p >= 1e-4 for p in p_values.values())
    detail = ", ".join(f"{name} p={p:.3g}" for name, p in p_values.items())
    report(10, ok, f"goodness-of-fit over {total_draws} draws: {detail}", started)


def test_criterion_06_variance_ordering(ssm):
    started = time.perf_counter()
    ordered = compare_variances(ssm, "locally_optimal", "identity", n=2,
                                n_particles=512, replicates=12000,
                                stream=SeededStream(815006), threads=THREADS,
                                with_quadrature=True)
    gap = ordered.entry("path").value - ordered.entry("marginal").value
    pooled = float(np.hypot(ordered.entry("path").se,
                            ordered.entry("marginal").se))
    tied = compare_variances(ssm, "bootstrap", "identity", n=2,
                             n_particles=512, replicates=100,
                             stream=SeededStream(815106), threads=THREADS,
                             with_quadrature=False)
    tie_gap = tied.entry("path").value - tied.entry("marginal").value
    ok = (ordered.verdict == "ordered" and gap > 2 * pooled
          and tied.identical_runs and tie_gap == 0.0)
    report(6, ok, f"path - marginal = {gap:.4f} > 2*pooled = {2*pooled:.4f} "
                  f"[{ordered.verdict}]; bootstrap difference {tie_gap} "
                  f"(bit-identical: {tied.identical_runs})", started)


def test_criterion_07_normalizing_constant(ssm, kalman):
    started = time.perf_counter()
    job = FilterReplicateJob(ssm=ssm, proposal="locally_optimal",
                             n_particles=512, estimator="logz")
    log_z = run_replicates(job, SeededStream(815007), 2000,
                           threads=THREADS)[:, 0]
    ratios = np.exp(log_z - kalman.log_z)
    mean = float(ratios.mean())
    se = float(ratios.std(ddof=1) / np.sqrt(ratios.size))
    ok = abs(mean - 1.0) <= 3 * se
    report(7, ok, f"evidence ratio {mean:.4f} +- {se:.4f} "
                  f"({abs(mean-1.0)/se:.2f}se from 1)", started)


def test_criterion_08_mapf_coherence(ssm, kalman):
    started = time.perf_counter()
    cfg = EngineConfig(256)
    stream = SeededStream(815008)

    mpf = make_mpf(ssm, "locally_optimal")
    unit_model, unit_corr = make_mapf(ssm, "locally_optimal", "unit")
    plain = run_msmc(mpf, cfg, PHIS, stream)
    twisted = run_msmc(unit_model, cfg, PHIS, stream,
                       inferential_log_weight=unit_corr)
    bitwise = all(
        a.estimates_pre == b.estimates_pre
        and a.estimates_post == b.estimates_post
        and a.cumulative_log_z == b.cumulative_log_z
        and b.estimates_inferential == b.estimates_pre
        for a, b in zip(plain.records, twisted.records))

    fa_model, fa_corr = make_mapf(ssm, "locally_optimal", "exact")
    fa_trace = run_msmc(fa_model, cfg, PHIS, stream.child("fa"),
                        inferential_log_weight=fa_corr)
    max_relvar = max(rec.combined_weight_relvar for rec in fa_trace.records)

    truth = float(kalman.filt_mean[-1])
    errors = convergence_errors(ssm, truth, (128, 512, 2048), 150,
                                "mapf-rate", filter_kind="mapf",
                                aux="inflated:2.0", estimator="inferential")
    slope, _ = fit_loglog_slope([(n, rmse) for n, (rmse, _, _) in errors.items()])
    ok = bitwise and max_relvar < 1e-10 and -0.65 <= slope <= -0.35
    report(8, ok, f"unit-twist bitwise: {bitwise}; fully-adapted combined "
                  f"weight relvar {max_relvar:.2e}; inferential error slope "
                  f"{slope:.3f}", started)


def test_criterion_05_variance_cross_checks(ssm):
    started = time.perf_counter()
    sub = ssm.truncated(5)
    grid = grid_for_ssm(sub, 2001)
    model = make_mpf(sub, "locally_optimal")
    flow = grid_filter(model, grid)

    worst_pair = 0.0
    for phi in ("identity", "square"):
        vbar, _ = clt_variance_recursion(model, grid, phi, 5, flow=flow)
        for n in range(6):
            closed = closed_form_variance(model, grid, phi, n, flow=flow)
            worst_pair = max(worst_pair,
                             abs(closed - vbar[n]) / (1.0 + abs(closed)))

    worst_special = 0.0
    for n in (3, 5):
        closed = closed_form_variance(model, grid, "identity", n, flow=flow)
        special = mpf_asymptotic_variance(ssm, "locally_optimal", "identity",
                                          n, grid=grid)
        worst_special = max(worst_special,
                            abs(special - closed) / (1.0 + abs(closed)))

    n_emp = 5
    quad = mpf_asymptotic_variance(ssm, "locally_optimal", "identity", n_emp)
    job = FilterReplicateJob(ssm=ssm.truncated(n_emp),
                             proposal="locally_optimal", n_particles=4096,
                             phi_names=("identity",), estimator="pre")
    est = run_replicates(job, SeededStream(815005), 500, threads=THREADS)[:, 0]
    emp, emp_se = empirical_asymptotic_variance(est, 4096)
    rel_gap = abs(emp - quad) / quad

    ok = worst_pair < 1e-6 and worst_special < 1e-5 and rel_gap < 0.15
    report(5, ok, f"recursion-vs-closed-form {worst_pair:.2e}; "
                  f"specialised-vs-closed-form {worst_special:.2e}; "
                  f"empirical {emp:.4f} (se {emp_se:.4f}) vs quadrature "
                  f"{quad:.4f}, gap {100*rel_gap:.1f}%", started)


def test_criterion_02_consistency_rate(ssm, kalman):
    started = time.perf_counter()
    truth = float(kalman.filt_mean[-1])
    n_list = (128, 512, 2048, 8192)
    errors = convergence_errors(ssm, truth, n_list, 200, "rmse-rate")
    slope, _ = fit_loglog_slope([(n, rmse) for n, (rmse, _, _) in errors.items()])
    shrinks = errors[8192][0] < errors[128][0]
    ok = -0.65 <= slope <= -0.35 and shrinks
    detail = ", ".join(f"rmse({n})={errors[n][0]:.4f}" for n in n_list)
    report(2, ok, f"rmse slope {slope:.3f}; {detail}", started)


def test_criterion_03_bias_rate(ssm, kalman):
    started = time.perf_counter()
    truth = float(kalman.filt_mean[-1])
    n_list = (25, 50, 100, 200, 400)
    replicates = 5000 if SMOKE else 50000
    errors = convergence_errors(ssm, truth, n_list, replicates, "bias-rate")
    biases = {n: errors[n][1] for n in n_list}
    if SMOKE:
        ok = (np.sign(biases[25]) == np.sign(biases[400])
              and abs(biases[400]) < abs(biases[25]))
        detail = (f"smoke profile R={replicates}: bias(25)={biases[25]:+.5f}, "
                  f"bias(400)={biases[400]:+.5f} (sign and shrink only)")
    else:
        slope, _ = fit_loglog_slope([(n, abs(b)) for n, b in biases.items()])
        ok = -1.4 <= slope <= -0.6 and abs(biases[400]) < abs(biases[25]) / 4
        detail = (f"R={replicates}: bias slope {slope:.3f}; "
                  + ", ".join(f"bias({n})={biases[n]:+.5f}" for n in n_list))
    report(3, ok, detail, started)
