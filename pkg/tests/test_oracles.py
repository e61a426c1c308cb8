import numpy as np
import pytest

from marginalsmc.filters import (
    LinearGaussianSSM,
    fixture_lgssm,
    make_bpf,
    make_mpf,
)
from marginalsmc.model import MarginalModel, ModelStep
from marginalsmc.numerics import Grid1D, trapezoid_integrate
from marginalsmc.oracles import (
    conditional_kalman_coefficients,
    conditional_loglik_quadratic,
    exact_marginal_weight,
    gaussian_logpdf,
    grid_filter,
    grid_for_ssm,
    kalman_filter,
)


def test_kalman_symmetric_update():
    # predictive N(0,1), c=1, sigma_y=1, y=0 -> filtering N(0, 1/2)
    ssm = LinearGaussianSSM(a=1.0, sigma_x=1e-12, c=1.0, sigma_y=1.0,
                            m0=0.0, s0=1.0, ys=(0.0,))
    trace = kalman_filter(ssm)
    assert trace.filt_mean[1] == pytest.approx(0.0, abs=1e-12)
    assert trace.filt_var[1] == pytest.approx(0.5, rel=1e-9)


def test_kalman_predict_step():
    # filtering N(1,1), a=0.9, sigma_x^2=1 -> predictive N(0.9, 1.81)
    ssm = LinearGaussianSSM(a=0.9, sigma_x=1.0, c=1.0, sigma_y=1.0,
                            m0=1.0, s0=1.0, ys=(0.0,))
    trace = kalman_filter(ssm)
    assert trace.pred_mean[1] == pytest.approx(0.9, abs=1e-14)
    assert trace.pred_var[1] == pytest.approx(1.81, abs=1e-14)


def test_kalman_logz_is_sum_of_increments():
    trace = kalman_filter(fixture_lgssm())
    assert trace.log_z == pytest.approx(float(trace.loglik_increments.sum()), abs=1e-12)
    assert np.all(trace.filt_var > 0) and np.all(trace.smooth_var > 0)


def test_kalman_smoother_matches_filter_at_final_step():
    trace = kalman_filter(fixture_lgssm())
    assert trace.smooth_mean[-1] == pytest.approx(trace.filt_mean[-1], abs=0)
    assert trace.smooth_var[-1] == pytest.approx(trace.filt_var[-1], abs=0)


def test_grid_filter_matches_kalman_on_fixture():
    ssm = fixture_lgssm()
    grid = grid_for_ssm(ssm, n_points=2001)
    flow = grid_filter(make_mpf(ssm, "locally_optimal"), grid)
    trace = kalman_filter(ssm)
    means = np.array([d.mean() for d in flow.updated])
    variances = np.array([d.moment2() for d in flow.updated]) - means**2
    assert np.max(np.abs(means - trace.filt_mean)) < 1e-6
    assert np.max(np.abs(variances - trace.filt_var)) < 1e-6
    assert abs(flow.log_z - trace.log_z) < 1e-6


def test_grid_filter_is_proposal_independent():
    ssm = fixture_lgssm().truncated(4)
    grid = grid_for_ssm(ssm, n_points=1201)
    flow_a = grid_filter(make_mpf(ssm, "locally_optimal"), grid)
    flow_b = grid_filter(make_bpf(ssm), grid)
    for da, db in zip(flow_a.updated, flow_b.updated):
        np.testing.assert_allclose(da.values, db.values, rtol=1e-9, atol=1e-12)
    assert flow_a.log_z == pytest.approx(flow_b.log_z, abs=1e-10)


def test_grid_filter_pure_diffusion_is_gaussian_convolution():
    # potentials = 1, random-walk kernel: step-n target is N(m0, s0^2 + n sx^2)
    base = LinearGaussianSSM(a=1.0, sigma_x=1.0, c=1.0, sigma_y=1.0,
                             m0=0.0, s0=1.0, ys=(0.0, 0.0, 0.0))
    model = make_bpf(base)
    free_steps = [ModelStep(s.proposal, s.kernel,
                            model.steps[0].potential) for s in model.steps]
    diffusion = MarginalModel(tuple(free_steps), dim=1, potential_ignores_prev=True)
    grid = Grid1D.regular(-18.0, 18.0, 2401)
    flow = grid_filter(diffusion, grid)
    for n, dens in enumerate(flow.updated):
        var = base.s0**2 + n * base.sigma_x**2
        expected = np.exp(gaussian_logpdf(grid.points, base.m0, var))
        np.testing.assert_allclose(dens.values, expected, atol=1e-9)
    assert flow.log_z == pytest.approx(0.0, abs=1e-9)


def test_grid_filter_sharp_observation_concentrates():
    ssm = LinearGaussianSSM(a=0.9, sigma_x=1.0, c=2.0, sigma_y=1e-3,
                            m0=0.0, s0=1.0, ys=(1.7,))
    grid = grid_for_ssm(ssm, n_points=4001)
    flow = grid_filter(make_bpf(ssm), grid)
    mode = grid.points[np.argmax(flow.updated[1].values)]
    cell = grid.points[1] - grid.points[0]
    assert abs(mode - ssm.ys[0] / ssm.c) <= cell


def test_grid_filter_normalization_per_step():
    ssm = fixture_lgssm()
    flow = grid_filter(make_mpf(ssm, "locally_optimal"), grid_for_ssm(ssm, 2001))
    for dens in flow.updated:
        assert dens.integral() == pytest.approx(1.0, abs=1e-8)
    for dens in flow.predictive:
        assert dens.integral() == pytest.approx(1.0, abs=1e-8)


def test_grid_filter_warns_on_narrow_grid():
    ssm = fixture_lgssm().truncated(3)
    narrow = Grid1D.regular(-1.0, 1.0, 301)
    with pytest.warns(RuntimeWarning):
        grid_filter(make_bpf(ssm), narrow)


def test_exact_weight_bootstrap_is_likelihood():
    ssm = fixture_lgssm()
    grid = grid_for_ssm(ssm, 1501)
    flow = grid_filter(make_bpf(ssm), grid)
    model = make_bpf(ssm)
    for x in (-0.5, 0.3, 1.1):
        value = exact_marginal_weight(model, flow.updated[0], 1, x)
        expected = np.exp(gaussian_logpdf(ssm.ys[0], ssm.c * x, ssm.sigma_y**2))
        assert value == pytest.approx(float(expected), rel=1e-10)


def test_exact_weight_spike_ancestor():
    ssm = fixture_lgssm()
    grid = grid_for_ssm(ssm, 1501)
    model = make_mpf(ssm, "locally_optimal")
    x0 = 0.4
    log_spike = np.full(len(grid), -np.inf)
    idx = int(np.argmin(np.abs(grid.points - x0)))
    log_spike[idx] = -np.log(grid.weights[idx])
    from marginalsmc.oracles import GridDensity

    spike = GridDensity(grid, log_spike, normalized=True)
    got = exact_marginal_weight(model, spike, 1, 0.9)
    x0_snap = grid.points[idx]
    step = model.step(1)
    xq = np.array([[0.9]])
    xp = np.array([[x0_snap]])
    expected = np.exp(float(step.potential.log_u(xp, xq)[0])
                      + float(step.kernel.log_density(xp, xq)[0])
                      - float(step.proposal.log_density(xp, xq)[0]))
    assert got == pytest.approx(expected, rel=1e-12)


def test_exact_weight_integral_identity():
    # eta_n(G_n) equals the one-step update integral of the potential
    ssm = fixture_lgssm().truncated(4)
    grid = grid_for_ssm(ssm, 1501)
    model = make_mpf(ssm, "locally_optimal")
    flow = grid_filter(model, grid)
    n = 3
    g_vals = np.array([exact_marginal_weight(model, flow.updated[n - 1], n, x)
                       for x in grid.points])
    eta_g = trapezoid_integrate(flow.predictive[n].values * g_vals, grid)
    step = model.step(n)
    xp = grid.points.reshape(-1, 1, 1)
    xq = grid.points.reshape(1, -1, 1)
    ku = np.exp(np.asarray(step.kernel.log_density(xp, xq))
                + np.asarray(step.potential.log_u(xp, xq)))
    inner = ku @ grid.weights
    expected = trapezoid_integrate(flow.updated[n - 1].values * inner, grid)
    assert eta_g == pytest.approx(expected, rel=1e-8)
    assert eta_g == pytest.approx(np.exp(flow.log_increments[n]), rel=1e-8)


def test_grid_density_csv_export(tmp_path):
    ssm = fixture_lgssm().truncated(1)
    flow = grid_filter(make_bpf(ssm), grid_for_ssm(ssm, 501))
    path = tmp_path / "density.csv"
    flow.updated[1].to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "point,density"
    assert len(lines) == 502
    first_point = float(lines[1].split(",")[0])
    assert first_point == flow.grid.points[0] if hasattr(flow, "grid") else True


def test_conditional_kalman_consistency():
    ssm = fixture_lgssm()
    # conditioning on nothing reproduces the unconditional filter moments
    trace = kalman_filter(ssm)
    alpha, beta, var = conditional_kalman_coefficients(ssm, 0, 4)
    # starting from the prior mean/variance: filtering mean at step 4 is
    # E[alpha x0 + beta] with x0 ~ prior only when conditioning is exact;
    # here just check the degenerate and one-step cases instead.
    a1, b1, v1 = conditional_kalman_coefficients(ssm, 3, 3)
    assert (a1, b1, v1) == (1.0, 0.0, 0.0)
    a2, b2, v2 = conditional_kalman_coefficients(ssm, 3, 4)
    s = ssm.c**2 * ssm.sigma_x**2 + ssm.sigma_y**2
    gain = ssm.sigma_x**2 * ssm.c / s
    assert a2 == pytest.approx((1 - gain * ssm.c) * ssm.a, rel=1e-12)
    assert v2 == pytest.approx((1 - gain * ssm.c) * ssm.sigma_x**2, rel=1e-12)
    # the log-likelihood quadratic integrates to the Kalman evidence
    q2, q1, q0 = conditional_loglik_quadratic(ssm, 0, ssm.horizon)
    grid = grid_for_ssm(ssm, 4001)
    prior = np.exp(gaussian_logpdf(grid.points, ssm.m0, ssm.s0**2))
    like = np.exp(q2 * grid.points**2 + q1 * grid.points + q0)
    evidence = trapezoid_integrate(prior * like, grid)
    assert np.log(evidence) == pytest.approx(trace.log_z, abs=1e-9)
