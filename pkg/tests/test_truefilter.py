import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enkf_lab.errors import OutOfRangeError, TruncationError, UsageError
from enkf_lab.measures import (
    Axis, GaussianMeasure, GridMeasure, axes_box, joint_blocks, mean_cov, render, weighted_tv,
)
from enkf_lab.model import DataRecord, scalar_model, simulate_truth
from enkf_lab.truefilter import (
    GridPolicy, analysis_fused, condition, condition_lifted, filter_run, kalman_exact, lattice_axis, lift_grid,
    observation_axes, predict_grid,
)

BOX = axes_box(-12, 12, 1024)


def gauss(m, c):
    return GaussianMeasure(np.atleast_1d(m), np.atleast_2d(c))


def moments(mu):
    m, c = mean_cov(mu)
    return float(m[0]), float(c[0, 0])


# -- prediction ------------------------------------------------------------

def test_zero_dynamics_predicts_sigma():
    model = scalar_model(M=0.0, sigma=1.0)
    mu = render(gauss(2.0, 0.3), BOX)
    out = predict_grid(mu, model)
    expected = render(gauss(0.0, 1.0), BOX)
    assert np.max(np.abs(out.density - expected.density)) <= 1e-8


def test_identity_dynamics_convolves():
    model = scalar_model(M=1.0, sigma=1.0)
    out = predict_grid(render(gauss(0.0, 1.0), BOX), model)
    m, c = moments(out)
    assert abs(m) <= 1e-10
    assert c == pytest.approx(2.0, abs=1e-6)


def test_prediction_mass_before_renormalisation():
    out = predict_grid(render(gauss(0.5, 1.0), BOX), scalar_model(M=0.9))
    assert out.raw_mass == pytest.approx(1.0, abs=1e-6)


def test_prediction_truncation_is_reported():
    box = axes_box(-3, 3, 256)
    with pytest.raises(TruncationError) as err:
        predict_grid(render(gauss(0.0, 1.0), box), scalar_model(M=1.0, sigma=1.0))
    assert err.value.boundary_mass > 1e-8


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.95, 0.95), st.floats(0.1, 1.0), st.floats(-1.0, 1.0))
def test_prediction_matches_gaussian_closed_form(M, sigma, m0):
    model = scalar_model(M=M, sigma=sigma)
    out = predict_grid(render(gauss(m0, 1.0), BOX), model)
    m, c = moments(out)
    assert m == pytest.approx(M * m0, abs=1e-9)
    assert c == pytest.approx(M * M + sigma, abs=1e-8)


# -- lift ------------------------------------------------------------------

def test_lift_marginals():
    model = scalar_model(H=1.5, w=0.2, gamma=0.7, eps=0.0, obs_eps=0.3)
    nu = render(gauss(0.3, 1.2), axes_box(-10, 10, 512))
    pi = lift_grid(nu, model)
    assert np.max(np.abs(pi.state_marginal().density - nu.density)) <= 1e-8
    jm = joint_blocks(pi)
    h_mean = float(model.h(nu.points())[:, 0] @ nu.weights())
    assert jm.m_y[0] == pytest.approx(h_mean, abs=1e-8)


def test_lift_covariance_for_identity_observation():
    model = scalar_model(H=1.0, gamma=1.0)
    pi = lift_grid(render(gauss(0.0, 1.0), axes_box(-10, 10, 512)), model)
    assert joint_blocks(pi).C_yy[0, 0] == pytest.approx(2.0, abs=1e-6)


def test_lift_covariance_for_scaled_observation():
    model = scalar_model(H=2.0, gamma=1.0)
    jm = joint_blocks(lift_grid(render(gauss(0.0, 1.0), axes_box(-10, 10, 512)), model))
    assert jm.C_uy[0, 0] == pytest.approx(2.0, abs=1e-6)
    assert jm.C_yy[0, 0] == pytest.approx(5.0, abs=1e-6)


def test_lattice_axes_nest_under_halving():
    a = lattice_axis(-3.3, 4.1, 0.25)
    b = lattice_axis(-3.3, 4.1, 0.125)
    assert a.lo <= -3.3 and a.hi >= 4.1
    np.testing.assert_allclose(a.nodes / 0.25, np.round(a.nodes / 0.25), atol=1e-12)
    inside = a.nodes[(a.nodes >= b.nodes[0]) & (a.nodes <= b.nodes[-1])]
    assert set(np.round(inside, 12)) <= set(np.round(b.nodes, 12))


def test_observation_axes_contain_datum():
    model = scalar_model()
    nu = render(gauss(0.0, 1.0), axes_box(-8, 8, 128))
    (ax,) = observation_axes(nu, model, 0.125, y_obs=[40.0])
    assert ax.nodes[0] < 40.0 < ax.nodes[-1]


# -- conditioning ----------------------------------------------------------

def test_conditioning_a_product_returns_the_state_factor():
    ax = Axis(-8, 8, 256)
    nu = render(gauss(0.5, 1.3), [ax])
    rho = render(gauss(0.0, 2.0), [ax])
    pi = GridMeasure([ax, ax], np.outer(nu.density, rho.density), split=1)
    for y in (-3.0, 0.0, 2.71):
        assert np.max(np.abs(condition(pi, y).density - nu.density)) <= 1e-10


def test_conditioning_a_joint_gaussian():
    ax = Axis(-12, 12, 1024)
    pi = render(GaussianMeasure([0.0, 0.0], [[2.0, 1.0], [1.0, 2.0]]), [ax, ax], split=1)
    m, c = moments(condition(pi, 1.0))
    assert m == pytest.approx(0.5, abs=1e-4)
    assert c == pytest.approx(1.5, abs=1e-4)


def test_conditioning_ignores_joint_scale_and_repeats():
    ax = Axis(-8, 8, 256)
    pi = render(GaussianMeasure([0.0, 0.0], [[2.0, 1.0], [1.0, 2.0]]), [ax, ax], split=1)
    post = condition(pi, 0.7)
    scaled = GridMeasure(pi.axes, 3.0 * pi.density, split=1, normalize=False)
    np.testing.assert_allclose(condition(scaled, 0.7).density, post.density, rtol=1e-12)
    rho = render(gauss(0.0, 1.0), [ax])
    again = condition(GridMeasure([ax, ax], np.outer(post.density, rho.density), split=1), 0.7)
    np.testing.assert_allclose(again.density, post.density, rtol=1e-10, atol=1e-14)


def test_datum_outside_observation_grid():
    ax = Axis(-4, 4, 64)
    pi = render(GaussianMeasure([0.0, 0.0], np.eye(2)), [ax, ax], split=1)
    with pytest.raises(OutOfRangeError):
        condition(pi, 5.0)
    with pytest.raises(UsageError):
        condition(render(gauss(0.0, 1.0), [ax]), 0.0)


def test_flat_likelihood_leaves_prior():
    model = scalar_model(gamma=1e6)
    nu = render(gauss(0.2, 0.8), axes_box(-10, 10, 512))
    post, _ = analysis_fused(nu, 1.0, model)
    assert np.max(np.abs(post.density - nu.density)) <= 1e-6


def test_fused_one_step_matches_kalman(one_step_record):
    model = scalar_model(M=1.0, sigma=1.0, gamma=1.0)
    run = filter_run(model, one_step_record, GridPolicy(2048, -12.0, 12.0), analysis="fused")
    m, c = moments(run.measures[1])
    assert m == pytest.approx(2 / 3, abs=1e-5)
    assert c == pytest.approx(2 / 3, abs=1e-5)


def test_fused_and_composed_agree_to_interpolation_error():
    model = scalar_model(M=0.8, eps=0.2)
    nu = render(gauss(0.1, 1.5), axes_box(-12, 12, 1024))
    step = nu.axes[0].step
    y_axes = observation_axes(nu, model, step, y_obs=[0.917])
    fused, _ = analysis_fused(nu, 0.917, model)
    composed, _ = condition_lifted(nu, 0.917, model, y_axes)
    assert weighted_tv(fused, composed) <= 2 * step
    full = condition(lift_grid(nu, model, y_axes), 0.917)
    np.testing.assert_allclose(full.density, composed.density, rtol=1e-12, atol=1e-15)


# -- filter_run ------------------------------------------------------------

def test_filter_run_with_no_data_renders_prior():
    model = scalar_model(m0=0.3, c0=2.0)
    rec = DataRecord(np.zeros((1, 1)), np.zeros((0, 1)))
    policy = GridPolicy(256, -10, 10)
    run = filter_run(model, rec, policy)
    assert len(run.measures) == 1
    np.testing.assert_array_equal(run.measures[0].density, render(gauss(0.3, 2.0), axes_box(-10, 10, 256)).density)


@pytest.mark.parametrize("analysis", ["composed", "fused"])
def test_filter_run_tracks_kalman(affine_model, analysis):
    data = simulate_truth(affine_model, 4, seed=1)
    run = filter_run(affine_model, data, GridPolicy(4096, -12.0, 12.0), analysis=analysis)
    for mu, g in zip(run.measures, kalman_exact(affine_model, data)):
        m, c = moments(mu)
        assert m == pytest.approx(g.mean[0], abs=1e-5)
        assert c == pytest.approx(g.cov[0, 0], abs=1e-5)


def test_adaptive_grids_track_kalman(affine_model):
    data = simulate_truth(affine_model, 4, seed=2)
    run = filter_run(affine_model, data, GridPolicy(1024))
    m, c = moments(run.measures[-1])
    g = kalman_exact(affine_model, data)[-1]
    assert m == pytest.approx(g.mean[0], abs=1e-4)
    assert c == pytest.approx(g.cov[0, 0], abs=1e-4)


def test_second_moments_obey_the_one_step_recursion():
    """M_2(post) <= M_2(P mu) / Z, with M_2(P mu) <= 2 kappa^2 (1 + M_2(mu)) + tr Sigma."""
    model = scalar_model(M=0.8, eps=0.3, sigma=0.5, gamma=0.5)
    data = simulate_truth(model, 8, seed=4)
    run = filter_run(model, data, GridPolicy(1024, -14.0, 14.0), analysis="fused")
    kappa = model.dynamics.kappa
    for j in range(1, data.J + 1):
        prev, cur = run.diagnostics[j - 1], run.diagnostics[j]
        bound = (2 * kappa ** 2 * (1 + prev["m2"]) + 0.5) / cur["normalizer"]
        assert math.isfinite(cur["m2"]) and cur["m2"] <= bound


def test_diagnostics_csv(tmp_path, affine_model):
    data = simulate_truth(affine_model, 2, seed=0)
    path = tmp_path / "diag.csv"
    filter_run(affine_model, data, GridPolicy(256, -10, 10), csv_path=path)
    raw = path.read_bytes()
    assert raw.count(b"\r\n") == 4
    rows = list(csv.DictReader(open(path, newline="")))
    assert [r["step"] for r in rows] == ["0", "1", "2"]
    assert {"mean0", "cov00", "m2", "m4", "boundary_mass", "normalizer"} <= set(rows[0])


def test_filter_error_names_the_step(affine_model):
    data = simulate_truth(affine_model, 3, seed=0)
    with pytest.raises(TruncationError) as err:
        filter_run(affine_model, data, GridPolicy(128, -2.5, 2.5))
    assert err.value.step == 1


def test_unknown_analysis(affine_model, affine_data):
    with pytest.raises(UsageError):
        filter_run(affine_model, affine_data, analysis="direct")


# -- Kalman recursion ------------------------------------------------------

def test_kalman_hand_computed_posterior(unit_model, one_step_record):
    post = kalman_exact(unit_model, one_step_record)[1]
    assert post.mean[0] == pytest.approx(2 / 3, abs=1e-15)
    assert post.cov[0, 0] == pytest.approx(2 / 3, abs=1e-15)


def test_kalman_without_information(one_step_record):
    model = scalar_model(M=1.0, H=0.0, sigma=1.0, gamma=1.0)
    post, fc = kalman_exact(model, one_step_record, return_forecasts=True)
    np.testing.assert_array_equal(post[1].mean, fc[0].mean)
    np.testing.assert_array_equal(post[1].cov, fc[0].cov)


def test_kalman_small_noise_limit(one_step_record):
    errs, covs = [], []
    for g in (1.0, 0.1, 0.01):
        post = kalman_exact(scalar_model(M=1.0, sigma=1.0, gamma=g), one_step_record)[1]
        errs.append(abs(post.mean[0] - 1.0))
        covs.append(post.cov[0, 0])
    assert errs[0] > errs[1] > errs[2] and covs[0] > covs[1] > covs[2]
    assert covs[2] < 0.01


def test_kalman_needs_affine_model(affine_data):
    with pytest.raises(UsageError):
        kalman_exact(scalar_model(eps=0.1), affine_data)
