import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enkf_lab.errors import DegenerateGainError, TruncationError
from enkf_lab.measures import Axis, GaussianMeasure, JointMoments, axes_box, mean_cov, render, weighted_tv
from enkf_lab.meanfield import (
    gaussian_equivalence_check, kalman_gain, lift_gaussian, lift_moments, mf_run, mf_step_gaussian, mf_step_grid,
    transport, transport_grid,
)
from enkf_lab.model import DataRecord, scalar_model, simulate_truth
from enkf_lab.truefilter import GridPolicy, filter_run, kalman_exact, kalman_predict, lift_grid


def joint(C_uy, C_yy, C_uu=1.0):
    return JointMoments(np.zeros(1), np.zeros(1), np.array([[C_uu]]), np.array([[C_uy]]), np.array([[C_yy]]))


def random_spd_joint(seed, d_u=2, d_y=1):
    rng = np.random.default_rng(seed)
    d = d_u + d_y
    a = rng.standard_normal((d, d))
    c = a @ a.T + rng.uniform(0.05, 1.0) * np.eye(d)
    return GaussianMeasure(rng.standard_normal(d), c), rng.standard_normal(d_y) * 2


# -- gain and transport ----------------------------------------------------

def test_gain_scalar_division():
    assert kalman_gain(joint(1.0, 2.0)).A[0, 0] == 0.5


def test_gain_without_correlation():
    assert kalman_gain(joint(0.0, 2.0)).A[0, 0] == 0.0


def test_gain_matches_kalman_example():
    # forecast N(0, 2) observed through h(u) = u with Gamma = 1
    assert kalman_gain(joint(2.0, 3.0, 2.0)).A[0, 0] == pytest.approx(2 / 3, abs=1e-15)


def test_gain_rejects_singular_and_ill_conditioned_C_yy():
    with pytest.raises(DegenerateGainError):
        kalman_gain(joint(0.0, 0.0))
    bad = JointMoments(np.zeros(1), np.zeros(2), np.eye(1), np.zeros((1, 2)), np.diag([1.0, 1e-13]))
    with pytest.raises(DegenerateGainError):
        kalman_gain(bad)


def test_transport_examples():
    g = kalman_gain(joint(1.0, 2.0))
    assert transport([[1.0]], [[0.5]], g, 1.5)[0, 0] == 1.5
    assert transport([[1.0]], [[1.5]], g, 1.5)[0, 0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_transport_is_affine(alpha, v):
    A = np.array([[0.3], [-1.2]])
    u1, u2 = np.array([v[:2]]), np.array([v[2:4]])
    y1, y2 = np.array([[v[4]]]), np.array([[v[5]]])
    lhs = transport(alpha * u1 + (1 - alpha) * u2, alpha * y1 + (1 - alpha) * y2, A, 0.4)
    rhs = alpha * transport(u1, y1, A, 0.4) + (1 - alpha) * transport(u2, y2, A, 0.4)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# -- Gaussian path ---------------------------------------------------------

def test_gaussian_step_matches_kalman(unit_model):
    out = mf_step_gaussian(GaussianMeasure([0.0], [[1.0]]), [1.0], unit_model)
    assert abs(out.mean[0] - 2 / 3) <= 1e-12
    assert abs(out.cov[0, 0] - 2 / 3) <= 1e-12


def test_gaussian_step_without_observation_returns_forecast():
    model = scalar_model(M=0.7, H=0.0, sigma=0.3)
    mu = GaussianMeasure([1.0], [[2.0]])
    out = mf_step_gaussian(mu, [5.0], model)
    fc = kalman_predict(mu, model)
    np.testing.assert_allclose(out.mean, fc.mean, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.cov, fc.cov, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_gaussian_step_covariance_ignores_datum(y1, y2):
    model = scalar_model(M=0.9, H=1.3)
    mu = GaussianMeasure([0.2], [[1.5]])
    a, b = mf_step_gaussian(mu, [y1], model), mf_step_gaussian(mu, [y2], model)
    np.testing.assert_array_equal(a.cov, b.cov)


def test_lift_gaussian_blocks():
    jm = lift_gaussian(GaussianMeasure([0.0], [[1.0]]), scalar_model(H=2.0, gamma=1.0), predict=False)
    assert jm.C_uy[0, 0] == 2.0 and jm.C_yy[0, 0] == 5.0


# -- conditioning versus transport -----------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3), st.integers(1, 2))
def test_conditioning_equals_transport(seed, d_u, d_y):
    pi, y = random_spd_joint(seed, d_u, d_y)
    assert gaussian_equivalence_check(pi, y).discrepancy <= 1e-10


def test_uncorrelated_joint_gives_state_law():
    pi = GaussianMeasure([1.0, -2.0], [[2.0, 0.0], [0.0, 3.0]])
    rep = gaussian_equivalence_check(pi, [4.0])
    for g in (rep.conditioned, rep.transported):
        assert g.mean[0] == 1.0 and g.cov[0, 0] == 2.0


# -- grid path -------------------------------------------------------------

def test_grid_step_matches_gaussian_step():
    model = scalar_model(M=0.9)
    mu = render(GaussianMeasure([0.3], [[1.0]]), axes_box(-12, 12, 1024))
    out, info = mf_step_grid(mu, [0.8], model, policy=GridPolicy(1024, -12.0, 12.0))
    ref = mf_step_gaussian(GaussianMeasure([0.3], [[1.0]]), [0.8], model)
    m, c = mean_cov(out)
    assert m[0] == pytest.approx(ref.mean[0], abs=1e-4)
    assert c[0, 0] == pytest.approx(ref.cov[0, 0], abs=1e-4)
    assert out.raw_mass == pytest.approx(1.0, abs=1e-6)
    assert info["outside_mass"] <= 1e-8


def test_grid_step_with_zero_gain_returns_forecast():
    model = scalar_model(M=0.8, H=0.0, eps=0.2)
    mu = render(GaussianMeasure([0.5], [[1.0]]), axes_box(-12, 12, 512))
    out, info = mf_step_grid(mu, [1.0], model, policy=GridPolicy(512, -12.0, 12.0))
    assert abs(info["gain"].A[0, 0]) <= 1e-15
    pi_u = info["joint"].state_marginal()
    np.testing.assert_allclose(out.density, pi_u.density / pi_u.mass, rtol=0, atol=1e-8)


def test_lift_moments_agree_with_generic_moments():
    model = scalar_model(H=1.4, obs_eps=0.3)
    pi = lift_grid(render(GaussianMeasure([0.2], [[0.8]]), axes_box(-10, 10, 256)), model)
    fast = lift_moments(pi)
    m, c = mean_cov(pi)
    np.testing.assert_allclose(fast.mean, m, atol=1e-13)
    np.testing.assert_allclose(fast.cov, c, atol=1e-12)


def test_transport_truncation():
    pi = render(GaussianMeasure([0.0, 0.0], [[1.0, 0.8], [0.8, 1.0]]), [Axis(-6, 6, 64)] * 2, split=1)
    with pytest.raises(TruncationError):
        transport_grid(pi, [30.0], [Axis(-6, 6, 64)])


# -- runs ------------------------------------------------------------------

def test_affine_run_is_kalman(affine_model, affine_data):
    run = mf_run(affine_model, affine_data)
    assert run.representation == "gaussian"
    for g, k in zip(run.measures, kalman_exact(affine_model, affine_data)):
        assert np.max(np.abs(g.mean - k.mean)) <= 1e-12
        assert np.max(np.abs(g.cov - k.cov)) <= 1e-12


def test_run_with_no_data_is_prior(affine_model):
    rec = DataRecord(np.zeros((1, 1)), np.zeros((0, 1)))
    run = mf_run(affine_model, rec)
    assert len(run.measures) == 1 and run.measures[0].cov[0, 0] == 1.0


def test_perturbed_run_reports_distance_to_filter(tmp_path):
    model = scalar_model(M=0.8, eps=0.1)
    data = simulate_truth(model, 3, seed=0)
    policy = GridPolicy(512, -12.0, 12.0)
    mf = mf_run(model, data, policy, csv_path=tmp_path / "mf.csv")
    tf = filter_run(model, data, policy)
    assert mf.representation == "grid"
    d = [weighted_tv(a, b) for a, b in zip(mf.measures, tf.measures)]
    assert d[0] == 0.0
    assert all(np.isfinite(d)) and 0 < max(d) < 0.1
    assert (tmp_path / "mf.csv").read_text().count("\n") == 5
