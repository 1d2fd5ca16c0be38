import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enkf_lab.errors import InternalError, UsageError
from enkf_lab.measures import mean_cov
from enkf_lab.model import DataRecord, scalar_model, simulate_truth
from enkf_lab.particle import (
    CoupledState, EnsembleState, UnsupportedCouplingWarning, coupled_run, empirical_gain, enkf_run, enkf_step,
    initial_ensemble, mc_rate_experiment, parallel_map,
)
from enkf_lab.rng import NoiseStreams


def test_parallel_map_preserves_order():
    assert parallel_map(lambda x: x * x, range(50), threads=4) == [x * x for x in range(50)]


# -- initialisation and determinism ----------------------------------------

def test_initial_sample_mean():
    model = scalar_model(m0=1.5, c0=2.0)
    N = 4000
    ens = initial_ensemble(model, N, seed=9)
    assert abs(ens.U.mean() - 1.5) <= 4 * math.sqrt(2.0 / N)


def test_initial_rows_are_prefix_stable():
    model = scalar_model()
    small, big = initial_ensemble(model, 10, 3), initial_ensemble(model, 1000, 3)
    np.testing.assert_array_equal(small.U, big.U[:10])
    assert not np.array_equal(initial_ensemble(model, 10, 3, replicate=1).U, small.U)


def test_run_without_data_is_initial_sample(affine_model):
    rec = DataRecord(np.zeros((1, 1)), np.zeros((0, 1)))
    run = enkf_run(affine_model, rec, 64, seed=2)
    np.testing.assert_array_equal(run.measures[0].particles, initial_ensemble(affine_model, 64, 2).U)


def test_enkf_run_is_deterministic(affine_model, affine_data):
    a = enkf_run(affine_model, affine_data, 128, seed=11)
    b = enkf_run(affine_model, affine_data, 128, seed=11)
    for k in a.observables:
        np.testing.assert_array_equal(a.observables[k], b.observables[k])
    np.testing.assert_array_equal(a.measures[-1].particles, b.measures[-1].particles)
    assert a.p2_violations == {"u0": 0, "u0u0": 0}


def test_invalid_ensemble_size(affine_model):
    with pytest.raises(UsageError):
        initial_ensemble(affine_model, 0, 1)


# -- enkf_step -------------------------------------------------------------

def test_collapsed_ensemble_barely_moves():
    model = scalar_model(M=0.9, sigma=1e-12)
    ens = EnsembleState(np.full((50, 1), 0.7), 0, seed=1)
    out = enkf_step(ens, [3.0], model)
    forecast = model.psi(ens.U) + NoiseStreams(1).gaussian(0, 0, 1, 50, model.chol_sigma)
    assert np.max(np.abs(out.U - forecast)) <= 1e-6


def test_large_observation_noise_shrinks_gain():
    rng = np.random.default_rng(0)
    V = rng.standard_normal((500, 1))
    K1, _ = empirical_gain(V, V, np.array([[0.5e3]]))
    K2, _ = empirical_gain(V, V, np.array([[0.5e9]]))
    # in the large-noise regime the gain is C^uh / Gamma
    assert K2[0, 0] / K1[0, 0] == pytest.approx(1e-6, rel=0.01)
    assert K2[0, 0] == pytest.approx(np.var(V) / 0.5e9, rel=1e-8)


def test_large_observation_noise_shrinks_increment():
    ens = initial_ensemble(scalar_model(), 500, seed=4)
    incs = []
    for gamma in (0.5, 0.5e6):
        model = scalar_model(gamma=gamma)
        forecast = model.psi(ens.U) + NoiseStreams(4).gaussian(0, 0, 1, 500, model.chol_sigma)
        incs.append(np.linalg.norm(enkf_step(ens, [1.0], model).U - forecast))
    # the gain falls like 1/Gamma while the perturbed innovations grow like sqrt(Gamma)
    assert incs[1] / incs[0] == pytest.approx(1e-3, rel=0.5)


def test_large_ensemble_step_matches_kalman(unit_model):
    N = 100_000
    ens = initial_ensemble(unit_model, N, seed=5)
    out = enkf_step(ens, [1.0], unit_model)
    m, c = mean_cov(out.measure)
    var = 2 / 3
    assert abs(m[0] - 2 / 3) <= 3 * math.sqrt(var / N)
    assert abs(c[0, 0] - var) <= 3 * math.sqrt(2.0) * var / math.sqrt(N)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40), st.floats(1e-3, 10.0))
def test_innovation_covariance_dominates_gamma(seed, N, g):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((N, 2)) * 5
    HV = V @ rng.standard_normal((2, 2))
    gamma = g * np.eye(2)
    _, S = empirical_gain(V, HV, gamma)
    assert np.linalg.eigvalsh(S - gamma)[0] >= -1e-10 * np.linalg.norm(S, 2)


def test_single_particle_has_zero_gain():
    ens = EnsembleState([[0.3]], 0, seed=0)
    assert ens.single_particle
    model = scalar_model()
    out = enkf_step(ens, [5.0], model)
    forecast = model.psi(ens.U) + NoiseStreams(0).gaussian(0, 0, 1, 1, model.chol_sigma)
    np.testing.assert_array_equal(out.U, forecast)


def test_mismatched_noise_stream_is_rejected():
    ens = EnsembleState([[0.3], [0.1]], 0, seed=0)
    with pytest.raises(InternalError):
        enkf_step(ens, [1.0], scalar_model(), NoiseStreams(1))


def test_non_finite_particles_are_rejected():
    with pytest.raises(InternalError):
        EnsembleState([[np.nan]], 0, seed=0)


# -- synchronous coupling --------------------------------------------------

def test_coupled_interacting_side_is_the_enkf(affine_model, affine_data):
    run = coupled_run(affine_model, affine_data, 64, seed=6, replicates=2, keep_history=True)
    for r in range(2):
        ref = enkf_run(affine_model, affine_data, 64, seed=6, replicate=r)
        for state, mu in zip(run.history[r], ref.measures):
            np.testing.assert_array_equal(state.interacting.U, mu.particles)


def test_coupling_starts_at_zero_distance(affine_model, affine_data):
    d = coupled_run(affine_model, affine_data, 32, seed=0, replicates=3).diagnostics
    assert np.all(d.D[0] == 0.0)
    assert np.all(d.S[0] == 0.0)
    assert d.Z[0] > 0
    assert d.d(affine_data.J, 2) > 0
    assert set(d.to_dict()) == {"N", "replicates", "ps", "ts", "D", "Z", "S"}


def test_replicas_follow_the_mean_field_gain(affine_model, affine_data):
    """Replicas are independent copies of the mean-field dynamics: their law tracks the Kalman filter."""
    run = coupled_run(affine_model, affine_data, 20000, seed=1, keep_history=True)
    from enkf_lab.truefilter import kalman_exact
    kal = kalman_exact(affine_model, affine_data)
    for state, g in zip(run.history[0], kal):
        m, c = mean_cov(state.replicas.measure)
        assert abs(m[0] - g.mean[0]) <= 5 * math.sqrt(g.cov[0, 0] / 20000)
        assert c[0, 0] == pytest.approx(g.cov[0, 0], rel=0.05)


def test_coupled_run_is_thread_independent(affine_model, affine_data):
    a = coupled_run(affine_model, affine_data, 64, seed=3, replicates=6, threads=1).diagnostics
    b = coupled_run(affine_model, affine_data, 64, seed=3, replicates=6, threads=3).diagnostics
    assert a.to_dict() == b.to_dict()


def test_nonlinear_observation_warns():
    model = scalar_model(obs_eps=0.1)
    data = simulate_truth(model, 2, 0)
    from enkf_lab.truefilter import GridPolicy
    with pytest.warns(UnsupportedCouplingWarning):
        coupled_run(model, data, 16, seed=0, policy=GridPolicy(256, -10.0, 10.0))


def test_coupled_state_consistency():
    a = EnsembleState([[0.0]], 1, seed=0)
    b = EnsembleState([[0.0]], 2, seed=0)
    with pytest.raises(InternalError):
        CoupledState(a, b, NoiseStreams(0))


# -- Monte Carlo rate experiment -------------------------------------------

def test_constant_observable_has_zero_error(affine_model, affine_data):
    rep = mc_rate_experiment(affine_model, affine_data, [8, 16, 32], 4, observables=("one",))
    assert np.all(rep.rmse["one"] == 0.0)
    assert rep.fits["one"] is None


def test_rate_needs_three_sizes(affine_model, affine_data):
    with pytest.raises(UsageError):
        mc_rate_experiment(affine_model, affine_data, [8, 16], 4)


@pytest.mark.slow
def test_more_replicates_narrow_the_interval():
    model = scalar_model(M=0.9)
    data = simulate_truth(model, 5, 0)
    Ns = [64, 128, 256, 512, 1024, 2048]
    width = []
    for R in (100, 200):
        rep = mc_rate_experiment(model, data, Ns, R, observables=("u0",), reference="kalman", threads=4)
        fit = rep.fits["u0"]
        assert fit.ci[0] <= fit.slope <= fit.ci[1]
        width.append(fit.ci[1] - fit.ci[0])
    assert width[0] / width[1] == pytest.approx(math.sqrt(2), rel=0.3)


def test_rate_report_rows(affine_model, affine_data):
    rep = mc_rate_experiment(affine_model, affine_data, [4, 8, 16], 2, observables=("u0",))
    rows = list(rep.rows())
    assert len(rows) == 3 * 2 * (affine_data.J + 1)
    assert rows[0][:4] == (0, 0, 4, "u0")
    assert rep.summary()["reference"] == "kalman"
