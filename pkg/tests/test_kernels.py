import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enkf_lab import _kernels_py, kernels

compiled = pytest.importorskip("enkf_lab._kernels")


def _mixture_case(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, (300, d))
    c = rng.uniform(-5, 5, (80, d))
    w = rng.uniform(0, 1, 80)
    w[::7] = 0.0
    a = rng.standard_normal((d, d))
    whiten = np.linalg.inv(np.linalg.cholesky(a @ a.T + np.eye(d)))
    return x, c, w, whiten, 0.37


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3))
def test_mixture_backends_agree(seed, d):
    args = _mixture_case(seed, d)
    a = _kernels_py.gaussian_mixture_density(*args)
    b = compiled.gaussian_mixture_density(*args)
    np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-300)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3))
def test_deposit_backends_agree(seed, d):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-6, 6, (500, d))
    m = rng.uniform(0, 1, 500)
    lo, step, n = np.full(d, -5.0), np.full(d, 0.5), (20,) * d
    ga, oa = _kernels_py.cic_deposit(pts, m, lo, step, n)
    gb, ob = compiled.cic_deposit(pts, m, lo, step, n)
    np.testing.assert_allclose(gb, ga, rtol=1e-12, atol=1e-14)
    assert ob == pytest.approx(oa, rel=1e-12, abs=1e-14)
    assert gb.sum() + ob == pytest.approx(m.sum(), rel=1e-12)


def test_deposit_on_nodes_is_exact():
    nodes = -5.0 + 0.5 * (np.arange(20) + 0.5)
    g, out = kernels.cic_deposit(nodes[:, None], np.ones(20), np.array([-5.0]), np.array([0.5]), (20,))
    np.testing.assert_array_equal(g, np.ones(20))
    assert out == 0.0


def test_deposit_splits_linearly():
    g, out = kernels.cic_deposit(np.array([[0.6]]), np.array([1.0]), np.array([0.0]), np.array([1.0]), (3,))
    np.testing.assert_allclose(g, [0.9, 0.1, 0.0])
    assert out == 0.0


def test_compiled_backend_is_default():
    if os.environ.get("ENKF_LAB_PURE_PYTHON", "") in ("", "0"):
        assert kernels.BACKEND == "cython"


def test_environment_forces_fallback():
    code = "from enkf_lab import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, ENKF_LAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_fallback_filter_matches_compiled():
    code = (
        "from enkf_lab.model import scalar_model, simulate_truth\n"
        "from enkf_lab.truefilter import GridPolicy, filter_run\n"
        "from enkf_lab.meanfield import mf_run\n"
        "m = scalar_model(M=0.8, eps=0.2); d = simulate_truth(m, 3, 0); p = GridPolicy(256, -10.0, 10.0)\n"
        "print(repr(float(filter_run(m, d, p).diagnostics[-1]['mean0'])))\n"
        "print(repr(float(mf_run(m, d, p).diagnostics[-1]['mean0'])))\n"
    )
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, ENKF_LAB_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        outs.append([float(v) for v in res.stdout.split()])
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-12, atol=1e-15)
