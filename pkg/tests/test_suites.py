import pytest

from enkf_lab.errors import UsageError
from enkf_lab.suites import EPS_SLOPE_BAND, SUITES, run_suite, run_suites


ASSERTED = sorted(set(SUITES) - {"transport_stability"})


@pytest.mark.parametrize("name", ASSERTED)
def test_suite_smoke(name):
    res = run_suite(name, instances=4, seed=1)
    assert res.instances == 4 and res.comparisons > 0
    assert res.violations == 0, res.to_dict()
    assert res.passed


def test_transport_stability_is_reported_only():
    res = run_suite("transport_stability", instances=3, seed=0)
    assert res.comparisons == 0
    assert res.measured["L"]["max"] > 0


def test_suites_do_not_depend_on_threads():
    a = run_suite("psd_gap", instances=6, seed=2, threads=1)
    b = run_suite("psd_gap", instances=6, seed=2, threads=3)
    assert a.to_dict() == b.to_dict()


def test_eps_slopes_reported_in_band():
    res = run_suite("eps_linearity", instances=5, seed=0)
    lo, hi = EPS_SLOPE_BAND
    assert lo <= res.measured["slopes"]["min"] and res.measured["slopes"]["max"] <= hi


def test_unknown_suite():
    with pytest.raises(UsageError):
        run_suite("triangle", instances=1)


def test_run_suites_order():
    names = ["lift_moments", "prediction_moments"]
    assert [r.name for r in run_suites(names, instances=2)] == names
