"""Randomized inequality suites for the prediction, lift, conditioning and transport operators.

Each suite draws independent instances (random models in the bounded
perturbation class and random grid or particle measures), evaluates both
sides of an inequality, and counts violations beyond a small numerical
slack. Matrix inequalities ``A <= B`` are tested through the smallest
eigenvalue of ``B - A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .measures import Axis, GridMeasure, moment_q, mean_cov, weighted_tv
from .meanfield import kalman_gain, lift_moments, transport_grid
from .model import AFFINE, AFFINE_PLUS_BOUNDED, PERTURBATIONS, ModelSpec, VectorFieldSpec
from .particle import parallel_map
from .truefilter import analysis_fused, lattice_axis, lift_grid, observation_axes, predict_grid

SLACK = 1e-10
EPS_SLOPE_BAND = (0.85, 1.15)
_BOXES = {1: (14.0, 512), 2: (12.0, 64)}


@dataclass
class SuiteResult:
    """Outcome of one suite.

    ``worst`` is the largest scaled excess ``(lhs - rhs) / max(1, |rhs|)``
    seen over all comparisons; a negative value means every inequality held
    with room to spare. ``measured`` holds suite-specific reported values.
    """

    name: str
    instances: int
    comparisons: int
    violations: int
    worst: float
    measured: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self):
        return {"name": self.name, "instances": self.instances, "comparisons": self.comparisons,
                "violations": self.violations, "worst": self.worst, "passed": self.passed,
                "measured": self.measured}


class _Ledger:
    def __init__(self):
        self.count = 0
        self.violations = 0
        self.worst = -math.inf

    def _record(self, excess):
        self.count += 1
        self.worst = max(self.worst, excess)
        if not excess <= SLACK:
            self.violations += 1

    def le(self, lhs, rhs):
        lhs, rhs = float(lhs), float(rhs)
        self._record((lhs - rhs) / max(1.0, abs(rhs)))

    def psd_le(self, A, B):
        """``A <= B`` in the Loewner order, with slack scaled by ``||B||``."""
        A, B = np.atleast_2d(A), np.atleast_2d(B)
        D = B - A
        gap = float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])
        self._record(-gap / max(1.0, float(np.linalg.norm(B, 2))))


# ---------------------------------------------------------------------------
# random instances


def _spd(rng, d, lo, hi):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    c = q @ np.diag(rng.uniform(lo, hi, d)) @ q.T
    return 0.5 * (c + c.T)


def _matrix(rng, rows, cols, max_norm):
    a = rng.uniform(-1.0, 1.0, (rows, cols))
    n = float(np.linalg.norm(a, 2))
    return a * (rng.uniform(0.1, max_norm) / n) if n > 0 else a


def random_model(rng, d_u=1, d_y=1, eps_max=0.5, obs_eps_max=0.3, dyn_eps=None) -> ModelSpec:
    """Random model in the bounded-perturbation class with moderate growth."""
    names = sorted(PERTURBATIONS)
    eps = rng.uniform(0.0, eps_max) if dyn_eps is None else dyn_eps
    dyn = VectorFieldSpec(_matrix(rng, d_u, d_u, 1.1 if d_u == 1 else 0.9), rng.uniform(-0.5, 0.5, d_u),
                          kind=AFFINE_PLUS_BOUNDED if eps > 0 else AFFINE, eps=eps,
                          perturbation=names[rng.integers(len(names))])
    oeps = rng.uniform(0.0, obs_eps_max)
    obs = VectorFieldSpec(_matrix(rng, d_y, d_u, 1.5), rng.uniform(-0.5, 0.5, d_y),
                          kind=AFFINE_PLUS_BOUNDED if oeps > 0 else AFFINE, eps=oeps,
                          perturbation=names[rng.integers(len(names))])
    return ModelSpec(dyn, obs, _spd(rng, d_u, 0.3, 1.0), _spd(rng, d_y, 0.3, 1.2),
                     np.zeros(d_u), np.eye(d_u))


def box_axes(d):
    half, n = _BOXES[d]
    return tuple(Axis(-half, half, n) for _ in range(d))


def random_grid_measure(rng, axes, components=None) -> GridMeasure:
    """Normalised mixture of 1-3 Gaussians with centres in [-1.5, 1.5]^d."""
    d = len(axes)
    k = components or int(rng.integers(1, 4))
    w = rng.dirichlet(np.ones(k))
    pts = GridMeasure(axes, np.ones(tuple(a.n for a in axes)), normalize=False).points()
    dens = np.zeros(pts.shape[0])
    for c in range(k):
        m = rng.uniform(-1.5, 1.5, d)
        cov = _spd(rng, d, 0.16, 0.64)
        r = np.linalg.solve(np.linalg.cholesky(cov), (pts - m).T)
        dens += w[c] * np.exp(-0.5 * np.sum(r * r, axis=0)) / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))
    return GridMeasure(axes, dens.reshape(tuple(a.n for a in axes)))


def _dim(i):
    # every fourth instance is two-dimensional
    return 2 if i % 4 == 3 else 1


def _common_y_axes(nus, model):
    step = min(a.step for a in nus[0].axes)
    ax = [observation_axes(nu, model, step) for nu in nus]
    return tuple(lattice_axis(min(a[k].nodes[0] for a in ax), max(a[k].nodes[-1] for a in ax), step)
                 for k in range(model.dim_y))


# ---------------------------------------------------------------------------
# suites; each takes (rng, instance index, ledger, measured) and evaluates one instance


def _prediction_moments(rng, i, led, meas):
    d = _dim(i)
    model = random_model(rng, d_u=d)
    mu = random_grid_measure(rng, box_axes(d))
    pm = predict_grid(mu, model)
    k = model.dynamics.kappa
    m1, m2 = moment_q(mu, 1, check=False), moment_q(mu, 2, check=False)
    m, c = mean_cov(pm)
    led.le(np.linalg.norm(m), k * (1 + m1))
    led.psd_le(model.sigma, c)
    led.psd_le(c, model.sigma + 2 * k * k * (1 + m2) * np.eye(d))


def _lift_moments(rng, i, led, meas):
    d = _dim(i)
    model = random_model(rng, d_u=d)
    mu = random_grid_measure(rng, box_axes(d))
    pm = predict_grid(mu, model)
    pi = lift_grid(pm, model, _common_y_axes([pm], model))
    jm = lift_moments(pi)
    kp, kh = model.dynamics.kappa, model.observation.kappa
    m1, m2 = moment_q(mu, 1, check=False), moment_q(mu, 2, check=False)
    sig = float(np.linalg.eigvalsh(model.sigma)[0])
    gam = float(np.linalg.eigvalsh(model.gamma)[0])
    r = 1 + np.trace(model.sigma) + 2 * kp * kp * (1 + m2)
    dy = model.dim_y
    led.le(np.linalg.norm(jm.m_u), kp * (1 + m1))
    led.le(np.linalg.norm(jm.m_y), kh * math.sqrt(2 * r))
    upper = np.zeros((d + dy, d + dy))
    upper[:d, :d] = 4 * kp * kp * (1 + m2) * np.eye(d) + 2 * model.sigma
    upper[d:, d:] = 4 * kh * kh * r * np.eye(dy) + model.gamma
    led.psd_le(jm.cov, upper)
    lower = gam * min(2 * sig, gam + 4 * kh * kh * r) / (2 * gam + 8 * kh * kh * r)
    led.psd_le(lower * np.eye(d + dy), jm.cov)
    led.psd_le(model.gamma, jm.C_yy)


def _dg_moment_bounds(rng, i, led, meas):
    axes = box_axes(_dim(i))
    mu1, mu2 = random_grid_measure(rng, axes), random_grid_measure(rng, axes)
    dg = weighted_tv(mu1, mu2)
    a, ca = mean_cov(mu1)
    b, cb = mean_cov(mu2)
    led.le(np.linalg.norm(a - b), 0.5 * dg)
    led.le(np.linalg.norm(ca - cb, 2), (1 + 0.5 * np.linalg.norm(a + b)) * dg)


def _psd_gap(rng, i, led, meas):
    d = int(rng.integers(1, 5))
    X = rng.standard_normal((int(rng.integers(2, 60)), d)) * rng.uniform(0.1, 3.0, d) + rng.uniform(-3, 3, d)
    a = rng.uniform(-4, 4, d)
    m = X.mean(axis=0)
    second = (X - a).T @ (X - a) / X.shape[0]
    cov = (X - m).T @ (X - m) / X.shape[0]
    led.psd_le(cov, second)


def _moment_recursions(rng, i, led, meas):
    model = random_model(rng, d_u=1)
    axes = box_axes(1)
    mu = random_grid_measure(rng, axes)
    for j in range(3):
        y = rng.uniform(-3.0, 3.0, model.dim_y)
        pm = predict_grid(mu, model)
        # conditioning can only shrink moments by the normaliser
        post, z = analysis_fused(pm, y, model)
        for q in (2, 4):
            led.le(moment_q(post, q, check=False), moment_q(pm, q, check=False) / z)
        # transport: Minkowski bound on the exact pushforward of the joint cells
        pi = lift_grid(pm, model, _common_y_axes([pm], model))
        gain = kalman_gain(lift_moments(pi))
        w = pi.weights()
        pts = pi.points()
        u, yy = pts[:, :1], pts[:, 1:]
        moved = u + (y - yy) @ gain.A.T
        An = gain.norm
        for q in (2, 4):
            lhs = (w @ np.sum(moved ** 2, axis=1) ** (q / 2)) ** (1 / q)
            mu_q = (w @ np.sum(u ** 2, axis=1) ** (q / 2)) ** (1 / q)
            my_q = (w @ np.sum(yy ** 2, axis=1) ** (q / 2)) ** (1 / q)
            led.le(lhs, mu_q + An * (np.linalg.norm(y) + my_q))
        mu = post


def _lipschitz_P(rng, i, led, meas):
    d = _dim(i)
    model = random_model(rng, d_u=d)
    axes = box_axes(d)
    mu, nu = random_grid_measure(rng, axes), random_grid_measure(rng, axes)
    L = 1 + 2 * model.dynamics.kappa ** 2 + np.trace(model.sigma)
    lhs = weighted_tv(predict_grid(mu, model), predict_grid(nu, model))
    dg = weighted_tv(mu, nu)
    led.le(lhs, L * dg)
    meas.setdefault("ratio_over_bound", []).append(lhs / (L * dg))


def _lipschitz_Q(rng, i, led, meas):
    d = _dim(i)
    model = random_model(rng, d_u=d)
    axes = box_axes(d)
    mu, nu = random_grid_measure(rng, axes), random_grid_measure(rng, axes)
    ya = _common_y_axes([mu, nu], model)
    L = 1 + 2 * model.observation.kappa ** 2 + np.trace(model.gamma)
    lhs = weighted_tv(lift_grid(mu, model, ya), lift_grid(nu, model, ya))
    dg = weighted_tv(mu, nu)
    led.le(lhs, L * dg)
    meas.setdefault("ratio_over_bound", []).append(lhs / (L * dg))


_EPS = (0.0025, 0.005, 0.01, 0.02)


def _eps_linearity(rng, i, led, meas):
    model = random_model(rng, d_u=1, dyn_eps=0.1)
    axes = box_axes(1)
    mu = random_grid_measure(rng, axes)
    p0 = predict_grid(mu, model.with_eps(0.0))
    dg = [weighted_tv(p0, predict_grid(mu, model.with_eps(e))) for e in _EPS]
    slope = float(np.polyfit(np.log(_EPS), np.log(dg), 1)[0])
    led.le(EPS_SLOPE_BAND[0], slope)
    led.le(slope, EPS_SLOPE_BAND[1])
    m2 = moment_q(mu, 2, check=False)
    meas.setdefault("slopes", []).append(slope)
    meas.setdefault("constant", []).append(max(v / (e * (1 + m2)) for v, e in zip(dg, _EPS)))


def _transport_stability(rng, i, led, meas):
    # reported, not asserted: d_g(T pi, T p) / d_g(pi, p) for joints of one model
    model = random_model(rng, d_u=1)
    axes = box_axes(1)
    mu, nu = random_grid_measure(rng, axes), random_grid_measure(rng, axes)
    ya = _common_y_axes([mu, nu], model)
    pi, p = lift_grid(mu, model, ya), lift_grid(nu, model, ya)
    y = rng.uniform(-2.0, 2.0, model.dim_y)
    wide = (Axis(-40.0, 40.0, 2048),)
    a = transport_grid(pi, y, wide, truncation_tol=1.0)[0]
    b = transport_grid(p, y, wide, truncation_tol=1.0)[0]
    meas.setdefault("L", []).append(weighted_tv(a, b) / weighted_tv(pi, p))


SUITES = {
    "prediction_moments": _prediction_moments,
    "lift_moments": _lift_moments,
    "dg_moment_bounds": _dg_moment_bounds,
    "psd_gap": _psd_gap,
    "moment_recursions": _moment_recursions,
    "lipschitz_prediction": _lipschitz_P,
    "lipschitz_lift": _lipschitz_Q,
    "eps_linearity": _eps_linearity,
    "transport_stability": _transport_stability,
}


def _summarise(meas):
    out = {}
    for k, v in meas.items():
        v = np.asarray(v, dtype=float)
        out[k] = {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean())}
    return out


def run_suite(name: str, instances: int = 100, seed: int = 0, threads=1) -> SuiteResult:
    """Evaluate ``instances`` random instances of one suite.

    Instance ``i`` draws from its own generator keyed by ``(seed, suite, i)``,
    so results do not depend on ``threads``.
    """
    if name not in SUITES:
        raise UsageError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    fn = SUITES[name]
    key = sorted(SUITES).index(name)

    def one(i):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 30, key, i]))
        led, meas = _Ledger(), {}
        fn(rng, i, led, meas)
        return led, meas

    parts = parallel_map(one, range(instances), threads)
    count = sum(p[0].count for p in parts)
    viol = sum(p[0].violations for p in parts)
    worst = max((p[0].worst for p in parts), default=-math.inf)
    merged = {}
    for _, meas in parts:
        for k, v in meas.items():
            merged.setdefault(k, []).extend(v)
    return SuiteResult(name, instances, count, viol, worst, _summarise(merged))


def run_suites(names=None, instances: int = 100, seed: int = 0, threads=1) -> list:
    names = list(SUITES) if names is None else list(names)
    return [run_suite(n, instances, seed, threads) for n in names]
