"""Grid propagation of the filtering distribution and the exact Kalman recursion.

One filtering step is prediction through the Gaussian Markov kernel, lifting to
the joint (state, observation) space, and conditioning on the datum. The
prediction is a dense quadrature of the kernel against the current density;
conditioning interpolates linearly between the two observation planes that
bracket the datum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DegenerateLikelihoodError, EnkfLabError, OutOfRangeError, TruncationError, UsageError
from .measures import Axis, GaussianMeasure, GridMeasure, mean_cov, moment_q, render
from .model import DataRecord, ModelSpec

BOUNDARY_TOL = 1e-8


def _whiten(cov):
    chol = np.linalg.cholesky(cov)
    inv = np.linalg.inv(chol)
    norm = 1.0 / math.sqrt((2 * math.pi) ** cov.shape[0] * np.linalg.det(cov))
    return inv, norm


def axes_around(mean, cov, n, width=8.0):
    """Axes spanning ``mean +/- width * sqrt(max eigenvalue of cov)`` in every direction."""
    mean = np.atleast_1d(mean)
    half = width * math.sqrt(float(np.max(np.linalg.eigvalsh(np.atleast_2d(cov)))))
    return tuple(Axis(m - half, m + half, n) for m in mean)


@dataclass(frozen=True)
class GridPolicy:
    """How grids are laid out.

    With ``lo``/``hi`` set every state grid is the fixed box ``[lo, hi]^d_u``.
    Otherwise each prediction grid is centred on the exact forecast mean with
    half-width ``width`` standard deviations. Observation grids cover the
    image of the support under h, widened by ``width`` observation-noise
    standard deviations, and always contain the datum. Observation nodes are
    the multiples of ``y_step`` (default: the finest state spacing), so
    halving the spacing nests the nodes.
    """

    n: int = 256
    lo: float | None = None
    hi: float | None = None
    width: float = 8.0
    y_step: float | None = None

    @property
    def fixed(self) -> bool:
        return self.lo is not None and self.hi is not None

    def initial_axes(self, model: ModelSpec):
        if self.fixed:
            return tuple(Axis(self.lo, self.hi, self.n) for _ in range(model.dim_u))
        return axes_around(model.m0, model.c0, self.n, self.width)

    def forecast_axes(self, mu: GridMeasure, model: ModelSpec):
        if self.fixed:
            return tuple(Axis(self.lo, self.hi, self.n) for _ in range(model.dim_u))
        m, c = forecast_moments(mu, model)
        return axes_around(m, c, self.n, self.width)

    def observation_axes(self, nu: GridMeasure, model: ModelSpec, y_obs=None):
        step = self.y_step if self.y_step is not None else min(a.step for a in nu.axes)
        return observation_axes(nu, model, step, self.width, y_obs)

    def to_dict(self):
        return {"n": self.n, "lo": self.lo, "hi": self.hi, "width": self.width, "y_step": self.y_step}


def forecast_moments(mu: GridMeasure, model: ModelSpec):
    """Exact mean and covariance of the prediction of ``mu``: ``mu[Psi]`` and ``Cov_mu(Psi) + Sigma``."""
    w = mu.weights()
    f = model.psi(mu.points())
    m = w @ f
    d = f - m
    return m, (d * w[:, None]).T @ d + model.sigma


def lattice_axis(a: float, b: float, step: float) -> Axis:
    """Axis whose nodes are the multiples of ``step`` covering ``[a, b]``.

    Nodes on a fixed lattice make successive halvings of ``step`` nested.
    """
    k_lo = math.floor(a / step)
    k_hi = math.ceil(b / step)
    return Axis((k_lo - 0.5) * step, (k_hi + 0.5) * step, k_hi - k_lo + 1)


def observation_axes(nu: GridMeasure, model: ModelSpec, step: float, width=8.0, y_obs=None, support_rtol=1e-16):
    """Lattice-aligned observation axes covering ``h(support of nu)`` widened by ``width`` noise std devs."""
    w = nu.density.reshape(-1)
    hv = model.h(nu.points()[w > support_rtol * np.max(w)])
    pad = width * math.sqrt(float(np.max(np.linalg.eigvalsh(model.gamma))))
    lo, hi = hv.min(axis=0) - pad, hv.max(axis=0) + pad
    if y_obs is not None:
        y_obs = np.atleast_1d(y_obs)
        lo = np.minimum(lo, y_obs - pad)
        hi = np.maximum(hi, y_obs + pad)
    return tuple(lattice_axis(a, b, step) for a, b in zip(lo, hi))


def _check_boundary(mu: GridMeasure, tol, what):
    b = mu.boundary_mass()
    if b > tol:
        raise TruncationError(f"{what}: boundary mass {b:.3g} exceeds {tol:.1g}", boundary_mass=b)
    return b


def predict_grid(mu: GridMeasure, model: ModelSpec, out_axes=None, boundary_tol=BOUNDARY_TOL) -> GridMeasure:
    """Apply the Markov kernel ``N(Psi(v), Sigma)`` to the density by quadrature over the input grid.

    The returned measure is renormalised; its ``raw_mass`` is the mass before
    renormalisation.
    """
    if mu.dim != model.dim_u:
        raise UsageError("measure dimension does not match the state dimension")
    out_axes = mu.axes if out_axes is None else tuple(out_axes)
    whiten, norm = _whiten(model.check().sigma)
    w = mu.density.reshape(-1) * mu.cell_volume
    keep = w > 0
    centers = model.psi(mu.points()[keep])
    target = GridMeasure(out_axes, np.zeros(tuple(a.n for a in out_axes)), normalize=False)
    vals = kernels.gaussian_mixture_density(target.points(), centers, w[keep], whiten, norm)
    out = GridMeasure(out_axes, vals.reshape(target.density.shape))
    _check_boundary(out, boundary_tol, "prediction")
    return out


def _likelihood_weights(points_u, ys, model: ModelSpec):
    """``N(y; h(u), Gamma)`` for every (u, y) pair, shape ``(n_u, n_y)``."""
    whiten, norm = _whiten(model.check().gamma)
    hu = model.h(points_u) @ whiten.T
    yw = np.atleast_2d(ys) @ whiten.T
    d2 = np.zeros((hu.shape[0], yw.shape[0]))
    for k in range(hu.shape[1]):
        diff = hu[:, k:k + 1] - yw[None, :, k]
        d2 += diff * diff
    return norm * np.exp(-0.5 * d2)


def lift_grid(nu: GridMeasure, model: ModelSpec, y_axes=None, boundary_tol=BOUNDARY_TOL) -> GridMeasure:
    """Joint density ``nu(u) N(y; h(u), Gamma)`` on the product of the state and observation grids."""
    if y_axes is None:
        y_axes = observation_axes(nu, model, min(a.step for a in nu.axes))
    y_axes = tuple(y_axes)
    if len(y_axes) != model.dim_y:
        raise UsageError("observation axes do not match d_y")
    ygrid = GridMeasure(y_axes, np.zeros(tuple(a.n for a in y_axes)), normalize=False)
    lik = _likelihood_weights(nu.points(), ygrid.points(), model)
    dens = nu.density.reshape(-1, 1) * lik
    joint = GridMeasure(nu.axes + y_axes, dens.reshape(nu.density.shape + ygrid.density.shape),
                        split=nu.dim, normalize=False)
    ymarg = joint.marginal(range(nu.dim, joint.dim))
    _check_boundary(ymarg, boundary_tol, "lift (observation axes)")
    return joint


def _bracket(y_axes, y_obs):
    """Per observation axis: lower node index and interpolation fraction."""
    y_obs = np.atleast_1d(np.asarray(y_obs, dtype=float))
    if y_obs.size != len(y_axes):
        raise UsageError("datum dimension does not match the observation axes")
    out = []
    for a, y in zip(y_axes, y_obs):
        s = (y - a.lo) / a.step - 0.5
        if not (0.0 <= s <= a.n - 1):
            raise OutOfRangeError(f"datum {y:.6g} outside observation grid nodes [{a.nodes[0]:.6g}, {a.nodes[-1]:.6g}]")
        k = min(int(math.floor(s)), a.n - 2)
        out.append((k, s - k))
    return out


def _interpolated_slice(planes_fn, y_axes, y_obs):
    brackets = _bracket(y_axes, y_obs)
    d = len(brackets)
    acc = None
    for corner in range(1 << d):
        idx, wt = [], 1.0
        for k, (i, t) in enumerate(brackets):
            bit = (corner >> k) & 1
            idx.append(i + bit)
            wt *= t if bit else 1.0 - t
        if wt == 0.0:
            continue
        plane = wt * planes_fn(tuple(idx))
        acc = plane if acc is None else acc + plane
    return acc


def _normalise_slice(axes, slab):
    vol = float(np.prod([a.step for a in axes]))
    z = float(np.sum(slab) * vol)
    if not z > 1e-300:
        raise DegenerateLikelihoodError("conditioning denominator vanished")
    return GridMeasure(axes, slab / z, normalize=False), z


def condition(pi: GridMeasure, y_obs) -> GridMeasure:
    """Restrict a joint density to the datum and renormalise.

    The slice is linearly interpolated between the bracketing observation
    planes, multilinearly when d_y > 1.
    """
    if pi.split is None:
        raise UsageError("condition needs a joint measure")
    u_axes, y_axes = pi.axes[:pi.split], pi.axes[pi.split:]

    def plane(idx):
        return pi.density[(Ellipsis,) + idx]

    out, _ = _normalise_slice(u_axes, _interpolated_slice(plane, y_axes, y_obs))
    return out


def condition_lifted(nu: GridMeasure, y_obs, model: ModelSpec, y_axes):
    """``condition(lift_grid(nu, model, y_axes), y_obs)`` evaluating only the bracketing planes.

    Returns the posterior and the slice normaliser.
    """
    y_axes = tuple(y_axes)
    pts = nu.points()
    dens = nu.density.reshape(-1)

    def plane(idx):
        y = np.array([a.nodes[i] for a, i in zip(y_axes, idx)])
        return (dens * _likelihood_weights(pts, y, model)[:, 0]).reshape(nu.density.shape)

    return _normalise_slice(nu.axes, _interpolated_slice(plane, y_axes, y_obs))


def analysis_fused(nu: GridMeasure, y_obs, model: ModelSpec):
    """Pointwise likelihood reweighting ``exp(-|y - h(u)|^2_Gamma / 2) nu(u)``, renormalised.

    Returns the posterior and the normaliser ``int exp(...) nu``.
    """
    whiten = np.linalg.inv(np.linalg.cholesky(model.check().gamma))
    r = (np.atleast_1d(y_obs)[None, :] - model.h(nu.points())) @ whiten.T
    lik = np.exp(-0.5 * np.sum(r * r, axis=1))
    slab = nu.density * lik.reshape(nu.density.shape)
    return _normalise_slice(nu.axes, slab)


@dataclass
class FilterRun:
    """Measures ``mu_0..mu_J``, predictions ``P mu_0..P mu_{J-1}`` and per-step diagnostics."""

    measures: list
    forecasts: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def write_csv(self, path):
        write_diagnostics_csv(path, self.diagnostics)


def _moment_row(step, mu):
    m, c = mean_cov(mu)
    row = {"step": step}
    for k, v in enumerate(m):
        row[f"mean{k}"] = float(v)
    for k in range(c.shape[0]):
        for l in range(k, c.shape[1]):
            row[f"cov{k}{l}"] = float(c[k, l])
    row["m2"] = moment_q(mu, 2, check=False)
    row["m4"] = moment_q(mu, 4, check=False)
    return row


def write_diagnostics_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys, lineterminator="\r\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def filter_run(model: ModelSpec, data: DataRecord, policy: GridPolicy | None = None,
               analysis: str = "composed", boundary_tol=BOUNDARY_TOL, csv_path=None) -> FilterRun:
    """Propagate the filtering distribution on grids for ``data.J`` steps.

    ``analysis="composed"`` conditions the lifted joint density (interpolated
    observation slice); ``"fused"`` reweights by the likelihood directly.
    """
    if analysis not in ("composed", "fused"):
        raise UsageError("analysis must be 'composed' or 'fused'")
    policy = policy or GridPolicy()
    model.check()
    mu = render(GaussianMeasure(model.m0, model.c0), policy.initial_axes(model))
    run = FilterRun([mu])
    run.diagnostics.append(dict(_moment_row(0, mu), mass_defect=0.0, boundary_mass=mu.boundary_mass(),
                                normalizer=1.0))
    for j in range(data.J):
        y = data.y(j + 1)
        try:
            pred = predict_grid(mu, model, policy.forecast_axes(mu, model), boundary_tol)
            if analysis == "composed":
                y_axes = policy.observation_axes(pred, model, y)
                mu, z = condition_lifted(pred, y, model, y_axes)
            else:
                mu, z = analysis_fused(pred, y, model)
        except EnkfLabError as exc:
            exc.step = j + 1
            exc.args = (f"step {j + 1}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        run.forecasts.append(pred)
        run.measures.append(mu)
        run.diagnostics.append(dict(_moment_row(j + 1, mu), mass_defect=1.0 - pred.raw_mass,
                                    boundary_mass=mu.boundary_mass(), normalizer=z))
    if csv_path is not None:
        run.write_csv(csv_path)
    return run


# ---------------------------------------------------------------------------
# exact Kalman recursion


def _affine_parts(model: ModelSpec):
    if not model.is_affine:
        raise UsageError("the exact Kalman recursion needs affine dynamics and observation")
    d, o = model.dynamics, model.observation
    return d.matrix, d.offset, o.matrix, o.offset


def kalman_predict(g: GaussianMeasure, model: ModelSpec) -> GaussianMeasure:
    M, b, _, _ = _affine_parts(model)
    return GaussianMeasure(M @ g.mean + b, M @ g.cov @ M.T + model.sigma)


def kalman_update(pred: GaussianMeasure, y_obs, model: ModelSpec) -> GaussianMeasure:
    _, _, H, w = _affine_parts(model)
    C = pred.cov
    S = H @ C @ H.T + model.gamma
    K = np.linalg.solve(S, H @ C).T
    m = pred.mean + K @ (np.atleast_1d(y_obs) - H @ pred.mean - w)
    P = C - K @ H @ C
    return GaussianMeasure(m, 0.5 * (P + P.T))


def kalman_exact(model: ModelSpec, data: DataRecord, return_forecasts=False):
    """Kalman filter means/covariances ``mu_0..mu_J`` (optionally with the forecasts)."""
    _affine_parts(model)
    g = GaussianMeasure(model.m0, model.c0)
    out, fc = [g], []
    for j in range(data.J):
        pred = kalman_predict(g, model)
        g = kalman_update(pred, data.y(j + 1), model)
        fc.append(pred)
        out.append(g)
    return (out, fc) if return_forecasts else out
