"""Mean-field ensemble Kalman filter.

The analysis step pushes the joint (state, observation) forecast through the
affine transport map ``(u, y) -> u + A (y_obs - y)`` whose gain ``A`` is built
from the covariance blocks of that same joint measure. Affine models take a
closed-form Gaussian path; everything else runs on grids, where the joint
cell masses are transported and deposited onto the output grid by
cloud-in-cell splatting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DegenerateGainError, EnkfLabError, TruncationError, UsageError
from .measures import GaussianMeasure, GridMeasure, JointMoments, mean_cov, render
from .model import DataRecord, ModelSpec
from .truefilter import (
    BOUNDARY_TOL,
    GridPolicy,
    _moment_row,
    axes_around,
    lift_grid,
    predict_grid,
    write_diagnostics_csv,
)

GAIN_COND_MAX = 1e12
_DEPOSIT_CHUNK = 1 << 21  # transported points per deposit call


@dataclass(frozen=True, eq=False)
class KalmanGain:
    """Gain ``A = C_uy C_yy^{-1}`` with the joint moments it came from."""

    A: np.ndarray
    source_moments: JointMoments

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.A, 2))

    @property
    def cond_yy(self) -> float:
        return float(np.linalg.cond(self.source_moments.C_yy))


def kalman_gain(moments: JointMoments) -> KalmanGain:
    """Solve ``A C_yy = C_uy`` for the gain.

    Raises
    ------
    DegenerateGainError
        If ``C_yy`` is not positive definite or its condition number exceeds
        ``GAIN_COND_MAX``.
    """
    C_yy = np.atleast_2d(moments.C_yy)
    ev = np.linalg.eigvalsh(0.5 * (C_yy + C_yy.T))
    if not (np.all(np.isfinite(ev)) and ev[0] > 0):
        raise DegenerateGainError("C_yy is not positive definite")
    if ev[-1] / ev[0] > GAIN_COND_MAX:
        raise DegenerateGainError(f"C_yy condition number {ev[-1] / ev[0]:.3g} exceeds {GAIN_COND_MAX:.0e}")
    A = np.linalg.solve(C_yy, np.atleast_2d(moments.C_uy).T).T
    if not np.all(np.isfinite(A)):
        raise DegenerateGainError("gain is not finite")
    return KalmanGain(A, moments)


def transport(u, y, gain: KalmanGain, y_obs):
    """``u + A (y_obs - y)``; rows of ``u`` and ``y`` are transported independently."""
    A = gain.A if isinstance(gain, KalmanGain) else np.atleast_2d(gain)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    return u + (np.atleast_1d(y_obs) - y) @ A.T


# ---------------------------------------------------------------------------
# Gaussian path


def _affine(model: ModelSpec):
    if not model.is_affine:
        raise UsageError("the Gaussian mean-field path needs a model declared affine")
    d, o = model.dynamics, model.observation
    return d.matrix, d.offset, o.matrix, o.offset


def lift_gaussian(mu: GaussianMeasure, model: ModelSpec, predict=True) -> JointMoments:
    """Joint moments of ``Q P mu`` (or ``Q mu`` with ``predict=False``) for an affine model."""
    M, b, H, w = _affine(model)
    if predict:
        m = M @ mu.mean + b
        C = M @ mu.cov @ M.T + model.sigma
    else:
        m, C = mu.mean, mu.cov
    C_uy = C @ H.T
    return JointMoments(m, H @ m + w, C, C_uy, H @ C_uy + model.gamma)


def pushforward_gaussian(joint: JointMoments, gain: KalmanGain, y_obs) -> GaussianMeasure:
    """Law of ``u + A (y_obs - y)`` when ``(u, y)`` is Gaussian with the given moments."""
    A = gain.A
    m = joint.m_u + A @ (np.atleast_1d(y_obs) - joint.m_y)
    AC = A @ joint.C_uy.T
    C = joint.C_uu - AC - AC.T + A @ joint.C_yy @ A.T
    return GaussianMeasure(m, 0.5 * (C + C.T))


def mf_step_gaussian(mu: GaussianMeasure, y_obs, model: ModelSpec) -> GaussianMeasure:
    """One mean-field step for an affine model: transport of the Gaussian ``Q P mu``."""
    joint = lift_gaussian(mu, model)
    return pushforward_gaussian(joint, kalman_gain(joint), y_obs)


@dataclass
class EquivalenceReport:
    """Gaussian conditioning versus transport pushforward of the same joint."""

    conditioned: GaussianMeasure
    transported: GaussianMeasure
    mean_discrepancy: float
    cov_discrepancy: float

    @property
    def discrepancy(self) -> float:
        return max(self.mean_discrepancy, self.cov_discrepancy)


def gaussian_equivalence_check(pi: GaussianMeasure, y_obs, dim_u: int | None = None) -> EquivalenceReport:
    """Compare conditioning of a joint Gaussian on ``y_obs`` with its transport pushforward.

    ``dim_u`` defaults to the joint dimension minus the datum dimension.
    """
    y_obs = np.atleast_1d(np.asarray(y_obs, dtype=float))
    if dim_u is None:
        dim_u = pi.dim - y_obs.size
    joint = JointMoments.from_mean_cov(pi.mean, pi.cov, dim_u)
    gain = kalman_gain(joint)
    A = gain.A
    cm = joint.m_u + A @ (y_obs - joint.m_y)
    cc = joint.C_uu - A @ joint.C_uy.T
    cond = GaussianMeasure(cm, 0.5 * (cc + cc.T))
    pushed = pushforward_gaussian(joint, gain, y_obs)
    return EquivalenceReport(
        cond, pushed,
        float(np.max(np.abs(cond.mean - pushed.mean))),
        float(np.max(np.abs(cond.cov - pushed.cov))),
    )


# ---------------------------------------------------------------------------
# grid path


def lift_moments(pi: GridMeasure) -> JointMoments:
    """Quadrature moments of a joint grid measure, using the tensor structure of its nodes."""
    if pi.split is None:
        raise UsageError("joint moments need a joint measure")
    du = pi.split
    u_shape = tuple(a.n for a in pi.axes[:du])
    y_shape = tuple(a.n for a in pi.axes[du:])
    W = pi.density.reshape(int(np.prod(u_shape)), int(np.prod(y_shape)))
    W = W / np.sum(W)
    U = GridMeasure(pi.axes[:du], np.ones(u_shape), normalize=False).points()
    Y = GridMeasure(pi.axes[du:], np.ones(y_shape), normalize=False).points()
    wu, wy = W.sum(axis=1), W.sum(axis=0)
    m_u, m_y = wu @ U, wy @ Y
    Uc, Yc = U - m_u, Y - m_y
    C_uu = (Uc * wu[:, None]).T @ Uc
    C_yy = (Yc * wy[:, None]).T @ Yc
    C_uy = Uc.T @ (W @ Yc)
    return JointMoments(m_u, m_y, 0.5 * (C_uu + C_uu.T), C_uy, 0.5 * (C_yy + C_yy.T))


def transport_grid(pi: GridMeasure, y_obs, out_axes, gain: KalmanGain | None = None, truncation_tol=BOUNDARY_TOL):
    """Push the joint grid measure through the transport map and splat onto ``out_axes``.

    The gain defaults to the one built from the quadrature moments of ``pi``.
    Returns ``(measure, gain, outside_mass)``; ``measure.raw_mass`` is the
    deposited mass before renormalisation.

    Raises
    ------
    TruncationError
        If more than ``truncation_tol`` of the mass lands outside ``out_axes``.
    """
    if gain is None:
        gain = kalman_gain(lift_moments(pi))
    du = pi.split
    out_axes = tuple(out_axes)
    if len(out_axes) != du:
        raise UsageError("output axes do not match the state dimension")
    u_shape = tuple(a.n for a in pi.axes[:du])
    y_shape = tuple(a.n for a in pi.axes[du:])
    n_u = int(np.prod(u_shape))
    W = pi.density.reshape(n_u, -1) * pi.cell_volume
    U = GridMeasure(pi.axes[:du], np.ones(u_shape), normalize=False).points()
    Y = GridMeasure(pi.axes[du:], np.ones(y_shape), normalize=False).points()
    shift = (np.atleast_1d(y_obs) - Y) @ gain.A.T  # (n_y, d_u)
    lo = np.array([a.lo for a in out_axes])
    step = np.array([a.step for a in out_axes])
    n_out = tuple(a.n for a in out_axes)
    acc = np.zeros(n_out)
    outside = 0.0
    cols = max(1, _DEPOSIT_CHUNK // n_u)
    for start in range(0, Y.shape[0], cols):
        sl = slice(start, start + cols)
        pts = (U[None, :, :] + shift[sl, None, :]).reshape(-1, du)
        mass = np.ascontiguousarray(W[:, sl].T).reshape(-1)
        grid, out = kernels.cic_deposit(pts, mass, lo, step, n_out)
        acc += grid
        outside += out
    total = float(np.sum(W))
    if outside > truncation_tol * total:
        raise TruncationError(f"transport: mass {outside / total:.3g} left the output grid", boundary_mass=outside / total)
    vol = float(np.prod(step))
    return GridMeasure(out_axes, acc / vol), gain, outside / total


def mf_step_grid(mu: GridMeasure, y_obs, model: ModelSpec, out_axes=None, policy: GridPolicy | None = None,
                 boundary_tol=BOUNDARY_TOL):
    """One mean-field step on grids.

    Predicts and lifts ``mu``, builds the gain from the quadrature moments
    of the joint grid, and splats the transported joint cell masses onto
    ``out_axes``. Without ``out_axes`` the policy decides: the fixed box if
    it has one, else axes around the Gaussian projection of the result.

    Returns
    -------
    measure : GridMeasure
    info : dict
        ``forecast`` (the predicted grid), ``joint`` (the lifted grid),
        ``gain`` and ``outside_mass``.
    """
    policy = policy or GridPolicy(n=mu.axes[0].n)
    y_obs = np.atleast_1d(np.asarray(y_obs, dtype=float))
    pred = predict_grid(mu, model, policy.forecast_axes(mu, model), boundary_tol)
    pi = lift_grid(pred, model, policy.observation_axes(pred, model, y_obs), boundary_tol)
    gain = kalman_gain(lift_moments(pi))
    if out_axes is None:
        if policy.fixed:
            out_axes = pred.axes
        else:
            j = gain.source_moments
            m = j.m_u + gain.A @ (y_obs - j.m_y)
            c = j.C_uu - gain.A @ j.C_uy.T
            out_axes = axes_around(m, c, policy.n, policy.width)
    out, gain, outside = transport_grid(pi, y_obs, out_axes, gain, boundary_tol)
    return out, {"forecast": pred, "joint": pi, "gain": gain, "outside_mass": outside}


# ---------------------------------------------------------------------------
# runs


@dataclass
class MeanFieldRun:
    """Mean-field measures ``mu_0..mu_J`` with the per-step forecasts, gains and diagnostics.

    ``representation`` is ``"gaussian"`` or ``"grid"``. Forecasts are
    ``GaussianMeasure`` or ``GridMeasure`` accordingly.
    """

    representation: str
    measures: list
    forecasts: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def forecast_cov(self, j: int) -> np.ndarray:
        """Covariance of the prediction made at step ``j`` (0-based)."""
        return mean_cov(self.forecasts[j])[1]

    def write_csv(self, path):
        write_diagnostics_csv(path, self.diagnostics)


def _gaussian_row(step, g: GaussianMeasure):
    row = {"step": step}
    for k, v in enumerate(g.mean):
        row[f"mean{k}"] = float(v)
    for k in range(g.dim):
        for l in range(k, g.dim):
            row[f"cov{k}{l}"] = float(g.cov[k, l])
    return row


def mf_run(model: ModelSpec, data: DataRecord, policy: GridPolicy | None = None,
           boundary_tol=BOUNDARY_TOL, csv_path=None) -> MeanFieldRun:
    """Run the mean-field filter for ``data.J`` steps.

    Models declared affine take the closed-form Gaussian path; all others
    the grid path under ``policy``. Dispatch follows the declared kind only.
    """
    model.check()
    if model.is_affine:
        g = GaussianMeasure(model.m0, model.c0)
        run = MeanFieldRun("gaussian", [g])
        run.diagnostics.append(dict(_gaussian_row(0, g), gain_norm=0.0, cond_yy=0.0, outside_mass=0.0))
        for j in range(data.J):
            joint = lift_gaussian(g, model)
            gain = kalman_gain(joint)
            g = pushforward_gaussian(joint, gain, data.y(j + 1))
            run.forecasts.append(GaussianMeasure(joint.m_u, joint.C_uu))
            run.gains.append(gain)
            run.measures.append(g)
            run.diagnostics.append(dict(_gaussian_row(j + 1, g), gain_norm=gain.norm, cond_yy=gain.cond_yy,
                                        outside_mass=0.0))
    else:
        policy = policy or GridPolicy()
        mu = render(GaussianMeasure(model.m0, model.c0), policy.initial_axes(model))
        run = MeanFieldRun("grid", [mu])
        run.diagnostics.append(dict(_moment_row(0, mu), mass_defect=0.0, gain_norm=0.0, cond_yy=0.0,
                                    outside_mass=0.0))
        for j in range(data.J):
            try:
                mu, info = mf_step_grid(mu, data.y(j + 1), model, policy=policy, boundary_tol=boundary_tol)
            except EnkfLabError as exc:
                exc.step = j + 1
                exc.args = (f"step {j + 1}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
                raise
            gain = info["gain"]
            run.forecasts.append(info["forecast"])
            run.gains.append(gain)
            run.measures.append(mu)
            run.diagnostics.append(dict(_moment_row(j + 1, mu), mass_defect=1.0 - mu.raw_mass,
                                        gain_norm=gain.norm, cond_yy=gain.cond_yy,
                                        outside_mass=info["outside_mass"]))
    if csv_path is not None:
        run.write_csv(csv_path)
    return run
