"""Finite-particle ensemble Kalman filter and its synchronous coupling to the mean field.

Every particle consumes the noise stored at its row of the block addressed by
``(seed, replicate, step, role)``; the dynamics noise of the transition out of
step ``j`` lives at step ``j`` and the observation noise of the datum at step
``j + 1`` lives at step ``j + 1``. The mean-field replicas of a coupled run
read exactly the same rows, which is what makes the coupling synchronous.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InternalError, UsageError
from .measures import EmpiricalMeasure, expectation, observable
from .meanfield import MeanFieldRun, mf_run
from .model import DataRecord, ModelSpec
from .rates import RateFit, fit_rate
from .rng import NoiseStreams, Role
from .truefilter import GridPolicy, filter_run, kalman_exact

DEFAULT_OBSERVABLES = ("u0", "u0u0")


class UnsupportedCouplingWarning(UserWarning):
    """The coupling estimate is outside the setting where its rate is known (nonlinear h)."""


def parallel_map(fn, items, threads=1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True, eq=False)
class EnsembleState:
    """Particles ``U`` (N x d_u) at ``step`` with their stream coordinates."""

    U: np.ndarray
    step: int
    seed: int
    replicate: int = 0

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if not np.all(np.isfinite(U)):
            raise InternalError("ensemble has non-finite particles")
        object.__setattr__(self, "U", U)

    @property
    def N(self) -> int:
        return self.U.shape[0]

    @property
    def single_particle(self) -> bool:
        """N = 1: the gain is still defined (C^hh = 0) but carries no ensemble information."""
        return self.N == 1

    @property
    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.U)


def initial_ensemble(model: ModelSpec, N: int, seed: int, replicate: int = 0) -> EnsembleState:
    """N iid draws from the initial law."""
    if N < 1:
        raise UsageError("N must be at least 1")
    z = NoiseStreams(seed).gaussian(replicate, 0, Role.INIT, N, model.check().chol_c0)
    return EnsembleState(model.m0 + z, 0, seed, replicate)


def _noises(model, noise: NoiseStreams, replicate, step, N):
    xi = noise.gaussian(replicate, step, Role.XI, N, model.chol_sigma)
    eta = noise.gaussian(replicate, step + 1, Role.ETA, N, model.chol_gamma)
    return xi, eta


def empirical_gain(V, HV, gamma):
    """``C^uh (C^hh + Gamma)^{-1}`` from forecast particles with 1/N covariances.

    Returns the gain and ``C^hh + Gamma``.
    """
    N = V.shape[0]
    dv = V - V.mean(axis=0)
    dh = HV - HV.mean(axis=0)
    C_uh = dv.T @ dh / N
    S = dh.T @ dh / N + gamma
    S = 0.5 * (S + S.T)
    floor = float(np.linalg.eigvalsh(gamma)[0])
    if np.linalg.eigvalsh(S)[0] < floor * (1.0 - 1e-10):
        raise InternalError("C^hh + Gamma fell below the smallest eigenvalue of Gamma")
    try:
        K = np.linalg.solve(S, C_uh.T).T
    except np.linalg.LinAlgError as exc:
        raise InternalError(f"gain solve failed: {exc}") from exc
    return K, S


def enkf_step(ens: EnsembleState, y_obs, model: ModelSpec, noise: NoiseStreams | None = None) -> EnsembleState:
    """Forecast, simulate data, and apply the empirical Kalman update to every particle."""
    noise = noise or NoiseStreams(ens.seed)
    if noise.seed != ens.seed:
        raise InternalError("noise stream seed does not match the ensemble")
    xi, eta = _noises(model.check(), noise, ens.replicate, ens.step, ens.N)
    V = model.psi(ens.U) + xi
    HV = model.h(V)
    K, _ = empirical_gain(V, HV, model.gamma)
    U = V + (np.atleast_1d(y_obs) - HV - eta) @ K.T
    return EnsembleState(U, ens.step + 1, ens.seed, ens.replicate)


@dataclass
class EnkfRun:
    """Empirical measures ``mu_0..mu_J`` and observable trajectories ``{name: (J+1,) array}``.

    ``p2_violations`` counts, per observable, particle states at which its
    declared growth bound failed.
    """

    measures: list
    observables: dict
    p2_violations: dict


def enkf_run(model: ModelSpec, data: DataRecord, N: int, seed: int, replicate: int = 0,
             observables=DEFAULT_OBSERVABLES, keep_measures=True) -> EnkfRun:
    """Run the ensemble Kalman filter for ``data.J`` steps from N iid initial draws."""
    phis = [observable(name) for name in observables]
    noise = NoiseStreams(seed)
    ens = initial_ensemble(model, N, seed, replicate)
    traj = {p.name: np.empty(data.J + 1) for p in phis}
    viol = {p.name: 0 for p in phis}
    measures = []

    def record(e):
        m = e.measure
        for p in phis:
            traj[p.name][e.step] = expectation(m, p)
            viol[p.name] += p.growth_violations(e.U)
        if keep_measures:
            measures.append(m)

    record(ens)
    for j in range(data.J):
        ens = enkf_step(ens, data.y(j + 1), model, noise)
        record(ens)
    return EnkfRun(measures, traj, viol)


# ---------------------------------------------------------------------------
# synchronous coupling


@dataclass(frozen=True, eq=False)
class CoupledState:
    """Interacting particles and their mean-field replicas sharing one noise stream."""

    interacting: EnsembleState
    replicas: EnsembleState
    noise: NoiseStreams

    def __post_init__(self):
        a, b = self.interacting, self.replicas
        if (a.step, a.replicate, a.seed, a.N) != (b.step, b.replicate, b.seed, b.N) or a.seed != self.noise.seed:
            raise InternalError("interacting and replica streams are out of step")


@dataclass
class ChaosDiagnostics:
    """Coupling diagnostics over steps ``0..J``.

    ``D[j, k]`` estimates ``(E|u_j - ubar_j|^p)^{1/p}`` for ``p = ps[k]``,
    averaging over particles and replicates before taking the root.
    ``Z[j]`` is the replicate mean of the operator-norm distance between the
    empirical covariance of the replica forecast and the mean-field forecast
    covariance (at ``j = 0``: the replica ensemble against the initial law).
    ``S[j, k]`` estimates ``(E|y_j - h(vbar_j) - eta_j|^t)^{1/t}`` for
    ``t = ts[k]``; there is no datum at step 0 and ``S[0] = 0``.
    """

    N: int
    replicates: int
    ps: tuple
    ts: tuple
    D: np.ndarray
    Z: np.ndarray
    S: np.ndarray

    def d(self, j: int, p: float) -> float:
        return float(self.D[j, self.ps.index(p)])

    def to_dict(self):
        return {"N": self.N, "replicates": self.replicates, "ps": list(self.ps), "ts": list(self.ts),
                "D": self.D.tolist(), "Z": self.Z.tolist(), "S": self.S.tolist()}


@dataclass
class CoupledRun:
    diagnostics: ChaosDiagnostics
    meanfield: MeanFieldRun
    history: list = field(default_factory=list)


def _coupled_replicate(model, data, N, seed, r, mf, ps, ts, keep):
    noise = NoiseStreams(seed)
    ens = initial_ensemble(model, N, seed, r)
    state = CoupledState(ens, ens, noise)
    J = data.J
    dsum = np.zeros((J + 1, len(ps)))
    z = np.zeros(J + 1)
    ssum = np.zeros((J + 1, len(ts)))
    z[0] = np.linalg.norm(np.atleast_2d(np.cov(ens.U.T, bias=True)) - model.c0, 2)
    hist = [state] if keep else []
    for j in range(J):
        a, b = state.interacting, state.replicas
        y = data.y(j + 1)
        xi, eta = _noises(model, noise, r, j, N)
        V = model.psi(a.U) + xi
        HV = model.h(V)
        K, _ = empirical_gain(V, HV, model.gamma)
        U = V + (y - HV - eta) @ K.T
        Vb = model.psi(b.U) + xi
        innov = y - model.h(Vb) - eta
        Ub = Vb + innov @ mf.gains[j].A.T
        state = CoupledState(EnsembleState(U, j + 1, seed, r), EnsembleState(Ub, j + 1, seed, r), noise)
        gap = np.linalg.norm(U - Ub, axis=1)
        for k, p in enumerate(ps):
            dsum[j + 1, k] = np.mean(gap ** p)
        cb = np.atleast_2d(np.cov(Vb.T, bias=True))
        z[j + 1] = np.linalg.norm(cb - mf.forecast_cov(j), 2)
        inorm = np.linalg.norm(innov, axis=1)
        for k, t in enumerate(ts):
            ssum[j + 1, k] = np.mean(inorm ** t)
        if keep:
            hist.append(state)
    return dsum, z, ssum, hist


def coupled_run(model: ModelSpec, data: DataRecord, N: int, seed: int, replicates: int = 1,
                mf: MeanFieldRun | None = None, policy: GridPolicy | None = None,
                ps=(1, 2), ts=(2,), threads=1, keep_history=False) -> CoupledRun:
    """Run interacting particles alongside mean-field replicas driven by the same noises.

    The replicas apply the mean-field gain of each step, taken from ``mf``
    (computed with :func:`mf_run` under ``policy`` when omitted: closed form
    for affine models, grid moments otherwise). Replicate ``r`` reads stream
    branch ``r``; its interacting side equals ``enkf_run(..., replicate=r)``.
    """
    if replicates < 1:
        raise UsageError("replicates must be positive")
    if not model.observation.is_affine:
        warnings.warn("the coupling rate is only established for linear observation maps; "
                      "diagnostics are reported without that guarantee", UnsupportedCouplingWarning,
                      stacklevel=2)
    model.check()
    mf = mf if mf is not None else mf_run(model, data, policy)
    if len(mf.gains) < data.J:
        raise UsageError("mean-field run is shorter than the data record")
    ps, ts = tuple(ps), tuple(ts)
    out = parallel_map(lambda r: _coupled_replicate(model, data, N, seed, r, mf, ps, ts, keep_history),
                       range(replicates), threads)
    dsum = np.mean([o[0] for o in out], axis=0)
    D = dsum ** (1.0 / np.asarray(ps, dtype=float))[None, :]
    Z = np.mean([o[1] for o in out], axis=0)
    S = np.mean([o[2] for o in out], axis=0) ** (1.0 / np.asarray(ts, dtype=float))[None, :]
    diag = ChaosDiagnostics(N, replicates, ps, ts, D, Z, S)
    return CoupledRun(diag, mf, [o[3] for o in out] if keep_history else [])


# ---------------------------------------------------------------------------
# Monte Carlo rate experiment


@dataclass
class RateReport:
    """RMSE of ``mu^N_J[phi]`` against a reference over an N sweep.

    ``errors[name]`` has shape ``(len(Ns), replicates)`` (signed errors at
    step J); ``trajectories[name]`` has shape ``(len(Ns), replicates, J + 1)``.
    ``fits[name]`` is ``None`` when some RMSE is zero (no log-log fit exists).
    """

    Ns: list
    replicates: int
    reference_kind: str
    reference_values: dict
    errors: dict
    rmse: dict
    fits: dict
    trajectories: dict

    def rows(self):
        """``(replicate, step, N, phi, value)`` rows, in a fixed order."""
        for name, tr in self.trajectories.items():
            for a, N in enumerate(self.Ns):
                for r in range(self.replicates):
                    for j in range(tr.shape[2]):
                        yield r, j, N, name, float(tr[a, r, j])

    def summary(self):
        return {
            "Ns": list(self.Ns),
            "replicates": self.replicates,
            "reference": self.reference_kind,
            "reference_values": self.reference_values,
            "rmse": {k: v.tolist() for k, v in self.rmse.items()},
            "fits": {k: (f.to_dict() if f is not None else None) for k, f in self.fits.items()},
        }


def reference_measure(model: ModelSpec, data: DataRecord, kind="auto", policy: GridPolicy | None = None):
    """Final-step reference for rate studies: ``kalman``, ``meanfield``, ``truefilter`` or ``auto``.

    ``auto`` is the Kalman filter for affine models and the grid mean field otherwise.
    """
    if kind == "auto":
        kind = "kalman" if model.is_affine else "meanfield"
    if kind == "kalman":
        return kind, kalman_exact(model, data)[-1]
    if kind == "meanfield":
        return kind, mf_run(model, data, policy).measures[-1]
    if kind == "truefilter":
        return kind, filter_run(model, data, policy).measures[-1]
    raise UsageError(f"unknown reference {kind!r}")


def mc_rate_experiment(model: ModelSpec, data: DataRecord, Ns, replicates: int, observables=DEFAULT_OBSERVABLES,
                       reference="auto", seed: int = 0, threads=1, policy: GridPolicy | None = None,
                       n_boot=1000) -> RateReport:
    """RMSE table over ``Ns`` with log-log slopes and replicate-bootstrap intervals.

    ``reference`` is a reference kind (see :func:`reference_measure`) or a
    measure. Replicate ``r`` uses stream branch ``r`` for every N.
    """
    Ns = [int(n) for n in Ns]
    if len(Ns) < 3:
        raise UsageError("a rate experiment needs at least three values of N")
    if replicates < 1:
        raise UsageError("replicates must be positive")
    phis = [observable(name) for name in observables]
    if isinstance(reference, str):
        kind, ref = reference_measure(model, data, reference, policy)
    else:
        kind, ref = "given", reference
    ref_vals = {p.name: expectation(ref, p) for p in phis}
    cells = [(a, r) for a in range(len(Ns)) for r in range(replicates)]
    runs = parallel_map(lambda c: enkf_run(model, data, Ns[c[0]], seed, c[1], observables, keep_measures=False),
                        cells, threads)
    traj = {p.name: np.empty((len(Ns), replicates, data.J + 1)) for p in phis}
    for (a, r), run in zip(cells, runs):
        for p in phis:
            traj[p.name][a, r] = run.observables[p.name]
    errors, rmse, fits = {}, {}, {}
    for p in phis:
        e = traj[p.name][:, :, -1] - ref_vals[p.name]
        errors[p.name] = e
        rmse[p.name] = np.sqrt(np.mean(e ** 2, axis=1))
        if np.all(rmse[p.name] > 0):
            fits[p.name] = fit_rate(Ns, rmse[p.name], replicate_errors=e, n_boot=n_boot, seed=seed)
        else:
            fits[p.name] = None
    return RateReport(Ns, replicates, kind, ref_vals, errors, rmse, fits, traj)


__all__ = [
    "ChaosDiagnostics", "CoupledRun", "CoupledState", "EnkfRun", "EnsembleState", "RateFit", "RateReport",
    "UnsupportedCouplingWarning", "coupled_run", "empirical_gain", "enkf_run", "enkf_step", "initial_ensemble",
    "mc_rate_experiment", "parallel_map", "reference_measure",
]
