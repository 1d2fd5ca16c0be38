"""State-space model, synthetic truth/data, and numerical assumption checks.

The hidden Markov model is

    u_{j+1} = Psi(u_j) + xi_j,        xi_j  ~ N(0, Sigma)
    y_{j+1} = h(u_{j+1}) + eta_{j+1},  eta   ~ N(0, Gamma)

with u_0 ~ N(m0, C0). Both vector fields are affine maps optionally
perturbed by ``eps`` times a bounded function drawn from a small catalog whose
sup-norm and Lipschitz constant are known in closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import ConfigurationError, UsageError
from .rng import NoiseStreams, Role

AFFINE = "affine"
AFFINE_PLUS_BOUNDED = "affine_plus_bounded"
KINDS = (AFFINE, AFFINE_PLUS_BOUNDED)


@dataclass(frozen=True)
class Perturbation:
    """Scalar profile f applied componentwise; sup |f| <= 1 with Lipschitz constant ``lipschitz``."""

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    lipschitz: float


PERTURBATIONS = {
    "sine": Perturbation("sine", np.sin, 1.0),
    "tanh": Perturbation("tanh", np.tanh, 1.0),
    # exp(-x^2/2) has slope bounded by exp(-1/2), attained at |x| = 1
    "bump": Perturbation("bump", lambda x: np.exp(-0.5 * x * x), math.exp(-0.5)),
}


def _as_matrix(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise ConfigurationError(f"{name} must be a matrix")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} has non-finite entries")
    return a


def _as_vector(a, name):
    a = np.atleast_1d(np.asarray(a, dtype=float)).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True, eq=False)
class VectorFieldSpec:
    """Affine map ``u -> matrix @ u + offset`` plus ``eps`` times a catalog perturbation.

    The perturbation sends u to ``f(u[k % d_in]) / sqrt(d_out)`` in component k,
    so its Euclidean sup-norm is at most 1 whatever the dimensions.

    ``kappa`` (linear growth, ``|field(u)| <= kappa (1 + |u|)``) and ``lipschitz``
    are declared metadata. When omitted they are filled with valid closed-form
    bounds: ``max(||matrix||, |offset| + eps)`` and ``||matrix|| + eps * l_p``.
    """

    matrix: np.ndarray
    offset: np.ndarray | None = None
    kind: str = AFFINE
    eps: float = 0.0
    perturbation: str = "sine"
    kappa: float | None = None
    lipschitz: float | None = None

    def __post_init__(self):
        m = _as_matrix(self.matrix, "matrix")
        object.__setattr__(self, "matrix", m)
        off = np.zeros(m.shape[0]) if self.offset is None else _as_vector(self.offset, "offset")
        if off.shape[0] != m.shape[0]:
            raise ConfigurationError("offset length must match the matrix row count")
        object.__setattr__(self, "offset", off)
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown vector field kind {self.kind!r}")
        if self.perturbation not in PERTURBATIONS:
            raise ConfigurationError(f"unknown perturbation {self.perturbation!r}")
        eps = float(self.eps)
        if not (eps >= 0.0 and math.isfinite(eps)):
            raise ConfigurationError("eps must be a finite non-negative number")
        if self.kind == AFFINE and eps != 0.0:
            raise ConfigurationError("an affine field cannot carry a perturbation amplitude")
        object.__setattr__(self, "eps", eps)
        if self.kappa is None:
            object.__setattr__(self, "kappa", self.default_kappa())
        if self.lipschitz is None:
            object.__setattr__(self, "lipschitz", self.default_lipschitz())

    @property
    def dim_in(self) -> int:
        return self.matrix.shape[1]

    @property
    def dim_out(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_affine(self) -> bool:
        return self.kind == AFFINE

    @property
    def perturbation_lipschitz(self) -> float:
        reps = math.ceil(self.dim_out / self.dim_in)
        return PERTURBATIONS[self.perturbation].lipschitz * math.sqrt(reps / self.dim_out)

    def default_kappa(self) -> float:
        norm = float(np.linalg.norm(self.matrix, 2))
        return max(norm, float(np.linalg.norm(self.offset)) + self.eps)

    def default_lipschitz(self) -> float:
        return float(np.linalg.norm(self.matrix, 2)) + self.eps * self.perturbation_lipschitz

    def affine_part(self, u):
        return u @ self.matrix.T + self.offset

    def perturbation_part(self, u):
        f = PERTURBATIONS[self.perturbation].func
        idx = np.arange(self.dim_out) % self.dim_in
        return f(u[..., idx]) / math.sqrt(self.dim_out)

    def __call__(self, u):
        return eval_field(self, u)

    def to_dict(self):
        return {
            "kind": self.kind,
            "matrix": self.matrix.tolist(),
            "offset": self.offset.tolist(),
            "eps": self.eps,
            "perturbation": self.perturbation,
            "kappa": self.kappa,
            "lipschitz": self.lipschitz,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            matrix=d["matrix"],
            offset=d.get("offset"),
            kind=d.get("kind", AFFINE),
            eps=d.get("eps", 0.0),
            perturbation=d.get("perturbation", "sine"),
            kappa=d.get("kappa"),
            lipschitz=d.get("lipschitz"),
        )


def eval_field(field: VectorFieldSpec, u) -> np.ndarray:
    """Evaluate ``field`` at a state (shape ``(d_in,)``) or a batch (shape ``(n, d_in)``)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] != field.dim_in or u.ndim > 2:
        raise UsageError(f"state of shape {u.shape} does not match field input dimension {field.dim_in}")
    out = field.affine_part(u)
    if field.kind == AFFINE_PLUS_BOUNDED and field.eps != 0.0:
        out = out + field.eps * field.perturbation_part(u)
    return out


def _spd_cholesky(a, name):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"{name} is not symmetric positive definite") from exc


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Dynamics, observation operator, noise covariances and Gaussian prior.

    Construction checks shapes, finiteness and symmetry only. Positive
    definiteness is enforced lazily (the Cholesky properties raise
    :class:`ConfigurationError`), so that :func:`validate_assumptions` can still
    report on a model whose noise is degenerate.
    """

    dynamics: VectorFieldSpec
    observation: VectorFieldSpec
    sigma: np.ndarray
    gamma: np.ndarray
    m0: np.ndarray
    c0: np.ndarray

    def __post_init__(self):
        for name in ("sigma", "gamma", "c0"):
            a = _as_matrix(getattr(self, name), name)
            if a.shape[0] != a.shape[1]:
                raise ConfigurationError(f"{name} must be square")
            if not np.allclose(a, a.T, rtol=1e-12, atol=0.0):
                raise ConfigurationError(f"{name} must be symmetric")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "m0", _as_vector(self.m0, "m0"))
        du, dy = self.dim_u, self.dim_y
        if self.dynamics.dim_in != du or self.dynamics.dim_out != du:
            raise ConfigurationError("dynamics must map R^d_u to R^d_u")
        if self.observation.dim_in != du:
            raise ConfigurationError("observation operator must take R^d_u inputs")
        if self.sigma.shape != (du, du) or self.c0.shape != (du, du):
            raise ConfigurationError("sigma and c0 must be d_u x d_u")
        if self.gamma.shape != (dy, dy):
            raise ConfigurationError("gamma must be d_y x d_y")
        if self.m0.shape != (du,):
            raise ConfigurationError("m0 must have length d_u")

    @property
    def dim_u(self) -> int:
        return self.dynamics.dim_in

    @property
    def dim_y(self) -> int:
        return self.observation.dim_out

    @property
    def is_affine(self) -> bool:
        return self.dynamics.is_affine and self.observation.is_affine

    @cached_property
    def chol_sigma(self):
        return _spd_cholesky(self.sigma, "Sigma")

    @cached_property
    def chol_gamma(self):
        return _spd_cholesky(self.gamma, "Gamma")

    @cached_property
    def chol_c0(self):
        return _spd_cholesky(self.c0, "C0")

    def check(self):
        """Raise :class:`ConfigurationError` unless Sigma, Gamma and C0 are SPD."""
        self.chol_sigma, self.chol_gamma, self.chol_c0
        return self

    def psi(self, u):
        return eval_field(self.dynamics, u)

    def h(self, u):
        return eval_field(self.observation, u)

    def with_eps(self, eps: float) -> "ModelSpec":
        """Copy with the dynamics perturbation amplitude replaced (declared constants recomputed)."""
        d = self.dynamics
        kind = AFFINE if eps == 0.0 and d.kind == AFFINE else AFFINE_PLUS_BOUNDED
        dyn = VectorFieldSpec(d.matrix, d.offset, kind=kind, eps=eps, perturbation=d.perturbation)
        return ModelSpec(dyn, self.observation, self.sigma, self.gamma, self.m0, self.c0)

    def to_dict(self):
        return {
            "dim_u": self.dim_u,
            "dim_y": self.dim_y,
            "dynamics": self.dynamics.to_dict(),
            "observation": self.observation.to_dict(),
            "sigma": self.sigma.tolist(),
            "gamma": self.gamma.tolist(),
            "m0": self.m0.tolist(),
            "c0": self.c0.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(
            dynamics=VectorFieldSpec.from_dict(d["dynamics"]),
            observation=VectorFieldSpec.from_dict(d["observation"]),
            sigma=d["sigma"],
            gamma=d["gamma"],
            m0=d["m0"],
            c0=d["c0"],
        )
        if "dim_u" in d and d["dim_u"] != model.dim_u or "dim_y" in d and d["dim_y"] != model.dim_y:
            raise ConfigurationError("declared dimensions disagree with the matrices")
        return model


def scalar_model(M=0.9, b=0.0, H=1.0, w=0.0, sigma=0.5, gamma=0.5, m0=0.0, c0=1.0,
                 eps=0.0, perturbation="sine", obs_eps=0.0) -> ModelSpec:
    """One-dimensional model with ``Psi(u) = M u + b + eps p(u)`` and ``h(u) = H u + w + obs_eps p(u)``."""
    dyn_kind = AFFINE_PLUS_BOUNDED if eps else AFFINE
    obs_kind = AFFINE_PLUS_BOUNDED if obs_eps else AFFINE
    return ModelSpec(
        dynamics=VectorFieldSpec([[M]], [b], kind=dyn_kind, eps=eps, perturbation=perturbation),
        observation=VectorFieldSpec([[H]], [w], kind=obs_kind, eps=obs_eps, perturbation=perturbation),
        sigma=[[sigma]],
        gamma=[[gamma]],
        m0=[m0],
        c0=[[c0]],
    )


@dataclass(frozen=True, eq=False)
class DataRecord:
    """Truth trajectory ``u_0..u_J`` and observations ``y_1..y_J`` (stored at index ``j-1``)."""

    truth: np.ndarray
    observations: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        truth = np.atleast_2d(np.asarray(self.truth, dtype=float))
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs.reshape(-1, 1) if obs.size else obs.reshape(0, 1)
        if truth.shape[0] != obs.shape[0] + 1:
            raise ConfigurationError("truth must have exactly one more entry than observations")
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "observations", obs)

    @property
    def J(self) -> int:
        return self.observations.shape[0]

    @property
    def kappa_y(self) -> float:
        if self.J == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.observations, axis=1)))

    def y(self, j: int) -> np.ndarray:
        """Observation ``y_j`` for ``j`` in ``1..J``."""
        if not 1 <= j <= self.J:
            raise UsageError(f"observation index {j} outside 1..{self.J}")
        return self.observations[j - 1]

    def to_dict(self):
        return {
            "J": self.J,
            "seed": self.seed,
            "truth": self.truth.tolist(),
            "observations": self.observations.tolist(),
            "kappa_y": self.kappa_y,
        }

    @classmethod
    def from_dict(cls, d):
        obs = d["observations"]
        truth = d["truth"]
        if not obs:
            obs = np.zeros((0, len(truth[0])))
        rec = cls(truth=truth, observations=obs, seed=d.get("seed"))
        if "J" in d and d["J"] != rec.J:
            raise ConfigurationError("declared J disagrees with the observation count")
        return rec


def dumps(obj) -> str:
    """Serialize a ModelSpec or DataRecord to JSON.

    Floats are written with Python's shortest round-trip repr, which never
    needs more than 17 significant digits and reloads bit-exactly.
    """
    return json.dumps(obj.to_dict(), indent=2, sort_keys=True)


def load_model(text_or_dict) -> ModelSpec:
    d = json.loads(text_or_dict) if isinstance(text_or_dict, str) else text_or_dict
    return ModelSpec.from_dict(d)


def load_data(text_or_dict) -> DataRecord:
    d = json.loads(text_or_dict) if isinstance(text_or_dict, str) else text_or_dict
    return DataRecord.from_dict(d)


def simulate_truth(model: ModelSpec, J: int, seed: int) -> DataRecord:
    """Draw a truth trajectory and observations; deterministic given ``seed``."""
    if J < 0:
        raise UsageError("J must be non-negative")
    model.check()
    streams = NoiseStreams(seed)
    du, dy = model.dim_u, model.dim_y
    truth = np.empty((J + 1, du))
    obs = np.empty((J, dy))
    truth[0] = model.m0 + streams.gaussian(0, 0, Role.TRUTH_INIT, 1, model.chol_c0)[0]
    for j in range(J):
        xi = streams.gaussian(0, j, Role.TRUTH_XI, 1, model.chol_sigma)[0]
        truth[j + 1] = model.psi(truth[j]) + xi
        eta = streams.gaussian(0, j + 1, Role.TRUTH_ETA, 1, model.chol_gamma)[0]
        obs[j] = model.h(truth[j + 1]) + eta
    return DataRecord(truth, obs, seed=seed)


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    declared: float | None = None
    note: str = ""


@dataclass
class AssumptionReport:
    checks: list[Check] = field(default_factory=list)
    probe_size: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self):
        return {
            "probe_size": self.probe_size,
            "passed": self.passed,
            "checks": [c.__dict__.copy() for c in self.checks],
        }

    def __str__(self):
        lines = [f"assumption report over {self.probe_size} probe states"]
        for c in self.checks:
            flag = "PASS" if c.passed else "FAIL"
            decl = "" if c.declared is None else f" declared={c.declared:.6g}"
            lines.append(f"  [{flag}] {c.name}: measured={c.measured:.6g}{decl} {c.note}".rstrip())
        return "\n".join(lines)


def _probe_pairs(n):
    if n <= 400:
        i, k = np.triu_indices(n, 1)
        return i, k
    i = np.concatenate([np.arange(n - 1), np.arange(n // 2)])
    k = np.concatenate([np.arange(1, n), n - 1 - np.arange(n // 2)])
    return i, k


def _growth(field, probe):
    vals = np.linalg.norm(eval_field(field, probe), axis=1)
    return float(np.max(vals / (1.0 + np.linalg.norm(probe, axis=1))))


def validate_assumptions(model: ModelSpec, probe, data: DataRecord | None = None,
                         rel_slack: float = 1e-12) -> AssumptionReport:
    """Check the standing assumptions on a probe set and report the tightest measured constants.

    Checks: positive-definite noise covariances, linear growth of both fields
    against their declared ``kappa``, Lipschitz continuity of the observation
    operator, and (for perturbed fields) membership in the sup-norm ball of
    radius ``eps`` around the affine part. With ``data`` the realised data bound
    is reported as well.
    """
    probe = np.asarray(probe, dtype=float)
    if probe.ndim == 1:
        probe = probe.reshape(-1, model.dim_u) if model.dim_u > 1 else probe.reshape(-1, 1)
    if probe.shape[0] == 0:
        raise UsageError("probe set is empty")
    if probe.shape[1] != model.dim_u:
        raise UsageError("probe states have the wrong dimension")
    report = AssumptionReport(probe_size=probe.shape[0])
    slack = 1.0 + rel_slack

    sig_min = float(np.min(np.linalg.eigvalsh(model.sigma)))
    gam_min = float(np.min(np.linalg.eigvalsh(model.gamma)))
    report.checks.append(Check("noise_covariances_pd", sig_min > 0 and gam_min > 0, min(sig_min, gam_min),
                               note=f"sigma={sig_min:.6g} gamma={gam_min:.6g}"))

    for label, fld in (("dynamics", model.dynamics), ("observation", model.observation)):
        k = _growth(fld, probe)
        report.checks.append(Check(f"{label}_linear_growth", k <= fld.kappa * slack, k, fld.kappa))

    i, k = _probe_pairs(probe.shape[0])
    dist = np.linalg.norm(probe[i] - probe[k], axis=1)
    keep = dist > 0
    if np.any(keep):
        hv = model.h(probe)
        lip = float(np.max(np.linalg.norm(hv[i] - hv[k], axis=1)[keep] / dist[keep]))
    else:
        lip = 0.0
    report.checks.append(Check("observation_lipschitz", lip <= model.observation.lipschitz * slack, lip,
                               model.observation.lipschitz))

    for label, fld in (("dynamics", model.dynamics), ("observation", model.observation)):
        if fld.kind == AFFINE_PLUS_BOUNDED:
            dev = float(np.max(np.linalg.norm(eval_field(fld, probe) - fld.affine_part(probe), axis=1)))
            report.checks.append(Check(f"{label}_eps_ball", dev <= fld.eps * slack, dev, fld.eps))

    if data is not None:
        report.checks.append(Check("data_bounded", bool(np.isfinite(data.kappa_y)), data.kappa_y))
    return report
