"""Probability measure representations and the functionals used to compare them.

Three representations are supported:

* :class:`GaussianMeasure` -- mean and SPD covariance, exact formulas.
* :class:`GridMeasure` -- a Lebesgue density sampled at the cell centres of a
  uniform tensor grid; integrals use the midpoint rule.
* :class:`EmpiricalMeasure` -- equally weighted particles.

The weighted total variation distance ``d_g`` uses the weight
``g(v) = 1 + |v|^2`` and is only defined between grid measures sharing axes.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateMeasureError, TruncationError, UsageError

# ---------------------------------------------------------------------------
# representations


@dataclass(frozen=True)
class Axis:
    """Uniform axis on ``[lo, hi]`` split into ``n`` cells; nodes are the cell centres."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (self.hi > self.lo) or self.n < 2:
            raise UsageError(f"invalid axis {self}")
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        object.__setattr__(self, "n", int(self.n))

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.n

    @property
    def nodes(self) -> np.ndarray:
        return self.lo + (np.arange(self.n) + 0.5) * self.step

    def refined(self, factor=2) -> "Axis":
        return Axis(self.lo, self.hi, self.n * factor)


def axes_box(lo, hi, n, dim=1):
    """``dim`` identical axes."""
    return tuple(Axis(lo, hi, n) for _ in range(dim))


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float)).reshape(-1)
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.shape != (m.size, m.size):
            raise UsageError("covariance shape does not match the mean")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(c))):
            raise UsageError("Gaussian parameters must be finite")
        scale = max(float(np.max(np.abs(c))), 1e-300)
        if np.max(np.abs(c - c.T)) > 1e-12 * scale:
            raise UsageError("covariance is not symmetric")
        c = 0.5 * (c + c.T)
        if np.min(np.linalg.eigvalsh(c)) <= 0.0:
            raise DegenerateMeasureError("covariance is not positive definite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def dim(self) -> int:
        return self.mean.size

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        chol = np.linalg.cholesky(self.cov)
        z = np.linalg.solve(chol, (x - self.mean).T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return np.exp(-0.5 * np.sum(z * z, axis=0) - 0.5 * (self.dim * math.log(2 * math.pi) + logdet))


class GridMeasure:
    """Density on a tensor grid, normalised so the midpoint-rule mass is one.

    ``split`` marks a joint measure over (u, y): the first ``split`` axes are
    state axes. ``raw_mass`` keeps the mass before normalisation as a
    discretisation diagnostic.
    """

    def __init__(self, axes, density, split=None, normalize=True):
        axes = tuple(axes)
        density = np.asarray(density, dtype=float)
        if density.shape != tuple(a.n for a in axes):
            raise UsageError(f"density shape {density.shape} does not match axes")
        if not np.all(np.isfinite(density)):
            raise UsageError("density has non-finite values")
        if np.any(density < 0):
            raise UsageError("density must be non-negative")
        self.axes = axes
        self.split = split
        self.raw_mass = float(np.sum(density) * self.cell_volume)
        if normalize:
            if self.raw_mass <= 0:
                raise DegenerateMeasureError("density has zero mass")
            density = density / self.raw_mass
        self.density = density

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([a.step for a in self.axes]))

    @property
    def mass(self) -> float:
        return float(np.sum(self.density) * self.cell_volume)

    def mesh(self):
        return np.meshgrid(*[a.nodes for a in self.axes], indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(n_total, dim)`` in C order."""
        return np.stack([g.reshape(-1) for g in self.mesh()], axis=1)

    def weights(self) -> np.ndarray:
        """Discrete probabilities at the nodes (flattened), summing to one."""
        w = self.density.reshape(-1) * self.cell_volume
        return w / np.sum(w)

    def boundary_mass(self) -> float:
        """Mass carried by the outermost layer of cells."""
        inner = self.density[tuple(slice(1, -1) for _ in self.axes)]
        return float((np.sum(self.density) - np.sum(inner)) * self.cell_volume)

    def same_axes(self, other) -> bool:
        return self.axes == other.axes

    def marginal(self, dims) -> "GridMeasure":
        dims = tuple(dims)
        others = tuple(k for k in range(self.dim) if k not in dims)
        vol = float(np.prod([self.axes[k].step for k in others])) if others else 1.0
        dens = np.sum(self.density, axis=others) * vol if others else self.density
        return GridMeasure([self.axes[k] for k in dims], dens, normalize=False)

    def state_marginal(self) -> "GridMeasure":
        if self.split is None:
            return self
        return self.marginal(range(self.split))

    def __repr__(self):
        return f"GridMeasure(axes={self.axes}, split={self.split})"


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    particles: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim == 1:
            p = p.reshape(-1, 1)
        if p.shape[0] < 1:
            raise UsageError("an empirical measure needs at least one particle")
        if not np.all(np.isfinite(p)):
            raise UsageError("particles must be finite")
        object.__setattr__(self, "particles", p)

    @property
    def N(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


def render(g: GaussianMeasure, axes, split=None) -> GridMeasure:
    """Gaussian density sampled on the grid and renormalised."""
    axes = tuple(axes)
    if len(axes) != g.dim:
        raise UsageError("axes dimension does not match the Gaussian")
    grid = GridMeasure(axes, np.ones(tuple(a.n for a in axes)), normalize=False)
    dens = g.pdf(grid.points()).reshape(grid.density.shape)
    return GridMeasure(axes, dens, split=split)


# ---------------------------------------------------------------------------
# moments


def _truncation_guard(mu: GridMeasure, q: float, rtol: float = 1e-12):
    pts = mu.points()
    integrand = (np.linalg.norm(pts, axis=1) ** q) * mu.density.reshape(-1)
    peak = float(np.max(integrand))
    f = integrand.reshape(mu.density.shape)
    inner = np.zeros_like(f, dtype=bool)
    inner[tuple(slice(1, -1) for _ in mu.axes)] = True
    edge = float(np.max(f[~inner]))
    if peak > 0 and edge > rtol * peak:
        raise TruncationError(
            f"|x|^{q} density is {edge / peak:.3g} of its peak on the grid boundary",
            boundary_mass=mu.boundary_mass(),
        )


def moment_q(mu, q: float, check: bool = True) -> float:
    """``int |x|^q dmu``: closed form for even q on Gaussians, midpoint rule on grids, particle mean."""
    if q <= 0:
        raise UsageError("q must be positive")
    if isinstance(mu, GaussianMeasure):
        return _gaussian_abs_moment(mu, q)
    if isinstance(mu, GridMeasure):
        if check:
            _truncation_guard(mu, q)
        return float(np.sum(np.linalg.norm(mu.points(), axis=1) ** q * mu.weights()))
    if isinstance(mu, EmpiricalMeasure):
        return float(np.mean(np.linalg.norm(mu.particles, axis=1) ** q))
    raise UsageError(f"unsupported measure type {type(mu).__name__}")


def _folded_abs_moment(m, s, q, panels=400, order=16):
    """``E|X|^q`` for ``X ~ N(m, s^2)``, by composite Gauss-Legendre on the folded half-line.

    |x|^q is not smooth at 0, so the integral runs over ``[0, |m| + 40 s]``
    against the sum of the two mirrored densities.
    """
    x0, w0 = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, abs(m) + 40.0 * s, panels + 1)
    half = 0.5 * np.diff(edges)
    x = (edges[:-1] + half)[:, None] + half[:, None] * x0[None, :]
    w = half[:, None] * w0[None, :]
    dens = (np.exp(-0.5 * ((x - m) / s) ** 2) + np.exp(-0.5 * ((x + m) / s) ** 2)) / (s * math.sqrt(2 * math.pi))
    return float(np.sum(w * x ** q * dens))


def _gaussian_abs_moment(g: GaussianMeasure, q):
    m, c = g.mean, g.cov
    tr = float(np.trace(c))
    mm = float(m @ m)
    if q == 2:
        return tr + mm
    if q == 4:
        # E|x|^4 for x ~ N(m, C)
        return (tr + mm) ** 2 + 2.0 * float(np.trace(c @ c)) + 4.0 * float(m @ c @ m)
    if g.dim == 1:
        return _folded_abs_moment(float(m[0]), math.sqrt(c[0, 0]), q)
    raise UsageError("Gaussian moments beyond one dimension are only available for q in {2, 4}")


def mean_cov(mu):
    """Mean and covariance (population 1/N form for particles)."""
    if isinstance(mu, GaussianMeasure):
        return mu.mean.copy(), mu.cov.copy()
    if isinstance(mu, GridMeasure):
        pts, w = mu.points(), mu.weights()
        m = w @ pts
        d = pts - m
        c = (d * w[:, None]).T @ d
        return m, 0.5 * (c + c.T)
    if isinstance(mu, EmpiricalMeasure):
        p = mu.particles
        m = p.mean(axis=0)
        d = p - m
        return m, d.T @ d / mu.N
    raise UsageError(f"unsupported measure type {type(mu).__name__}")


@dataclass(frozen=True, eq=False)
class JointMoments:
    """Mean and covariance blocks of a joint state/observation measure."""

    m_u: np.ndarray
    m_y: np.ndarray
    C_uu: np.ndarray
    C_uy: np.ndarray
    C_yy: np.ndarray

    @property
    def dim_u(self):
        return self.m_u.size

    @property
    def dim_y(self):
        return self.m_y.size

    @property
    def mean(self):
        return np.concatenate([self.m_u, self.m_y])

    @property
    def cov(self):
        return np.block([[self.C_uu, self.C_uy], [self.C_uy.T, self.C_yy]])

    @classmethod
    def from_mean_cov(cls, m, c, dim_u):
        return cls(m[:dim_u], m[dim_u:], c[:dim_u, :dim_u], c[:dim_u, dim_u:], c[dim_u:, dim_u:])

    def gaussian(self) -> GaussianMeasure:
        return GaussianMeasure(self.mean, self.cov)


def joint_blocks(pi, dim_u: int | None = None) -> JointMoments:
    """Block decomposition of the mean and covariance of a joint (u, y) measure."""
    if dim_u is None:
        dim_u = getattr(pi, "split", None)
    if dim_u is None:
        raise UsageError("the state dimension of the joint measure is unknown")
    m, c = mean_cov(pi)
    if not 0 < dim_u < m.size:
        raise UsageError("state dimension must leave a non-empty observation block")
    return JointMoments.from_mean_cov(m, c, dim_u)


def gaussian_projection(mu) -> GaussianMeasure:
    """Gaussian with the same mean and covariance as ``mu``."""
    m, c = mean_cov(mu)
    if np.min(np.linalg.eigvalsh(c)) <= 0.0:
        raise DegenerateMeasureError("covariance is singular; the Gaussian projection is undefined")
    return GaussianMeasure(m, c)


def weight_g(points) -> np.ndarray:
    """``g(v) = 1 + |v|^2``."""
    return 1.0 + np.sum(np.asarray(points) ** 2, axis=-1)


def weighted_tv(mu1: GridMeasure, mu2: GridMeasure) -> float:
    """``int (1 + |v|^2) |rho1(v) - rho2(v)| dv`` by the midpoint rule on shared axes."""
    if not (isinstance(mu1, GridMeasure) and isinstance(mu2, GridMeasure)):
        raise UsageError("d_g is only computed between grid measures")
    if not mu1.same_axes(mu2):
        raise UsageError("d_g requires identical axes")
    g = weight_g(mu1.points())
    diff = np.abs(mu1.density - mu2.density).reshape(-1)
    return float(np.sum(g * diff) * mu1.cell_volume)


def in_P_R(mu, R: float) -> bool:
    """Whether ``|mean| <= R`` and ``R^-2 I <= cov <= R^2 I``."""
    if R < 1:
        raise UsageError("R must be at least 1")
    m, c = mean_cov(mu)
    ev = np.linalg.eigvalsh(c)
    return bool(np.linalg.norm(m) <= R and ev[0] >= R ** -2 and ev[-1] <= R ** 2)


def minimal_R(mu) -> float:
    """Smallest ``R >= 1`` for which :func:`in_P_R` holds."""
    m, c = mean_cov(mu)
    ev = np.linalg.eigvalsh(c)
    if ev[0] <= 0:
        return math.inf
    return max(1.0, float(np.linalg.norm(m)), math.sqrt(ev[-1]), 1.0 / math.sqrt(ev[0]))


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True, eq=False)
class Observable:
    """Test function with its growth metadata.

    ``|phi(u) - phi(v)| <= lipschitz |u - v| (1 + |u|^s + |v|^s)`` and
    ``|phi(u)| <= growth (1 + |u|^(s + 1))`` where ``s = varsigma``.
    ``gaussian_mean`` gives the exact expectation under N(m, C) when known.
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    growth: float
    varsigma: float
    gaussian_mean: Callable[[np.ndarray, np.ndarray], float] | None = None

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.func(u if u.ndim == 2 else u.reshape(1, -1))

    def growth_violations(self, u, slack=1e-12) -> int:
        u = np.asarray(u, dtype=float).reshape(len(u), -1)
        bound = self.growth * (1.0 + np.linalg.norm(u, axis=1) ** (self.varsigma + 1))
        return int(np.sum(np.abs(self(u)) > bound * (1 + slack) + slack))


def coordinate(k: int = 0) -> Observable:
    return Observable(f"u{k}", lambda u: u[:, k], 1.0, 1.0, 0.0, lambda m, c: float(m[k]))


def squared_norm() -> Observable:
    return Observable("sqnorm", lambda u: np.sum(u * u, axis=1), 1.0, 1.0, 1.0,
                      lambda m, c: float(np.trace(c) + m @ m))


def monomial(k: int, l: int) -> Observable:
    return Observable(f"u{k}u{l}", lambda u: u[:, k] * u[:, l], 1.0, 1.0, 1.0,
                      lambda m, c: float(c[k, l] + m[k] * m[l]))


def constant() -> Observable:
    return Observable("one", lambda u: np.ones(u.shape[0]), 0.0, 1.0, 0.0, lambda m, c: 1.0)


OBSERVABLES = {
    "u0": coordinate(0),
    "u1": coordinate(1),
    "sqnorm": squared_norm(),
    "u0u0": monomial(0, 0),
    "u0u1": monomial(0, 1),
    "one": constant(),
}


def observable(name: str) -> Observable:
    try:
        return OBSERVABLES[name]
    except KeyError:
        raise UsageError(f"unknown observable {name!r}; choose from {sorted(OBSERVABLES)}") from None


def expectation(mu, phi: Observable) -> float:
    """``mu[phi]``."""
    if isinstance(mu, GaussianMeasure):
        if phi.gaussian_mean is None:
            raise UsageError(f"no closed-form Gaussian expectation for {phi.name}")
        return phi.gaussian_mean(mu.mean, mu.cov)
    if isinstance(mu, GridMeasure):
        return float(phi(mu.points()) @ mu.weights())
    if isinstance(mu, EmpiricalMeasure):
        return float(np.mean(phi(mu.particles)))
    raise UsageError(f"unsupported measure type {type(mu).__name__}")


def observable_error(mu1, mu2, phi: Observable) -> float:
    """``|mu1[phi] - mu2[phi]|``."""
    return abs(expectation(mu1, phi) - expectation(mu2, phi))


# ---------------------------------------------------------------------------
# serialisation

_MAGIC = b"ENKFGRID"
_VERSION = 1


def grid_to_bytes(mu: GridMeasure) -> bytes:
    """Little-endian layout: magic, version, ndim, split, per-axis (lo, hi, n), float64 density (C order)."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IIi", _VERSION, mu.dim, -1 if mu.split is None else mu.split))
    for a in mu.axes:
        buf.write(struct.pack("<ddQ", a.lo, a.hi, a.n))
    buf.write(np.ascontiguousarray(mu.density, dtype="<f8").tobytes())
    return buf.getvalue()


def grid_from_bytes(raw: bytes) -> GridMeasure:
    if raw[:8] != _MAGIC:
        raise UsageError("not a grid measure file")
    version, ndim, split = struct.unpack_from("<IIi", raw, 8)
    if version != _VERSION:
        raise UsageError(f"unsupported grid format version {version}")
    off = 8 + 12
    axes = []
    for _ in range(ndim):
        lo, hi, n = struct.unpack_from("<ddQ", raw, off)
        axes.append(Axis(lo, hi, n))
        off += 24
    shape = tuple(a.n for a in axes)
    dens = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=off).reshape(shape)
    return GridMeasure(axes, dens.astype(float), split=None if split < 0 else split, normalize=False)


def grid_to_csv(mu: GridMeasure) -> str:
    pts = mu.points()
    lines = [",".join([f"x{k}" for k in range(mu.dim)] + ["density"])]
    for p, d in zip(pts, mu.density.reshape(-1)):
        lines.append(",".join(repr(float(v)) for v in (*p, d)))
    return "\r\n".join(lines) + "\r\n"
