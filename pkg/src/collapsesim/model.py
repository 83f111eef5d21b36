"""Physical system description: particles, configuration basis, kernels, states.

Positions are always 3D.  The smearing width ``sigma`` is stored as a length
(the standard deviation of the Gaussian mass profile); the profile itself is

    g(r) = exp(-|r|^2 / (2 sigma^2)) / (2 pi sigma^2)^{3/2}

so ``sigma**2`` is the per-axis variance.  With this convention the
Gaussian-Coulomb overlap is exactly erf(z / (2 sigma)) / z, which is verified
against an independent quadrature in ``overlaps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX_CONFIGURATIONS = 4096


class ValidationError(ValueError):
    """Invalid input parameters or malformed objects."""


class ModelError(RuntimeError):
    """The model produced an inconsistent object (e.g. an indefinite covariance)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (non-convergence, trace collapse)."""


@dataclass(frozen=True)
class PhysicalConstants:
    G: float = 1.0
    hbar: float = 1.0

    def __post_init__(self):
        if not (self.G > 0 and self.hbar > 0):
            raise ValidationError(f"constants must be positive, got G={self.G}, hbar={self.hbar}")

    @classmethod
    def profile(cls, name: str) -> "PhysicalConstants":
        """Named unit profiles: ``natural`` (G = hbar = 1) or ``si``."""
        try:
            return _PROFILES[name]
        except KeyError:
            raise ValidationError(f"unknown constants profile {name!r}; expected one of {sorted(_PROFILES)}") from None


_PROFILES = {
    "natural": PhysicalConstants(1.0, 1.0),
    "si": PhysicalConstants(6.67430e-11, 1.054571817e-34),
}


@dataclass(frozen=True)
class CSL:
    """Local white-noise kernel gamma * delta(r - s)."""

    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError(f"CSL strength must be positive, got {self.gamma}")

    @property
    def strength(self) -> float:
        return self.gamma

    def scaled(self, factor: float) -> "CSL":
        return CSL(self.gamma * factor)


@dataclass(frozen=True)
class DP:
    """Coulomb kernel kappa * G / |r - s|."""

    kappa: float = 2.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValidationError(f"DP coefficient must be positive, got {self.kappa}")

    @property
    def strength(self) -> float:
        return self.kappa

    def scaled(self, factor: float) -> "DP":
        return DP(self.kappa * factor)


Kernel = CSL | DP


@dataclass(frozen=True)
class Particle:
    mass: float
    sites: np.ndarray = field(repr=False)

    def __post_init__(self):
        sites = np.atleast_2d(np.asarray(self.sites, dtype=float))
        if sites.ndim != 2 or sites.shape[1] != 3:
            raise ValidationError(f"sites must be a list of 3D points, got shape {sites.shape}")
        if len(sites) < 1:
            raise ValidationError("each particle needs at least one site")
        if not self.mass > 0:
            raise ValidationError(f"mass must be positive, got {self.mass}")
        sites = sites.copy()
        sites.flags.writeable = False
        object.__setattr__(self, "sites", sites)

    @property
    def n_sites(self) -> int:
        return len(self.sites)


@dataclass(frozen=True)
class ParticleSystem:
    particles: tuple[Particle, ...]
    sigma: float

    def __post_init__(self):
        particles = tuple(self.particles)
        object.__setattr__(self, "particles", particles)
        if not particles:
            raise ValidationError("a system needs at least one particle")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        d = self.dim
        if not 2 <= d <= MAX_CONFIGURATIONS:
            raise ValidationError(f"configuration count {d} outside [2, {MAX_CONFIGURATIONS}]")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(p.n_sites for p in self.particles)

    @property
    def dim(self) -> int:
        return math.prod(self.shape)

    @property
    def masses(self) -> np.ndarray:
        return np.array([p.mass for p in self.particles])

    @property
    def variance(self) -> float:
        return self.sigma**2

    def site_points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat list of every (particle, site) point.

        Returns ``(points, owner, local_index)`` where ``owner[k]`` is the
        particle of point ``k`` and ``local_index[k]`` its site number.
        """
        points = np.concatenate([p.sites for p in self.particles])
        owner = np.concatenate([np.full(p.n_sites, n) for n, p in enumerate(self.particles)])
        local = np.concatenate([np.arange(p.n_sites) for p in self.particles])
        return points, owner, local

    def site_matrix(self) -> np.ndarray:
        """Mass-weighted incidence matrix A (d x P): A[x, k] = m_n if config x puts particle n on point k."""
        points, owner, local = self.site_points()
        tuples = self.configuration_tuples()
        masses = self.masses
        A = np.zeros((self.dim, len(points)))
        offsets = np.concatenate([[0], np.cumsum(self.shape)[:-1]])
        for n in range(len(self.particles)):
            A[np.arange(self.dim), offsets[n] + tuples[:, n]] = masses[n]
        return A

    def configuration_tuples(self) -> np.ndarray:
        """All site-index tuples, shape (d, N), in lexicographic (row-major) order."""
        return np.array(np.unravel_index(np.arange(self.dim), self.shape)).T

    def configuration_positions(self, index: int) -> np.ndarray:
        return configuration_positions(self, index)

    def all_positions(self) -> np.ndarray:
        """Positions of every particle in every configuration, shape (d, N, 3)."""
        tuples = self.configuration_tuples()
        return np.stack([p.sites[tuples[:, n]] for n, p in enumerate(self.particles)], axis=1)


def configuration_tuple(system: ParticleSystem, index: int) -> tuple[int, ...]:
    if not 0 <= index < system.dim:
        raise ValidationError(f"configuration index {index} out of range [0, {system.dim})")
    return tuple(int(i) for i in np.unravel_index(index, system.shape))


def configuration_index(system: ParticleSystem, sites: Sequence[int]) -> int:
    if len(sites) != len(system.particles):
        raise ValidationError(f"expected {len(system.particles)} site indices, got {len(sites)}")
    for s, n in zip(sites, system.shape):
        if not 0 <= s < n:
            raise ValidationError(f"site index {s} out of range [0, {n})")
    return int(np.ravel_multi_index(tuple(sites), system.shape))


def configuration_positions(system: ParticleSystem, index: int) -> np.ndarray:
    """Positions (N x 3) of every particle in joint configuration ``index``."""
    sites = configuration_tuple(system, index)
    return np.stack([p.sites[s] for p, s in zip(system.particles, sites)])


def collinear(xs: Sequence[float]) -> np.ndarray:
    """Embed scalar x coordinates as 3D points on the x-axis."""
    xs = np.asarray(xs, dtype=float)
    return np.column_stack([xs, np.zeros_like(xs), np.zeros_like(xs)])


def bmv_system(m: float, a: float, d: float, sigma: float) -> ParticleSystem:
    for name, value in (("m", m), ("a", a), ("d", d), ("sigma", sigma)):
        if not value > 0:
            raise ValidationError(f"{name} must be positive, got {value}")
    p1 = Particle(m, collinear([-a / 2, a / 2]))
    p2 = Particle(m, collinear([d - a / 2, d + a / 2]))
    return ParticleSystem((p1, p2), sigma)


def product_state(amplitudes: Sequence[Sequence[complex]]) -> np.ndarray:
    """Pure product state from per-particle amplitude vectors (normalised here)."""
    psi = np.ones(1, dtype=complex)
    for amp in amplitudes:
        amp = np.asarray(amp, dtype=complex)
        psi = np.kron(psi, amp / np.linalg.norm(amp))
    return np.outer(psi, psi.conj())


def bmv_scenario(m: float, a: float, d: float, sigma: float) -> tuple[ParticleSystem, np.ndarray]:
    """Two equal masses on the x-axis, each in an equal two-site superposition.

    Particle 1 sits at -a/2 or +a/2, particle 2 at d - a/2 or d + a/2; the
    initial state is the uniform product superposition (every entry 1/4).
    """
    system = bmv_system(m, a, d, sigma)
    rho0 = product_state([[1, 1], [1, 1]])
    return system, rho0


def check_density_matrix(rho: np.ndarray, dim: int | None = None, *,
                         herm_tol: float = 1e-12, trace_tol: float = 1e-12,
                         psd_tol: float = 1e-10) -> np.ndarray:
    """Validate a density matrix and return it as a complex array.

    Raises ValidationError on the first violated invariant.
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValidationError(f"density matrix must be square, got shape {rho.shape}")
    if dim is not None and rho.shape[0] != dim:
        raise ValidationError(f"density matrix has dimension {rho.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(rho)):
        raise ValidationError("density matrix has non-finite entries")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > herm_tol:
        raise ValidationError(f"density matrix not Hermitian (max deviation {herm:.3e})")
    tr = np.trace(rho).real
    if abs(tr - 1) > trace_tol:
        raise ValidationError(f"trace {tr!r} differs from 1 by more than {trace_tol}")
    lmin = np.linalg.eigvalsh((rho + rho.conj().T) / 2)[0]
    if lmin < -psd_tol:
        raise ValidationError(f"density matrix not positive (min eigenvalue {lmin:.3e})")
    return rho
