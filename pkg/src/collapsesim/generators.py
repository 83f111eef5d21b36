"""Dephasing, phase and noise-covariance tables over configuration pairs.

All mass-density operators are diagonal in the joint configuration basis,
so the averaged generators act element-wise:

    d rho_xy / dt = -(Gamma_xy + i Theta_xy) rho_xy

Gamma comes from the kernel double commutator, Theta from the effective pair
potential, and C is the covariance (per unit time) of the configuration
noise that unravels Gamma: Gamma_xy = (C_xx + C_yy - 2 C_xy) / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import CSL, DP, Kernel, ModelError, ParticleSystem, PhysicalConstants, ValidationError
from .overlaps import ftilde

MONITORING = "monitoring-only"
DP_FULL = "dp-full"
CSL_MONITORING = "csl-monitoring"
_ROW_BLOCK = 256


@dataclass(frozen=True)
class GeneratorTables:
    Gamma: np.ndarray
    Theta: np.ndarray
    C: np.ndarray
    tag: str
    V: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.Gamma.shape[0]

    @property
    def gamma_max(self) -> float:
        return float(self.Gamma.max())

    @property
    def rate_max(self) -> float:
        return max(float(np.abs(self.Gamma).max()), float(np.abs(self.Theta).max()))

    def with_theta(self, theta: np.ndarray) -> "GeneratorTables":
        return GeneratorTables(self.Gamma, theta, self.C, self.tag, self.V)

    def check(self) -> "GeneratorTables":
        G, T, C = self.Gamma, self.Theta, self.C
        scale = max(float(np.abs(G).max()), 1e-300)
        if np.abs(G - G.T).max() > 1e-12 * scale or np.abs(np.diag(G)).max() > 1e-12 * scale:
            raise ModelError("Gamma must be symmetric with zero diagonal")
        if G.min() < -1e-14 - 1e-12 * scale:
            raise ModelError(f"negative dephasing rate {G.min():.3e}")
        if np.abs(T + T.T).max() > 1e-12 * max(float(np.abs(T).max()), 1e-300):
            raise ModelError("Theta must be antisymmetric")
        _check_psd(C)
        return self


def _pair_function(kernel: Kernel, z: np.ndarray, sigma: float) -> np.ndarray:
    if isinstance(kernel, DP):
        return np.asarray(ftilde(z, sigma))
    if isinstance(kernel, CSL):
        return np.exp(-(z**2) / (4 * sigma**2)) / (4 * math.pi * sigma**2) ** 1.5
    raise ValidationError(f"unsupported kernel {kernel!r}")


def _kernel_scale(kernel: Kernel, constants: PhysicalConstants) -> float:
    """Strength multiplying the pair function, in rate units.

    DP: kappa G / hbar.  CSL: gamma is taken to already be a rate coefficient.
    """
    if isinstance(kernel, DP):
        return kernel.kappa * constants.G / constants.hbar
    return kernel.gamma


def _mass_pair_sums(system: ParticleSystem, kernel: Kernel) -> tuple[np.ndarray, np.ndarray]:
    """Position-space sums S_xy = sum_nm m_n m_m k(|x_n - y_m|) and the Gamma combination.

    Returns (S, D) with D_xy = S_xx + S_yy - 2 S_xy computed from the pair
    function evaluated at each configuration's own positions (no site matrix).
    """
    pos = system.all_positions()  # (d, N, 3)
    mm = np.outer(system.masses, system.masses)
    d = system.dim
    S = np.empty((d, d))
    for lo in range(0, d, _ROW_BLOCK):
        hi = min(lo + _ROW_BLOCK, d)
        z = np.linalg.norm(pos[lo:hi, None, :, None, :] - pos[None, :, None, :, :], axis=-1)
        S[lo:hi] = np.einsum("xynm,nm->xy", _pair_function(kernel, z, system.sigma), mm)
    S = (S + S.T) / 2  # blockwise summation order leaves roundoff asymmetry
    # self sums use the same-configuration distances
    zself = np.linalg.norm(pos[:, :, None, :] - pos[:, None, :, :], axis=-1)
    s_self = np.einsum("xnm,nm->x", _pair_function(kernel, zself, system.sigma), mm)
    D = s_self[:, None] + s_self[None, :] - 2 * S
    np.fill_diagonal(D, 0.0)
    return S, D


def site_covariance(system: ParticleSystem, kernel: Kernel, constants: PhysicalConstants | None = None) -> np.ndarray:
    """Covariance per unit time of the kernel-contracted noise at each site point."""
    constants = constants or PhysicalConstants()
    points, _, _ = system.site_points()
    z = np.linalg.norm(points[:, None] - points[None], axis=-1)
    return _kernel_scale(kernel, constants) / 4 * _pair_function(kernel, z, system.sigma)


def dephasing_rates(system: ParticleSystem, kernel: Kernel, constants: PhysicalConstants | None = None) -> np.ndarray:
    """Monitoring dephasing matrix Gamma (kernel double commutator with prefactor 1/8)."""
    constants = constants or PhysicalConstants()
    _, D = _mass_pair_sums(system, kernel)
    return _kernel_scale(kernel, constants) / 8 * D


def _check_psd(C: np.ndarray) -> None:
    lam = np.linalg.eigvalsh(C)
    if lam[0] < -1e-10 * max(abs(lam[-1]), 1e-300):
        raise ModelError(f"noise covariance is not positive semidefinite (min eigenvalue {lam[0]:.3e})")


def noise_covariance(system: ParticleSystem, kernel: Kernel, constants: PhysicalConstants | None = None) -> np.ndarray:
    """C = A S A^T, built from the site-point covariance and the incidence matrix."""
    A = system.site_matrix()
    C = A @ site_covariance(system, kernel, constants) @ A.T
    C = (C + C.T) / 2
    _check_psd(C)
    return C


def effective_potential(system: ParticleSystem, constants: PhysicalConstants | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Configuration energies of -(G/2) sum_nm m_n m_m ftilde(|x_n - x_m|) and Theta.

    Self terms (n = m) are kept in V; they are configuration independent and
    drop out of Theta, which is asserted against a self-term-free evaluation.
    """
    constants = constants or PhysicalConstants()
    pos = system.all_positions()
    mm = np.outer(system.masses, system.masses)
    z = np.linalg.norm(pos[:, :, None, :] - pos[:, None, :, :], axis=-1)
    pair = np.asarray(ftilde(z, system.sigma)) * mm
    V = -constants.G / 2 * pair.sum(axis=(1, 2))
    theta = (V[:, None] - V[None, :]) / constants.hbar

    off = ~np.eye(len(system.particles), dtype=bool)
    V_cross = -constants.G / 2 * pair[:, off].sum(axis=1)
    theta_cross = (V_cross[:, None] - V_cross[None, :]) / constants.hbar
    scale = max(float(np.abs(V).max()) / constants.hbar, 1e-300)
    if np.abs(theta - theta_cross).max() > 1e-12 * scale:
        raise ModelError("self-interaction terms failed to cancel in Theta")
    return V, theta


def monitoring_tables(system: ParticleSystem, kernel: Kernel, constants: PhysicalConstants | None = None) -> GeneratorTables:
    """Averaged monitoring generator alone: pure dephasing, no phase."""
    constants = constants or PhysicalConstants()
    gamma = dephasing_rates(system, kernel, constants)
    C = noise_covariance(system, kernel, constants)
    tag = MONITORING if isinstance(kernel, DP) else CSL_MONITORING
    return GeneratorTables(gamma, np.zeros_like(gamma), C, tag).check()


def dp_full_generator(system: ParticleSystem, constants: PhysicalConstants | None = None,
                      kappa: float = 2.0) -> GeneratorTables:
    """Monitoring plus averaged gravitational back-action for the DP kernel.

    The back-action adds a dephasing term (G / 2 kappa) times the same pair
    sums as the monitoring term (kappa G / 8), and the pair-potential phase.
    At kappa = 2 both halves are equal and Gamma = (G / 2) * pair sums.
    C stays the monitoring covariance, which is what the unraveling samples.
    """
    constants = constants or PhysicalConstants()
    kernel = DP(kappa)
    _, D = _mass_pair_sums(system, kernel)
    gamma = (kappa / 8 + 1 / (2 * kappa)) * constants.G / constants.hbar * D
    V, theta = effective_potential(system, constants)
    C = noise_covariance(system, kernel, constants)
    return GeneratorTables(gamma, theta, C, DP_FULL, V).check()


def dp_full_closed_form_gamma(system: ParticleSystem, constants: PhysicalConstants | None = None) -> np.ndarray:
    """Dissipator of the standalone DP equation, (G/2) x the 1/|r-s| double commutator."""
    constants = constants or PhysicalConstants()
    _, D = _mass_pair_sums(system, DP(1.0))
    return constants.G / 2 / constants.hbar * D


def proportionality(full: np.ndarray, partial: np.ndarray, floor: float = 1e-300) -> tuple[float, float]:
    """Elementwise ratio full/partial over off-diagonal pairs: (mean ratio, max spread)."""
    mask = ~np.eye(full.shape[0], dtype=bool) & (np.abs(partial) > floor)
    ratio = full[mask] / partial[mask]
    return float(ratio.mean()), float(ratio.max() - ratio.min())


def build_tables(system: ParticleSystem, kernel: Kernel, constants: PhysicalConstants | None, model: str) -> GeneratorTables:
    if model in ("dp-monitoring", MONITORING):
        if not isinstance(kernel, DP):
            raise ValidationError("dp-monitoring needs a DP kernel")
        return monitoring_tables(system, kernel, constants)
    if model == DP_FULL:
        if not isinstance(kernel, DP):
            raise ValidationError("dp-full needs a DP kernel")
        return dp_full_generator(system, constants, kernel.kappa)
    if model == CSL_MONITORING:
        if not isinstance(kernel, CSL):
            raise ValidationError("csl-monitoring needs a CSL kernel")
        return monitoring_tables(system, kernel, constants)
    raise ValidationError(f"unknown model {model!r}")


# --------------------------------------------------------------------------
# spatial grid oracle

# integral of 1/|r| over the unit cube centred on the origin
_CUBE_SELF = 2.3800772494


@dataclass(frozen=True)
class GridOracleResult:
    Gamma: np.ndarray
    cells: int
    history: list


def _grid_gamma(system: ParticleSystem, kernel: Kernel, constants: PhysicalConstants,
                n: int, rho_probe: np.ndarray) -> np.ndarray:
    points, owner, _ = system.site_points()
    sigma = system.sigma
    extent = float(np.ptp(points, axis=0).max())
    side = max(12 * sigma, extent + 10 * sigma)
    h = side / n
    centre = points.mean(axis=0)
    axis = (np.arange(n) - (n - 1) / 2) * h
    X, Y, Z = np.meshgrid(axis + centre[0], axis + centre[1], axis + centre[2], indexing="ij")
    norm = (2 * math.pi * sigma**2) ** -1.5
    fields = np.stack([norm * np.exp(-((X - p[0]) ** 2 + (Y - p[1]) ** 2 + (Z - p[2]) ** 2) / (2 * sigma**2))
                       for p in points]).reshape(len(points), -1)

    if isinstance(kernel, DP):
        # zero-padded FFT convolution with 1/|r|; the origin cell uses its cell average
        m = 2 * n
        k = np.minimum(np.arange(m), m - np.arange(m)) * h
        KX, KY, KZ = np.meshgrid(k, k, k, indexing="ij")
        r = np.sqrt(KX**2 + KY**2 + KZ**2)
        r[0, 0, 0] = 1.0
        kern = 1.0 / r
        kern[0, 0, 0] = _CUBE_SELF / h
        kern_hat = np.fft.rfftn(kern)
        potentials = []
        for f in fields:
            padded = np.zeros((m, m, m))
            padded[:n, :n, :n] = f.reshape(n, n, n)
            conv = np.fft.irfftn(np.fft.rfftn(padded) * kern_hat, s=(m, m, m), axes=(0, 1, 2))[:n, :n, :n]
            potentials.append(conv.ravel() * h**3)
        potentials = np.stack(potentials) * kernel.kappa * constants.G / constants.hbar
    else:
        potentials = fields * kernel.gamma

    A = system.site_matrix()
    dens = A @ fields        # rho_sigma(r) eigenvalue per configuration
    pot = A @ potentials     # sum_s gamma_rs rho_sigma(s) per configuration
    # sum_r [rho(r), [Psi(r), rho]] with diagonal operators, expanded term by term
    Q = h**3 * dens @ pot.T
    q = np.diag(Q)
    dc = q[:, None] * rho_probe - Q * rho_probe - Q.T * rho_probe + rho_probe * q[None, :]
    return (dc / rho_probe).real / 8


def grid_dephasing_oracle(system: ParticleSystem, kernel: Kernel, constants: PhysicalConstants | None = None,
                          cells: int = 24, tol: float = 0.005, max_cells: int = 96) -> GridOracleResult:
    """Discretise the smeared densities on a cubic grid and apply the double commutator.

    The grid is doubled until the largest Gamma entry changes by less than
    ``tol`` (relative) or ``max_cells`` is reached.
    """
    constants = constants or PhysicalConstants()
    if cells < 24:
        raise ValidationError("grid oracle needs at least 24 cells per axis")
    d = system.dim
    rng = np.random.default_rng(0)
    probe = rng.uniform(0.5, 1.5, (d, d)) * np.exp(1j * rng.uniform(0, 2 * np.pi, (d, d)))
    probe = probe + probe.conj().T
    history = []
    prev = None
    n = cells
    while True:
        gamma = _grid_gamma(system, kernel, constants, n, probe)
        history.append((n, float(gamma.max())))
        if prev is not None:
            change = np.abs(gamma - prev).max() / max(np.abs(gamma).max(), 1e-300)
            if change < tol:
                break
        if 2 * n > max_cells:
            break
        prev = gamma
        n *= 2
    return GridOracleResult(gamma, n, history)
