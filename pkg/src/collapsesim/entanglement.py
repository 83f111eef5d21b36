"""Partial transpose, a cyclic Jacobi eigensolver, negativity, first-order p/q."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import NumericalError, ParticleSystem, PhysicalConstants, ValidationError
from .overlaps import ftilde

EIG = "eig"
FIRST_ORDER = "first-order"


@dataclass(frozen=True)
class Bipartition:
    left: tuple[int, ...]
    right: tuple[int, ...]

    @classmethod
    def of(cls, system: ParticleSystem, left: Sequence[int] = (0,)) -> "Bipartition":
        n = len(system.particles)
        left = tuple(sorted(set(int(i) for i in left)))
        if not left or any(not 0 <= i < n for i in left):
            raise ValidationError(f"left part {left} must be a non-empty subset of particles 0..{n - 1}")
        right = tuple(i for i in range(n) if i not in left)
        if not right:
            raise ValidationError("right part of the bipartition is empty")
        return cls(left, right)


def partial_transpose(rho: np.ndarray, system: ParticleSystem, bipartition: Bipartition) -> np.ndarray:
    """Transpose the row/column indices of every particle in ``bipartition.left``."""
    shape = system.shape
    n = len(shape)
    if set(bipartition.left) | set(bipartition.right) != set(range(n)) or set(bipartition.left) & set(bipartition.right):
        raise ValidationError("bipartition does not match the system")
    rho = np.asarray(rho)
    if rho.shape != (system.dim, system.dim):
        raise ValidationError(f"state shape {rho.shape} does not match dimension {system.dim}")
    t = rho.reshape(shape + shape)
    perm = list(range(2 * n))
    for i in bipartition.left:
        perm[i], perm[n + i] = n + i, i
    return t.transpose(perm).reshape(system.dim, system.dim)


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-13, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi diagonalisation of a complex Hermitian matrix.

    Each rotation first removes the phase of a_pq with a diagonal unitary and
    then applies the real symmetric rotation with |theta| <= pi/4.  Sweeps
    stop once the off-diagonal Frobenius norm is below ``tol * ||A||_F``.
    Returns ascending eigenvalues and the matching eigenvectors (columns).
    """
    A = np.array(matrix, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError("matrix must be square")
    scale = np.linalg.norm(A)
    if np.abs(A - A.conj().T).max() > 1e-10 * max(scale, 1.0):
        raise ValidationError("matrix is not Hermitian")
    A = (A + A.conj().T) / 2
    n = A.shape[0]
    V = np.eye(n, dtype=complex)
    target = tol * scale
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                b = abs(apq)
                if b <= 1e-300 or b < 1e-18 * target:
                    continue
                phase = apq / b
                tau = (A[q, q].real - A[p, p].real) / (2 * b)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + math.sqrt(1 + tau * tau))
                c = 1 / math.sqrt(1 + t * t)
                s = t * c
                J = np.array([[c, s], [-s * phase.conjugate(), c * phase.conjugate()]])
                idx = [p, q]
                A[:, idx] = A[:, idx] @ J
                A[idx, :] = J.conj().T @ A[idx, :]
                A[p, q] = A[q, p] = 0.0
                A[p, p] = A[p, p].real
                A[q, q] = A[q, q].real
                V[:, idx] = V[:, idx] @ J
    else:
        raise NumericalError("Jacobi iteration did not converge")
    w = np.diag(A).real
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def hermitian_eigenvalues(matrix: np.ndarray) -> np.ndarray:
    return jacobi_eigh(matrix)[0]


@dataclass(frozen=True)
class NegativityReport:
    negativity: float
    negative_eigenvalues: tuple[float, ...]
    method: str
    eigenvalues: tuple[float, ...] = ()


def negativity(rho: np.ndarray, system: ParticleSystem, bipartition: Bipartition | None = None) -> NegativityReport:
    """Sum of |negative eigenvalues| of the partial transpose."""
    bipartition = bipartition or Bipartition.of(system)
    pt = partial_transpose(rho, system, bipartition)
    lam = hermitian_eigenvalues(pt)
    neg = lam[lam < 0]
    return NegativityReport(0.0 - float(neg.sum()), tuple(float(x) for x in neg), EIG, tuple(float(x) for x in lam))


@dataclass(frozen=True)
class FirstOrderPQ:
    p: float
    q: float
    n_approx: float
    n_large_sigma: float


def first_order_pq(m: float, a: float, d: float, sigma: float, dt: float,
                   constants: PhysicalConstants | None = None) -> FirstOrderPQ:
    """First-order partial-transpose eigenvalue combinations for the two-mass setup.

    ``d`` is the centre-to-centre distance, so the inter-particle distances
    over the four configurations are near = |d - a|, d (twice) and far = d + a:

        p = c (2f(a) + f(near) + f(far) - 2f(0) - 2f(d))
        q = c (2f(a) + 2f(d) - 2f(0) - f(near) - f(far)),   c = G m^2 dt / 8 hbar

    -p and -q are the partial-transpose eigenvalues that leave zero at first
    order (monitoring-only DP, kappa = 2).  ``n_large_sigma`` is the
    small-separation form (G m^2 dt / 4 hbar){[f(a) - f(0)] + [f(near) +
    f(far) - 2 f(d)] / 2}, returned signed.  No sign is assumed for p or q.
    """
    constants = constants or PhysicalConstants()
    for name, value in (("m", m), ("a", a), ("d", d), ("sigma", sigma)):
        if not value > 0:
            raise ValidationError(f"{name} must be positive, got {value}")
    if dt < 0:
        raise ValidationError("dt must be non-negative")

    def f(z):
        return ftilde(abs(z), sigma)

    near, far = abs(d - a), d + a
    c = constants.G * m * m * dt / (8 * constants.hbar)
    p = c * (2 * f(a) + f(near) + f(far) - 2 * f(0) - 2 * f(d))
    q = c * (2 * f(a) + 2 * f(d) - 2 * f(0) - f(near) - f(far))
    large = 2 * c * ((f(a) - f(0)) + 0.5 * (f(near) + f(far) - 2 * f(d)))
    return FirstOrderPQ(p, q, max(0.0, p) + max(0.0, q), large)
