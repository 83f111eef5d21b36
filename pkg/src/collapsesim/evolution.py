"""Deterministic evolution under element-wise (diagonal-operator) generators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .generators import GeneratorTables
from .model import ValidationError, check_density_matrix

EXACT = "exact"
RK4 = "rk4"
FIRST_ORDER = "first-order"


@dataclass(frozen=True)
class EvolutionResult:
    times: np.ndarray
    states: np.ndarray  # (n_times, d, d)
    method: str

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if len(t) == 0 or t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ValidationError("times must start at 0 and increase strictly")

    def state_at(self, i: int) -> np.ndarray:
        return self.states[i]


def _rates(tables: GeneratorTables) -> np.ndarray:
    return tables.Gamma + 1j * tables.Theta


def _check_inputs(rho0: np.ndarray, tables: GeneratorTables) -> np.ndarray:
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (tables.dim, tables.dim):
        raise ValidationError(f"state shape {rho0.shape} does not match tables of dimension {tables.dim}")
    return rho0


def _as_times(times) -> np.ndarray:
    times = np.asarray(times, float)
    if times.ndim != 1 or len(times) == 0 or times[0] != 0 or np.any(np.diff(times) <= 0):
        raise ValidationError("times must be a 1D grid starting at 0 and strictly increasing")
    return times


def propagate(rho0: np.ndarray, tables: GeneratorTables, t: float) -> np.ndarray:
    """rho_xy(t) = exp(-(Gamma_xy + i Theta_xy) t) rho_xy(0)."""
    rho0 = _check_inputs(rho0, tables)
    return np.exp(-_rates(tables) * t) * rho0


def evolve_exact(rho0: np.ndarray, tables: GeneratorTables, times, validate: bool = True) -> EvolutionResult:
    rho0 = _check_inputs(rho0, tables)
    times = _as_times(times)
    lam = _rates(tables)
    states = np.exp(-lam[None] * times[:, None, None]) * rho0[None]
    if validate:
        for s in states:
            check_density_matrix(s, herm_tol=1e-12, trace_tol=1e-12, psd_tol=1e-10)
    return EvolutionResult(times, states, EXACT)


def _rhs(lam: np.ndarray, rho: np.ndarray) -> np.ndarray:
    # -i[diag(V), rho] - Gamma o rho written element-wise
    return -lam * rho


def evolve_rk4(rho0: np.ndarray, tables: GeneratorTables, times, dt: float) -> EvolutionResult:
    """Classic fixed-step RK4.  Each output interval is split into equal steps no larger than ``dt``."""
    rho0 = _check_inputs(rho0, tables)
    times = _as_times(times)
    rate = tables.rate_max
    if not dt > 0 or (rate > 0 and dt > 0.01 / rate * (1 + 1e-12)):
        raise ValidationError(f"dt={dt} violates dt <= 0.01 / max rate ({0.01 / rate if rate else math.inf:.3e})")
    lam = _rates(tables)
    rho = rho0.copy()
    out = [rho0.copy()]
    for t0, t1 in zip(times[:-1], times[1:]):
        n = max(1, math.ceil((t1 - t0) / dt - 1e-9))
        h = (t1 - t0) / n
        for _ in range(n):
            k1 = _rhs(lam, rho)
            k2 = _rhs(lam, rho + 0.5 * h * k1)
            k3 = _rhs(lam, rho + 0.5 * h * k2)
            k4 = _rhs(lam, rho + h * k3)
            rho = rho + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(rho.copy())
    return EvolutionResult(times, np.stack(out), RK4)


def short_time_state(rho0: np.ndarray, tables: GeneratorTables, dt: float) -> np.ndarray:
    """rho(0) + dt * L[rho(0)], the first-order expansion."""
    rho0 = _check_inputs(rho0, tables)
    if dt < 0:
        raise ValidationError("dt must be non-negative")
    if dt * tables.gamma_max > 0.1 * (1 + 1e-12):
        raise ValidationError(f"dt * Gamma_max = {dt * tables.gamma_max:.3g} exceeds 0.1")
    return rho0 + dt * _rhs(_rates(tables), rho0)


def decoherence_time(tables: GeneratorTables) -> float:
    g = tables.gamma_max
    if g <= 0:
        raise ValidationError("tables have no dephasing")
    return 1.0 / g
