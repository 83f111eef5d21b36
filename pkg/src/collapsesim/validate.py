"""Oracle suite behind ``collapsesim validate``.

Each check returns a ``CheckResult``; the suite runs every check exactly once
and never stops early.  ``inject_fault="flip-theta"`` negates the phase table
of the feedback generator so the checks that depend on it can be seen failing.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .entanglement import Bipartition, first_order_pq, jacobi_eigh, negativity, partial_transpose
from .evolution import evolve_exact, evolve_rk4, short_time_state
from .generators import build_tables, grid_dephasing_oracle, monitoring_tables
from .model import DP, Particle, ParticleSystem, bmv_scenario, collinear, product_state
from .overlaps import coulomb_overlap_oracle, ftilde, resolve_sigma_convention
from .trajectories import (Scenario, backaction_phases, build_noise_model, compare_to_master,
                           local_phase_factors, run_ensemble, tensor_unitary)

FAULTS = ("flip-theta",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass(frozen=True)
class ValidationSettings:
    n_traj: int = 10_000
    master_seed: int = 12345
    threads: int = 1
    inject_fault: str | None = None


def dp_full_tables(system, constants=None, fault=None):
    """Feedback generator at kappa = 2, optionally with the injected fault."""
    tables = build_tables(system, DP(2.0), constants, "dp-full")
    if fault == "flip-theta":
        tables = tables.with_theta(-tables.Theta)
    return tables


def check_overlap(_: ValidationSettings) -> tuple[bool, str]:
    worst = 0.0
    for r in (0.0, 0.5, 1.0, 2.0, 5.0):
        sigma = 1.3
        ref = coulomb_overlap_oracle([0, 0, 0], [r * sigma, 0, 0], sigma, method="quadrature").value
        worst = max(worst, abs(ftilde(r * sigma, sigma) - ref) / ref)
    mc = coulomb_overlap_oracle([0, 0, 0], [1.3, 0, 0], 1.3, samples=10**6, seed=7)
    z = abs(mc.value - ftilde(1.3, 1.3)) / mc.stderr
    ok = worst <= 1e-3 and z <= 5
    return ok, f"max rel err vs quadrature {worst:.2e} (tol 1e-3); MC deviation {z:.2f} SE"


def check_sigma_convention(_: ValidationSettings) -> tuple[bool, str]:
    conv = resolve_sigma_convention()["convention"]
    return conv == "std-dev", f"erf formula exact for width = {conv}"


def check_grid(_: ValidationSettings) -> tuple[bool, str]:
    system, _ = bmv_scenario(1.0, 1.0, 3.0, 1.0)
    tables = monitoring_tables(system, DP(2.0))
    grid = grid_dephasing_oracle(system, DP(2.0))
    mask = tables.Gamma > 0
    rel = float(np.max(np.abs(grid.Gamma[mask] - tables.Gamma[mask]) / tables.Gamma[mask]))
    C = tables.C
    c = np.diag(C)
    ident = float(np.abs((c[:, None] + c[None] - 2 * C) / 2 - tables.Gamma).max() / tables.Gamma.max())
    return rel <= 0.02 and ident <= 1e-12, f"grid rel err {rel:.2e} at {grid.cells} cells; C identity {ident:.1e}"


def sixteen_configuration_system(sigma: float = 1.0) -> tuple[ParticleSystem, np.ndarray]:
    """Two masses with four collinear sites each (d = 16) in uniform superposition."""
    p1 = Particle(1.0, collinear([0.0, 0.4, 0.9, 1.5]))
    p2 = Particle(1.0, collinear([3.0, 3.5, 4.1, 4.4]))
    return ParticleSystem((p1, p2), sigma), product_state([[1, 1, 1, 1], [1, 1, 1, 1]])


def check_rk4(settings: ValidationSettings) -> tuple[bool, str]:
    system, rho0 = sixteen_configuration_system()
    worst = 0.0
    for tables in (monitoring_tables(system, DP(2.0)), dp_full_tables(system, fault=settings.inject_fault)):
        times = np.linspace(0, 5 / tables.gamma_max, 11)
        exact = evolve_exact(rho0, tables, times).states
        rk = evolve_rk4(rho0, tables, times, 0.01 / tables.rate_max).states
        worst = max(worst, float(np.abs(exact - rk).max()))
    return worst <= 1e-8, f"max element error {worst:.2e} over 5 decoherence times, d=16"


def pq_grid():
    for a in (0.5, 1.0, 2.0):
        for d in (1.5, 3.0, 6.0):
            for sigma in (0.5, 2.0, 10.0):
                yield a, d, sigma


def brute_force_shifts(a: float, d: float, sigma: float, m: float = 1.0) -> np.ndarray:
    """First-order shifts of the zero eigenvalues of the partially transposed BMV state, per unit time."""
    system, rho0 = bmv_scenario(m, a, d, sigma)
    tables = monitoring_tables(system, DP(2.0))
    bp = Bipartition.of(system)
    w, V = jacobi_eigh(partial_transpose(rho0, system, bp))
    null = V[:, np.abs(w) < 1e-12]
    pert = partial_transpose(-tables.Gamma * rho0, system, bp)
    return jacobi_eigh(null.conj().T @ pert @ null)[0]


def check_pq(_: ValidationSettings) -> tuple[bool, str]:
    worst_pq, worst_order = 0.0, 0.0
    for a, d, sigma in pq_grid():
        pq = first_order_pq(1.0, a, d, sigma, 1.0)
        shifts = brute_force_shifts(a, d, sigma)
        expected = np.sort([0.0, -pq.p, -pq.q])
        scale = max(abs(pq.p), abs(pq.q))
        worst_pq = max(worst_pq, float(np.abs(shifts - expected).max() / scale))
        system, rho0 = bmv_scenario(1.0, a, d, sigma)
        tables = monitoring_tables(system, DP(2.0))
        dt = 0.02 / tables.gamma_max
        r1 = abs(negativity(short_time_state(rho0, tables, dt), system).negativity - first_order_pq(1, a, d, sigma, dt).n_approx)
        r2 = abs(negativity(short_time_state(rho0, tables, dt / 2), system).negativity
                 - first_order_pq(1, a, d, sigma, dt / 2).n_approx)
        K = r1 / dt**2
        worst_order = max(worst_order, r2 / (K * (dt / 2) ** 2) if K > 0 else 0.0)
    ok = worst_pq <= 1e-9 and worst_order <= 1.1
    return ok, (f"p/q vs perturbed PT spectrum rel err {worst_pq:.1e}; "
                f"second-order residual ratio {worst_order:.3f} (<= 1.1)")


def _ensemble(settings: ValidationSettings, with_backaction: bool) -> tuple[bool, str]:
    system, rho0 = bmv_scenario(1.0, 1.0, 3.0, 1.0)
    scenario = Scenario(system, rho0, DP(2.0))
    summary = run_ensemble(scenario, settings.n_traj, settings.master_seed, with_backaction,
                           threads=settings.threads)
    target = dp_full_tables(system, fault=settings.inject_fault) if with_backaction else scenario.monitoring()
    cmp = compare_to_master(summary, target, rho0)
    return cmp.passed, (f"{summary.trajectory_count} trajectories, max deviation "
                        f"{cmp.max_z.max():.2f} SE (tol 4), aborted {summary.aborted}")


def check_ensemble_monitoring(settings: ValidationSettings) -> tuple[bool, str]:
    return _ensemble(settings, False)


def check_ensemble_feedback(settings: ValidationSettings) -> tuple[bool, str]:
    return _ensemble(settings, True)


def check_backaction(settings: ValidationSettings) -> tuple[bool, str]:
    system, _ = bmv_scenario(1.0, 1.0, 3.0, 1.0)
    mon = monitoring_tables(system, DP(2.0))
    noise = build_noise_model(mon)
    rng = np.random.default_rng(settings.master_seed)
    worst_fact = worst_neg = 0.0
    for _ in range(100):
        signal = rng.standard_normal(noise.mode_count)
        phases = backaction_phases(signal, noise)
        factors, _ = local_phase_factors(system, phases)
        u = tensor_unitary(factors)
        # compare up to the irrelevant global phase
        u = u * np.exp(-1j * phases[0]) / u[0]
        worst_fact = max(worst_fact, float(np.abs(u - np.exp(-1j * phases)).max()))
        g = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        rho = g @ g.conj().T
        rho /= np.trace(rho).real
        full = np.exp(-1j * phases)
        after = full[:, None] * rho * full.conj()[None, :]
        worst_neg = max(worst_neg, negativity(after, system).negativity - negativity(rho, system).negativity)
    # averaged feedback phase: the correlated part leaves -(2/kappa)(C_xx - C_yy)
    c = np.diag(mon.C)
    full = dp_full_tables(system, fault=settings.inject_fault)
    phase_err = float(np.abs(-(2 / 2.0) * (c[:, None] - c[None]) - full.Theta).max() / max(np.abs(full.Theta).max(), 1e-300))
    ok = worst_fact <= 1e-12 and worst_neg <= 1e-12 and phase_err <= 1e-12
    return ok, (f"factorisation {worst_fact:.1e}; negativity increase {worst_neg:.1e}; "
                f"averaged phase vs Theta {phase_err:.1e}")


CHECKS: tuple[tuple[str, Callable[[ValidationSettings], tuple[bool, str]]], ...] = (
    ("overlap-closed-form-vs-oracle", check_overlap),
    ("smearing-convention", check_sigma_convention),
    ("grid-vs-closed-form-rates", check_grid),
    ("rk4-vs-exact", check_rk4),
    ("first-order-pq-vs-brute-force", check_pq),
    ("ensemble-vs-monitoring-master-equation", check_ensemble_monitoring),
    ("ensemble-vs-feedback-master-equation", check_ensemble_feedback),
    ("backaction-factorisation", check_backaction),
)


def run_validation(settings: ValidationSettings = ValidationSettings()) -> list[CheckResult]:
    if settings.inject_fault is not None and settings.inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {settings.inject_fault!r}")
    results = []
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn(settings)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, round(time.perf_counter() - start, 3)))
    return results


def report_dict(results: list[CheckResult], settings: ValidationSettings) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "settings": {k: v for k, v in asdict(settings).items() if k != "threads"},
        # timings and worker count are left out so the report is byte-reproducible
        "checks": [{k: v for k, v in asdict(r).items() if k != "seconds"} for r in results],
    }


def summary_lines(results: list[CheckResult]) -> list[str]:
    width = max(len(r.name) for r in results)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}" for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return lines

