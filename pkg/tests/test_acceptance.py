"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in the terminal summary
(see conftest.py); ``python3 tests/test_acceptance.py`` prints them directly.
"""

import json
import math
import sys

import numpy as np
import pytest

from collapsesim.cli import main
from collapsesim.entanglement import first_order_pq, negativity
from collapsesim.evolution import evolve_exact, evolve_rk4, short_time_state
from collapsesim.generators import grid_dephasing_oracle, monitoring_tables
from collapsesim.model import DP, bmv_scenario
from collapsesim.overlaps import coulomb_overlap_oracle, ftilde, resolve_sigma_convention
from collapsesim.trajectories import (Scenario, backaction_phases, build_noise_model, compare_to_master,
                                      local_phase_factors, run_ensemble, run_trajectory, tensor_unitary)
from collapsesim.validate import dp_full_tables, pq_grid, sixteen_configuration_system

RESULTS: dict[int, str] = {}
MASTER_SEED = 12345


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


def bmv(sigma=1.0):
    system, rho0 = bmv_scenario(1.0, 1.0, 3.0, sigma)
    return Scenario(system, rho0, DP(2.0))


def test_criterion_1_overlap_closed_form():
    sigma = 1.0
    worst_quad, worst_mc = 0.0, 0.0
    for r in (0.0, 0.5, 1.0, 2.0, 5.0):
        closed = ftilde(r * sigma, sigma)
        quad = coulomb_overlap_oracle([0, 0, 0], [r * sigma, 0, 0], sigma, method="quadrature").value
        mc = coulomb_overlap_oracle([0, 0, 0], [r * sigma, 0, 0], sigma, samples=4 * 10**6, seed=MASTER_SEED)
        worst_quad = max(worst_quad, abs(closed - quad) / quad)
        worst_mc = max(worst_mc, abs(closed - mc.value) / mc.value)
    convention = resolve_sigma_convention()["convention"]
    ok = worst_quad <= 1e-3 and worst_mc <= 1e-3 and convention == "std-dev"
    record(1, ok, f"max rel err quadrature {worst_quad:.1e}, Monte Carlo {worst_mc:.1e} (tol 1e-3); "
                  f"convention {convention}")


def test_criterion_2_generator_equivalence():
    sc = bmv()
    tables = sc.monitoring()
    grid = grid_dephasing_oracle(sc.system, DP(2.0))
    mask = tables.Gamma > 0
    grid_err = float(np.max(np.abs(grid.Gamma[mask] / tables.Gamma[mask] - 1)))
    C = tables.C
    c = np.diag(C)
    ident = float(np.max(np.abs((c[:, None] + c[None] - 2 * C) / 2 - tables.Gamma)[mask] / tables.Gamma[mask]))
    ok = grid_err <= 0.02 and ident <= 1e-12
    record(2, ok, f"grid rel err {grid_err:.2e} at {grid.cells}^3 cells (tol 2e-2); identity {ident:.1e} (tol 1e-12)")


def test_criterion_3_rk4_vs_exact():
    system, rho0 = sixteen_configuration_system()
    worst = 0.0
    for tables in (monitoring_tables(system, DP(2.0)), dp_full_tables(system)):
        times = np.linspace(0, 5 / tables.gamma_max, 26)
        exact = evolve_exact(rho0, tables, times).states
        rk = evolve_rk4(rho0, tables, times, 0.01 / tables.rate_max).states
        worst = max(worst, float(np.abs(exact - rk).max()))
    record(3, worst <= 1e-8, f"max element error {worst:.1e} over 5 decoherence times, d=16 (tol 1e-8)")


def test_criterion_4_first_order_negativity():
    worst_ratio, points = 0.0, 0
    for a, d, sigma in pq_grid():
        system, rho0 = bmv_scenario(1.0, a, d, sigma)
        tables = monitoring_tables(system, DP(2.0))
        dt = 0.02 / tables.gamma_max
        residual = []
        for h in (dt, dt / 2):
            n = negativity(short_time_state(rho0, tables, h), system).negativity
            residual.append(abs(n - first_order_pq(1.0, a, d, sigma, h).n_approx))
        K = residual[0] / dt**2
        # the residual at dt/2 must sit inside the band fitted at dt
        worst_ratio = max(worst_ratio, residual[1] / (K * (dt / 2) ** 2) if K > 0 else 0.0)
        points += 1
    sigmas = np.geomspace(1.0, 100.0, 9)
    pqs = [first_order_pq(1.0, 1.0, 3.0, s, 1.0) for s in sigmas]
    ratios = np.array([abs(x.q) / abs(x.p) for x in pqs])
    q_faster = bool(np.all(np.diff(ratios) < 0) and ratios[-1] < 1e-2 * ratios[0])
    ok = points >= 27 and worst_ratio <= 1.1 and q_faster
    record(4, ok, f"{points} grid points, worst residual(dt/2) / K(dt/2)^2 = {worst_ratio:.3f} (tol 1.1); "
                  f"|q|/|p| falls {ratios[0]:.2g} -> {ratios[-1]:.2g} over sigma 1..100")


def test_criterion_5_backaction_locality():
    sc = bmv()
    noise = build_noise_model(sc.monitoring())
    rec = run_trajectory(sc, MASTER_SEED, 0, 500, with_backaction=True)
    worst_fact = 0.0
    for signal in rec.signals[1:]:
        phases = backaction_phases(signal, noise)
        factors, _ = local_phase_factors(sc.system, phases)
        u = tensor_unitary(factors)
        u = u / u[0] * np.exp(-1j * phases[0])
        worst_fact = max(worst_fact, float(np.abs(u - np.exp(-1j * phases)).max()))
    rng = np.random.default_rng(MASTER_SEED)
    worst_neg = -np.inf
    for i in range(100):
        g = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        rho = g @ g.conj().T
        rho /= np.trace(rho).real
        u = np.exp(-1j * backaction_phases(rec.signals[1 + i], noise))
        after = u[:, None] * rho * u.conj()[None, :]
        worst_neg = max(worst_neg, negativity(after, sc.system).negativity - negativity(rho, sc.system).negativity)
    ok = worst_fact <= 1e-12 and worst_neg <= 1e-12
    record(5, ok, f"factorisation {worst_fact:.1e} over {len(rec.signals) - 1} steps (tol 1e-12); "
                  f"max negativity increase {worst_neg:.1e} over 100 states (tol 1e-12)")


def test_criterion_6_unraveling_consistency():
    sc = bmv()
    details, ok = [], True
    for with_backaction, target in ((False, sc.monitoring()), (True, dp_full_tables(sc.system))):
        summary = run_ensemble(sc, 10_000, MASTER_SEED, with_backaction)
        cmp = compare_to_master(summary, target, sc.rho0)
        ok &= cmp.passed and len(summary.times) == 10 and summary.aborted == 0
        details.append(f"{target.tag}: max {cmp.max_z.max():.2f} SE")
    record(6, ok, "; ".join(details) + " at 10 checkpoints, 10^4 trajectories (tol 4 SE)")


def _negativity_band(summary, j, d):
    se = np.hypot(summary.stderr_real[j], summary.stderr_imag[j])
    # |N(a) - N(b)| <= sqrt(d) ||a - b||_F / 2, with a 4 SE deviation per element
    return 0.5 * math.sqrt(d) * 4 * float(np.linalg.norm(se))


def test_criterion_7_entanglement_attribution():
    sc = bmv()
    d = sc.system.dim
    # back-action noise alone, no monitoring dissipator
    noise_only = run_ensemble(sc, 10_000, MASTER_SEED, True, monitoring=False, mean_field=False)
    ref = sc.averaged(True, monitoring=False, mean_field=False)
    consistent = compare_to_master(noise_only, ref, sc.rho0).passed
    worst_excess = max(negativity(m, sc.system).negativity - _negativity_band(noise_only, j, d)
                       for j, m in enumerate(noise_only.mean_states))
    part1 = consistent and worst_excess <= 0
    # monitoring enabled: early-time slope of the ensemble-mean negativity
    g = sc.monitoring().gamma_max
    early = run_ensemble(sc, 10_000, MASTER_SEED, False, checkpoints=np.linspace(0, 0.2 / g, 6)[1:])
    t = early.times
    n_mean = np.array([negativity(m, sc.system).negativity for m in early.mean_states])
    n_exact = np.array([negativity(s, sc.system).negativity
                        for s in evolve_exact(sc.rho0, sc.monitoring(), np.concatenate([[0], t])).states[1:]])
    slope = float(np.dot(t, n_mean) / np.dot(t, t))
    slope_exact = float(np.dot(t, n_exact) / np.dot(t, t))
    pq = first_order_pq(1.0, 1.0, 3.0, 1.0, 1.0)
    predicted = max(0.0, pq.p) + max(0.0, pq.q)
    scale = abs(pq.p) + abs(pq.q)
    # predicted slope is zero here, so the 10% band is taken on the rate scale |p| + |q|
    part2 = abs(slope - predicted) <= 0.1 * scale and abs(slope_exact - predicted) <= 0.1 * scale
    record(7, part1 and part2,
           f"noise-only mean negativity minus MC band {worst_excess:.2e} (<= 0), ensemble matches averaged "
           f"generator: {consistent}; early slope {slope:.2e} (exact {slope_exact:.2e}) vs first-order "
           f"{predicted:.2e} +/- {0.1 * scale:.2e}")


def test_criterion_8_determinism(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sigma": 1.0, "trajectories": {"n_traj": 500, "with_backaction": True},
                               "time": {"n_points": 11}}), encoding="utf-8")
    commands = [["rates"], ["evolve"], ["sweep"], ["trajectories"], ["validate", "--quick"]]
    mismatched = []
    for cmd in commands:
        outputs = []
        for threads in ("1", "3", "1"):
            out = tmp_path / f"{cmd[0]}-{threads}-{len(outputs)}.out"
            main(cmd + ["--config", str(cfg), "--seed", "7", "--threads", threads, "--out", str(out)])
            outputs.append(out.read_bytes())
        if not outputs[0] or len(set(outputs)) != 1:
            mismatched.append(cmd[0])
    svgs = []
    for i in range(2):
        svg = tmp_path / f"plot-{i}.svg"
        main(["plot", str(tmp_path / "sweep-1-0.out"), "--out", str(svg), "--log-x"])
        svgs.append(svg.read_bytes())
    if len(set(svgs)) != 1:
        mismatched.append("plot")
    capsys.readouterr()
    record(8, not mismatched, f"{len(commands) + 1} commands byte-identical across runs and 1/3 threads"
           if not mismatched else f"differences in {mismatched}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
