import numpy as np
import pytest

from collapsesim.entanglement import negativity
from collapsesim.evolution import propagate
from collapsesim.generators import GeneratorTables, dp_full_generator, monitoring_tables
from collapsesim.model import (CSL, DP, ModelError, Particle, ParticleSystem, ValidationError, bmv_scenario,
                               collinear, product_state)
from collapsesim.trajectories import (EM, Scenario, apply_backaction, backaction_phases, build_noise_model,
                                      compare_to_master, local_phase_factors, pivoted_cholesky,
                                      read_trajectory_dump, run_ensemble, run_trajectory, step_sme,
                                      tensor_unitary, trajectory_rng, write_trajectory_dump)


def bmv(sigma=1.0):
    system, rho0 = bmv_scenario(1.0, 1.0, 3.0, sigma)
    return Scenario(system, rho0, DP(2.0))


def test_diagonal_covariance_factor():
    L, _ = pivoted_cholesky(np.diag([4.0, 1.0, 9.0]))
    np.testing.assert_allclose(np.sort(np.abs(L).sum(axis=0)), [1, 2, 3])
    np.testing.assert_allclose(L @ L.T, np.diag([4.0, 1.0, 9.0]))


def test_coincident_sites_give_one_mode():
    system = ParticleSystem((Particle(1.0, collinear([0.0, 0.0])), Particle(1.0, collinear([2.0, 2.0]))), 1.0)
    noise = build_noise_model(monitoring_tables(system, DP(2.0)))
    assert noise.mode_count == 1


@pytest.mark.parametrize("sigma", [0.3, 1.0, 10.0])
def test_noise_factor_reconstructs_covariance(sigma):
    tables = bmv(sigma).monitoring()
    noise = build_noise_model(tables)
    assert noise.mode_count <= tables.dim
    assert np.abs(noise.L @ noise.L.T - tables.C).max() <= 1e-10 * np.abs(tables.C).max()


def test_indefinite_covariance_is_a_model_error():
    with pytest.raises(ModelError):
        pivoted_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_zero_noise_step_is_the_drift_step():
    sc = bmv()
    tables = sc.monitoring()
    noise = build_noise_model(tables)
    errs = []
    for dt in (1e-2 / tables.gamma_max, 5e-3 / tables.gamma_max):
        state, _ = step_sme(sc.rho0, noise, tables, dt, dW=np.zeros(noise.mode_count), scheme=EM)
        errs.append(np.abs(state - propagate(sc.rho0, tables, dt)).max())
    # O(dt^2): halving dt divides the error by about four.  The exponential
    # step carries its Ito correction in the deterministic part, so only its
    # mean (tested below) reduces to the drift.
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_diagonal_state_stays_diagonal():
    sc = bmv()
    tables = sc.monitoring()
    noise = build_noise_model(tables)
    rho = np.diag([0.1, 0.2, 0.3, 0.4]).astype(complex)
    rng = trajectory_rng(1, 0)
    for _ in range(50):
        rho, _ = step_sme(rho, noise, tables, 1e-3 / tables.gamma_max, rng)
    np.testing.assert_array_equal(rho - np.diag(np.diag(rho)), 0)


@pytest.mark.parametrize("scheme", ["exp", EM])
def test_single_step_ensemble_reproduces_drift(scheme):
    sc = bmv()
    tables = sc.monitoring()
    noise = build_noise_model(tables)
    dt = 1e-2 / tables.gamma_max
    rng = trajectory_rng(2024, 0)
    n = 10_000
    states = np.array([step_sme(sc.rho0, noise, tables, dt, rng, scheme=scheme)[0] for _ in range(n)])
    mean = states.mean(axis=0)
    se = np.maximum(states.real.std(axis=0, ddof=1), 1e-300) / np.sqrt(n)
    target = sc.rho0 * (1 - tables.Gamma * dt)
    assert np.all(np.abs(mean.real - target.real) <= 3 * se + 1e-12)  # floor: summation roundoff


def test_signal_statistics():
    sc = bmv()
    tables = sc.monitoring()
    noise = build_noise_model(tables)
    dt = 1e-3 / tables.gamma_max
    rng = trajectory_rng(77, 0)
    n = 20_000
    signals = np.array([step_sme(sc.rho0, noise, tables, dt, rng)[1] for _ in range(n)])
    expected_mean = 2 * dt * (np.real(np.diag(sc.rho0)) @ noise.L)
    se_mean = np.sqrt(dt / n)
    assert np.all(np.abs(signals.mean(axis=0) - expected_mean) <= 3 * se_mean)
    cov = np.cov(signals.T)
    se_cov = dt * np.sqrt(2 / n)
    assert np.all(np.abs(cov - dt * np.eye(noise.mode_count)) <= 3 * se_cov)


def test_step_precondition():
    sc = bmv()
    tables = sc.monitoring()
    noise = build_noise_model(tables)
    with pytest.raises(ValidationError):
        step_sme(sc.rho0, noise, tables, 0.02 / tables.gamma_max, trajectory_rng(0, 0))


def test_backaction_is_a_local_unitary():
    sc = bmv()
    noise = build_noise_model(sc.monitoring())
    rng = np.random.default_rng(9)
    for _ in range(20):
        phases = backaction_phases(rng.standard_normal(noise.mode_count), noise)
        factors, residual = local_phase_factors(sc.system, phases)
        assert residual <= 1e-12
        u = tensor_unitary(factors)
        u = u / u[0] * np.exp(-1j * phases[0])
        assert np.abs(u - np.exp(-1j * phases)).max() <= 1e-12


def test_backaction_keeps_product_states_pure_per_particle():
    sc = bmv()
    noise = build_noise_model(sc.monitoring())
    rho = product_state([[1, 0.3 + 0.2j], [0.5, 1]])
    out = apply_backaction(rho, np.array([0.7, -1.1, 0.4]), noise)
    reduced = out.reshape(2, 2, 2, 2).trace(axis1=1, axis2=3)
    assert np.real(np.trace(reduced @ reduced)) == pytest.approx(1.0, abs=1e-12)


def test_backaction_never_adds_negativity():
    sc = bmv()
    noise = build_noise_model(sc.monitoring())
    rng = np.random.default_rng(10)
    for _ in range(100):
        g = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        rho = g @ g.conj().T
        rho /= np.trace(rho).real
        out = apply_backaction(rho, rng.standard_normal(noise.mode_count), noise)
        assert negativity(out, sc.system).negativity <= negativity(rho, sc.system).negativity + 1e-12


def test_zero_signal_is_identity():
    sc = bmv()
    noise = build_noise_model(sc.monitoring())
    np.testing.assert_array_equal(apply_backaction(sc.rho0, np.zeros(noise.mode_count), noise), sc.rho0)


def test_trajectory_records_stay_physical():
    sc = bmv()
    rec = run_trajectory(sc, 5, 0, 3000, with_backaction=True)
    assert not rec.aborted
    rec.check(psd_tol=1e-6)
    assert rec.states.shape == (3001, 4, 4)
    assert rec.signals.shape == (3001, 3)


def test_euler_maruyama_records_lose_positivity():
    # documents why the exponential step is the default
    rec = run_trajectory(bmv(), 12345, 0, 2000, scheme=EM)
    worst = min(np.linalg.eigvalsh(s).min() for s in rec.states)
    assert worst < -1e-6


def test_ensemble_determinism_and_thread_independence():
    sc = bmv()
    a = run_ensemble(sc, 300, 42, True, batch_size=64)
    b = run_ensemble(sc, 300, 42, True, batch_size=64, threads=3)
    c = run_ensemble(sc, 300, 42, True, batch_size=64)
    for x in (b, c):
        assert x.mean_states.tobytes() == a.mean_states.tobytes()
        assert x.stderr_real.tobytes() == a.stderr_real.tobytes()
    d = run_ensemble(sc, 300, 43, True, batch_size=64)
    assert d.mean_states.tobytes() != a.mean_states.tobytes()


def test_ensemble_mean_trace():
    s = run_ensemble(bmv(), 200, 1, False)
    for m in s.mean_states:
        assert abs(np.trace(m) - 1) <= 1e-9


def test_ensemble_guards():
    sc = bmv()
    with pytest.raises(ValidationError):
        run_ensemble(sc, 50, 0)
    csl = Scenario(sc.system, sc.rho0, CSL(1.0))
    with pytest.raises(ValidationError):
        run_ensemble(csl, 100, 0, with_backaction=True)


def test_comparison_flags_a_wrong_reference():
    sc = bmv()
    summary = run_ensemble(sc, 2000, 3, True)
    full = dp_full_generator(sc.system)
    assert compare_to_master(summary, full, sc.rho0).passed
    wrong = GeneratorTables(full.Gamma, -full.Theta, full.C, "flipped")
    assert not compare_to_master(summary, wrong, sc.rho0).passed


def test_dump_round_trip(tmp_path):
    rec = run_trajectory(bmv(), 7, 3, 25, with_backaction=True)
    path = tmp_path / "run.bin"
    write_trajectory_dump(path, rec, {"sigma": 1.0})
    header, times, states, signals = read_trajectory_dump(path)
    assert header["seed"] == 7 and header["index"] == 3 and header["params"] == {"sigma": 1.0}
    assert path.read_bytes()[:8] == b"CSTRAJ01"
    np.testing.assert_array_equal(times, rec.times)
    np.testing.assert_array_equal(states, rec.states)
    np.testing.assert_array_equal(signals, rec.signals)
