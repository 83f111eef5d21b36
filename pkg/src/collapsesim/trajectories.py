"""Stochastic unraveling of the monitoring master equation, with optional feedback.

Every measured operator is diagonal, so the continuum noise field only enters
through its contraction against each configuration's smeared density.  Those
contractions are Gaussian with covariance C dt (see ``generators``); writing
C = L L^T, the monitoring is equivalent to measuring the diagonal operators
c_k = diag(L[:, k]) with unit-efficiency homodyne-like records

    dY_k = 2 <c_k> dt + dW_k.

Two one-step schemes are provided.  The Euler-Maruyama step is

    rho_xy += -Gamma_xy rho_xy dt + (dmu_x + dmu_y - 2 <dmu>) rho_xy,   dmu = L dW

and the default exponential step solves the linear equation over the step
exactly for the given record,

    rho <- M rho M,   M_x = exp((L dY)_x - C_xx dt),

which keeps every state positive.  Both agree to first order and both are
followed by trace renormalisation.  The optional gravitational back-action
uses the same step's record: the stochastic Newton potential integrated over
the smeared density gives the configuration phases phi = -(2 / kappa) L dY,
applied as exp(-i phi_x) rho_xy exp(i phi_y) after the monitoring update.
phi is a sum of per-particle terms, so this unitary is local.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evolution import evolve_exact
from .generators import GeneratorTables, build_tables, monitoring_tables
from .model import (DP, Kernel, ModelError, NumericalError, ParticleSystem, PhysicalConstants,
                    ValidationError, check_density_matrix)

TRACE_FLOOR = 1e-6
NOISE_BLOCK = 256


# --------------------------------------------------------------------------
# noise model

def pivoted_cholesky(C: np.ndarray, rel_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Diagonally pivoted Cholesky of a PSD matrix, stopping at pivots below rel_tol * max diag.

    Returns (L, pivots) with C ~= L @ L.T and L of shape (n, rank).
    Raises ModelError if a pivot is clearly negative (indefinite input).
    """
    A = np.array(C, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValidationError("covariance must be square")
    diag = np.diag(A).copy()
    scale = max(float(diag.max()), 0.0)
    if scale == 0.0:
        return np.zeros((n, 0)), np.zeros(0, dtype=int)
    L = np.zeros((n, n))
    piv = []
    for k in range(n):
        j = int(np.argmax(diag))
        if diag[j] <= rel_tol * scale:
            break
        piv.append(j)
        col = A[:, j] - L[:, :k] @ L[j, :k]
        L[:, k] = col / math.sqrt(diag[j])
        diag -= L[:, k] ** 2
        diag[piv] = 0.0
    rank = len(piv)
    L = L[:, :rank]
    if np.diag(A).min() < -1e-10 * scale or np.abs(L @ L.T - A).max() > 1e-10 * scale:
        raise ModelError("covariance is indefinite beyond tolerance")
    return L, np.array(piv, dtype=int)


@dataclass(frozen=True)
class NoiseModel:
    L: np.ndarray
    pivots: np.ndarray = field(repr=False)

    @property
    def mode_count(self) -> int:
        return self.L.shape[1]

    @property
    def dim(self) -> int:
        return self.L.shape[0]


def build_noise_model(tables: GeneratorTables) -> NoiseModel:
    C = tables.C
    L, piv = pivoted_cholesky(C)
    scale = max(float(np.abs(C).max()), 1e-300)
    if np.abs(L @ L.T - C).max() > 1e-10 * scale:
        raise ModelError("noise factor does not reproduce C")
    return NoiseModel(L, piv)


# --------------------------------------------------------------------------
# random streams

def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (master_seed, trajectory index)."""
    if not 0 <= master_seed < 2**64 or not 0 <= index < 2**64:
        raise ValidationError("seed and index must fit in 64 bits")
    return np.random.Generator(np.random.Philox(key=(int(master_seed) << 64) | int(index)))


# --------------------------------------------------------------------------
# single steps

EM = "em"
EXPONENTIAL = "exp"
SCHEMES = (EXPONENTIAL, EM)


def _drift_factor(tables: GeneratorTables, L: np.ndarray, dt: float, scheme: str) -> np.ndarray:
    """Deterministic element-wise factor of one step.

    The exponential step already produces the dephasing implied by C, so only
    the remainder Gamma - (C_xx + C_yy - 2 C_xy) / 2 (zero for monitoring
    tables) and the phase are left to this factor.
    """
    if scheme == EM:
        return 1 - (tables.Gamma + 1j * tables.Theta) * dt
    if scheme != EXPONENTIAL:
        raise ValidationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    C = L @ L.T
    c = np.diag(C)
    implied = (c[:, None] + c[None, :] - 2 * C) / 2
    return np.exp(-(tables.Gamma - implied + 1j * tables.Theta) * dt)


def _sme_update(rho: np.ndarray, dW: np.ndarray, L: np.ndarray, drift: np.ndarray, dt: float,
                scheme: str = EXPONENTIAL):
    """Batched conditional step; rho (B, d, d), dW (B, k).  Returns (unnormalised rho', dY)."""
    pops = rho.diagonal(axis1=1, axis2=2).real
    dY = dW + 2 * dt * (pops @ L)
    if scheme == EM:
        dmu = dW @ L.T
        centred = dmu - np.einsum("bx,bx->b", pops, dmu)[:, None]
        return rho * (drift[None] + centred[:, :, None] + centred[:, None, :]), dY
    log_m = dY @ L.T - dt * np.einsum("xk,xk->x", L, L)[None]
    log_m -= log_m.max(axis=1, keepdims=True)
    m = np.exp(log_m)
    return rho * drift[None] * (m[:, :, None] * m[:, None, :]), dY


def _renormalise(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tr = rho.diagonal(axis1=1, axis2=2).real.sum(axis=1)
    bad = ~np.isfinite(tr) | (tr < TRACE_FLOOR) | ~np.all(np.isfinite(rho), axis=(1, 2))
    safe = np.where(bad, 1.0, tr)
    return rho / safe[:, None, None], tr - 1.0, bad


def _phase_product(rho: np.ndarray, phases: np.ndarray) -> np.ndarray:
    u = np.exp(-1j * phases)
    return rho * (u[:, :, None] * u.conj()[:, None, :])


def step_sme(state: np.ndarray, noise_model: NoiseModel, tables: GeneratorTables, dt: float,
             rng: np.random.Generator | None = None, dW: np.ndarray | None = None,
             scheme: str = EXPONENTIAL):
    """One conditional monitoring step.  Returns (state', dY per mode).

    ``tables`` supplies the deterministic drift (Gamma and Theta).  Pass either
    a generator or explicit Wiener increments ``dW`` (variance dt each).  The
    signal uses the expectation of the incoming state.
    Raises NumericalError if the trace collapses.
    """
    if dt * tables.gamma_max > 1e-2 * (1 + 1e-12):
        raise ValidationError(f"dt * Gamma_max = {dt * tables.gamma_max:.3g} exceeds 1e-2")
    if dW is None:
        if rng is None:
            raise ValidationError("pass rng or dW")
        dW = rng.standard_normal(noise_model.mode_count) * math.sqrt(dt)
    dW = np.asarray(dW, float).reshape(1, noise_model.mode_count)
    drift = _drift_factor(tables, noise_model.L, dt, scheme)
    new, dY = _sme_update(np.asarray(state, complex)[None], dW, noise_model.L, drift, dt, scheme)
    new, _, bad = _renormalise(new)
    if bad[0]:
        raise NumericalError("trace collapsed during SME step")
    return new[0], dY[0]


def backaction_phases(signal: np.ndarray, noise_model: NoiseModel, kappa: float = 2.0) -> np.ndarray:
    """Configuration phases -(2/kappa) (L dY)_x of the stochastic Newton potential over one step."""
    return -(2.0 / kappa) * (noise_model.L @ np.asarray(signal, float))


def apply_backaction(state: np.ndarray, signal: np.ndarray, noise_model: NoiseModel, kappa: float = 2.0) -> np.ndarray:
    """Apply exp(-i V_G dt) built from the step's signal to ``state``."""
    phases = backaction_phases(signal, noise_model, kappa)
    return _phase_product(np.asarray(state, complex)[None], phases[None])[0]


def local_phase_factors(system: ParticleSystem, phases: np.ndarray) -> tuple[list[np.ndarray], float]:
    """Split configuration phases into per-particle site phases by least squares.

    Returns (factors, residual) where factors[n][s] is the phase of particle n
    at site s and residual the max misfit of sum_n factors[n][x_n] against
    ``phases``.  The split is unique up to constants moved between particles.
    """
    A = system.site_matrix()
    incidence = (A > 0).astype(float)
    v, *_ = np.linalg.lstsq(incidence, phases, rcond=None)
    residual = float(np.abs(incidence @ v - phases).max())
    factors, start = [], 0
    for p in system.particles:
        factors.append(v[start:start + p.n_sites])
        start += p.n_sites
    return factors, residual


def tensor_unitary(factors: list[np.ndarray]) -> np.ndarray:
    """Diagonal of the tensor product of per-particle diagonal unitaries exp(-i phase)."""
    u = np.ones(1, dtype=complex)
    for f in factors:
        u = np.kron(u, np.exp(-1j * np.asarray(f)))
    return u


# --------------------------------------------------------------------------
# scenarios, records and ensembles

@dataclass(frozen=True)
class Scenario:
    system: ParticleSystem
    rho0: np.ndarray
    kernel: Kernel
    constants: PhysicalConstants = PhysicalConstants()

    def monitoring(self) -> GeneratorTables:
        return monitoring_tables(self.system, self.kernel, self.constants)

    def averaged(self, with_backaction: bool, monitoring: bool = True, mean_field: bool = True) -> GeneratorTables:
        """Tables of the master equation an ensemble should reproduce."""
        mon = self.monitoring()
        if not with_backaction:
            return mon
        if not isinstance(self.kernel, DP):
            raise ValidationError("back-action is only implemented for the DP kernel")
        if monitoring and mean_field:
            return build_tables(self.system, self.kernel, self.constants, "dp-full")
        if not monitoring and not mean_field:
            # pure noise phases: dephasing (4 / kappa^2) Gamma_mon, no phase
            k = self.kernel.kappa
            return GeneratorTables(mon.Gamma * 4 / k**2, np.zeros_like(mon.Theta), mon.C, "noise-only")
        raise ValidationError("unsupported combination of monitoring and mean-field flags")


@dataclass
class TrajectoryRecord:
    seed: int
    index: int
    times: np.ndarray
    states: np.ndarray
    signals: np.ndarray
    renormalization: np.ndarray
    aborted: bool = False
    diagnostic: str = ""

    def check(self, psd_tol: float = 1e-6) -> None:
        for s in self.states:
            check_density_matrix(s, herm_tol=1e-12, trace_tol=1e-12, psd_tol=psd_tol)


@dataclass(frozen=True)
class EnsembleSummary:
    times: np.ndarray
    mean_states: np.ndarray        # (n_ck, d, d)
    stderr_real: np.ndarray        # (n_ck, d, d)
    stderr_imag: np.ndarray
    trajectory_count: int
    aborted: int
    master_seed: int
    dt: float
    with_backaction: bool

    @property
    def abort_fraction(self) -> float:
        return self.aborted / max(self.trajectory_count + self.aborted, 1)


@dataclass(frozen=True)
class _Config:
    L: np.ndarray
    drift: np.ndarray
    dt: float
    steps: np.ndarray
    rho0: np.ndarray
    monitoring: bool
    backaction: bool
    mean_field: bool
    kappa: float
    scheme: str = EXPONENTIAL


def _run_batch(cfg: _Config, seed: int, indices: range, record: bool = False):
    B = len(indices)
    k = cfg.L.shape[1]
    d = cfg.rho0.shape[0]
    n_steps = int(cfg.steps[-1])
    sqdt = math.sqrt(cfg.dt)
    rngs = [trajectory_rng(seed, i) for i in indices]
    rho = np.repeat(cfg.rho0[None], B, axis=0).astype(complex)
    bad = np.zeros(B, dtype=bool)
    out = np.empty((B, len(cfg.steps), d, d), dtype=complex)
    ck = {int(s): j for j, s in enumerate(cfg.steps)}
    log_states, log_signals, log_tr = [], [], []
    if 0 in ck:
        out[:, ck[0]] = rho
    if record:
        log_states.append(rho[0].copy())
        log_signals.append(np.zeros(k))
        log_tr.append(0.0)
    block = None
    for n in range(n_steps):
        if n % NOISE_BLOCK == 0:
            size = min(NOISE_BLOCK, n_steps - n)
            block = np.stack([g.standard_normal((size, k)) for g in rngs], axis=1) * sqdt
        dW = block[n % NOISE_BLOCK]
        pops = rho.diagonal(axis1=1, axis2=2).real
        if cfg.monitoring:
            rho, dY = _sme_update(rho, dW, cfg.L, cfg.drift, cfg.dt, cfg.scheme)
            rho, dtr, collapsed = _renormalise(rho)
            bad |= collapsed
        else:
            dY = dW + 2 * cfg.dt * (pops @ cfg.L)
            dtr = np.zeros(B)
        if cfg.backaction:
            used = dY if cfg.mean_field else dW
            rho = _phase_product(rho, -(2.0 / cfg.kappa) * (used @ cfg.L.T))
        if n + 1 in ck:
            out[:, ck[n + 1]] = rho
        if record:
            log_states.append(rho[0].copy())
            log_signals.append(dY[0].copy())
            log_tr.append(float(dtr[0]))
            if bad[0]:
                break
    if record:
        return np.array(log_states), np.array(log_signals), np.array(log_tr), bool(bad[0])
    return out, bad


def _resolve_dt(tables: GeneratorTables, dt: float | None) -> float:
    g = tables.gamma_max
    if dt is None:
        if g <= 0:
            raise ValidationError("cannot pick a default dt without dephasing")
        dt = 1e-3 / g
    if not dt > 0:
        raise ValidationError("dt must be positive")
    return dt


def _make_config(scenario: Scenario, dt: float, steps: np.ndarray, with_backaction: bool,
                 monitoring: bool, mean_field: bool, scheme: str = EXPONENTIAL) -> tuple[_Config, NoiseModel]:
    mon = scenario.monitoring()
    if monitoring and dt * mon.gamma_max > 1e-2 * (1 + 1e-12):
        raise ValidationError(f"dt * Gamma_max = {dt * mon.gamma_max:.3g} exceeds 1e-2")
    if with_backaction and not isinstance(scenario.kernel, DP):
        raise ValidationError("back-action is only implemented for the DP kernel")
    noise = build_noise_model(mon)
    kappa = scenario.kernel.kappa if isinstance(scenario.kernel, DP) else 1.0
    drift = _drift_factor(mon, noise.L, dt, scheme)
    rho0 = check_density_matrix(scenario.rho0, scenario.system.dim)
    cfg = _Config(noise.L, drift, dt, np.asarray(steps, int), rho0, monitoring, with_backaction, mean_field,
                  kappa, scheme)
    return cfg, noise


def run_trajectory(scenario: Scenario, master_seed: int, index: int, n_steps: int, dt: float | None = None,
                   with_backaction: bool = False, scheme: str = EXPONENTIAL) -> TrajectoryRecord:
    """Simulate and record one trajectory at every step."""
    dt = _resolve_dt(scenario.monitoring(), dt)
    cfg, _ = _make_config(scenario, dt, np.array([n_steps]), with_backaction, True, True, scheme)
    states, signals, tr, aborted = _run_batch(cfg, master_seed, range(index, index + 1), record=True)
    times = np.arange(len(states)) * dt
    return TrajectoryRecord(master_seed, index, times, states, signals, tr, aborted,
                            "trace collapse" if aborted else "")


def run_ensemble(scenario: Scenario, n_traj: int, master_seed: int, with_backaction: bool = False, *,
                 checkpoints=None, dt: float | None = None, threads: int = 1, batch_size: int = 500,
                 monitoring: bool = True, mean_field: bool = True,
                 scheme: str = EXPONENTIAL, allow_small: bool = False) -> EnsembleSummary:
    """Average ``n_traj`` trajectories at the checkpoint times.

    Trajectory i always uses stream (master_seed, i).  Trajectories are grouped
    in fixed batches of ``batch_size`` and the batch sums are reduced in batch
    order, so the result does not depend on ``threads``.  Checkpoints are
    rounded to whole steps; the times actually used are reported.
    ``checkpoints`` defaults to ten points up to two decoherence times of the
    averaged generator.  ``allow_small`` lowers the minimum ensemble from 100
    to 2 trajectories for quick looks; the error bands are then unreliable.
    """
    if n_traj < (2 if allow_small else 100):
        raise ValidationError(f"n_traj must be at least 100, got {n_traj}")
    target = scenario.averaged(with_backaction, monitoring, mean_field)
    if dt is None:
        dt = 1e-3 / max(target.gamma_max, scenario.monitoring().gamma_max)
    if checkpoints is None:
        checkpoints = np.linspace(0, 2 / target.gamma_max, 11)[1:]
    checkpoints = np.asarray(checkpoints, float)
    steps = np.round(checkpoints / dt).astype(int)
    if np.any(steps < 0) or np.any(np.diff(steps) <= 0):
        raise ValidationError("checkpoints must be increasing and at least one step apart")
    cfg, _ = _make_config(scenario, dt, steps, with_backaction, monitoring, mean_field, scheme)

    batches = [range(lo, min(lo + batch_size, n_traj)) for lo in range(0, n_traj, batch_size)]

    def work(idx):
        states, bad = _run_batch(cfg, master_seed, idx)
        good = states[~bad]
        return (good.sum(axis=0), (good.real**2).sum(axis=0), (good.imag**2).sum(axis=0),
                int(len(good)), int(bad.sum()))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, batches))
    else:
        parts = [work(b) for b in batches]

    s1 = np.zeros_like(parts[0][0])
    s2r = np.zeros_like(parts[0][1])
    s2i = np.zeros_like(parts[0][2])
    count = aborted = 0
    for a, br, bi, c, ab in parts:
        s1 += a
        s2r += br
        s2i += bi
        count += c
        aborted += ab
    if count < 2:
        raise NumericalError("too few surviving trajectories")
    mean = s1 / count
    var_r = np.maximum(s2r / count - mean.real**2, 0.0) * count / (count - 1)
    var_i = np.maximum(s2i / count - mean.imag**2, 0.0) * count / (count - 1)
    summary = EnsembleSummary(steps * dt, mean, np.sqrt(var_r / count), np.sqrt(var_i / count),
                              count, aborted, master_seed, dt, with_backaction)
    if summary.abort_fraction > 0.01:
        raise NumericalError(f"{aborted} of {n_traj} trajectories aborted")
    return summary


@dataclass(frozen=True)
class EnsembleComparison:
    times: np.ndarray
    max_abs_deviation: np.ndarray   # per checkpoint
    max_z: np.ndarray               # per checkpoint, deviation in standard errors
    n_se: float
    passed: bool


def compare_to_master(summary: EnsembleSummary, tables: GeneratorTables, rho0: np.ndarray,
                      n_se: float = 4.0, floor: float = 1e-12) -> EnsembleComparison:
    """Element-wise test |mean - exact| <= n_se * stderr + floor at every checkpoint.

    Only the upper triangle is tested (the lower one is its conjugate), real
    parts including the diagonal and imaginary parts strictly above it.
    ``floor`` absorbs roundoff where the standard error vanishes.
    """
    times = summary.times
    exact = evolve_exact(rho0, tables, np.concatenate([[0.0], times]) if times[0] > 0 else times,
                         validate=False).states
    if times[0] > 0:
        exact = exact[1:]
    d = rho0.shape[0]
    iu = np.triu_indices(d)
    iu1 = np.triu_indices(d, 1)
    dev = summary.mean_states - exact
    max_dev, max_z, ok = [], [], True
    for j in range(len(times)):
        dr = np.abs(dev[j].real[iu])
        di = np.abs(dev[j].imag[iu1])
        sr = summary.stderr_real[j][iu]
        si = summary.stderr_imag[j][iu1]
        ok &= bool(np.all(dr <= n_se * sr + floor) and np.all(di <= n_se * si + floor))
        z = np.concatenate([dr / np.maximum(sr, 1e-300) * (dr > floor), di / np.maximum(si, 1e-300) * (di > floor)])
        max_dev.append(max(dr.max(), di.max() if len(di) else 0.0))
        max_z.append(float(z.max()) if len(z) else 0.0)
    return EnsembleComparison(times, np.array(max_dev), np.array(max_z), n_se, ok)


# --------------------------------------------------------------------------
# raw trajectory dump
#
# layout (all little-endian):
#   8 bytes   magic b"CSTRAJ01"
#   uint32    header length H
#   H bytes   UTF-8 JSON header: seed, index, dim, mode_count, dt, n_records, params
#   records   n_records x (1 + 2 d^2 + k) float64:
#             time, state (row-major, real/imag interleaved), signal increments

MAGIC = b"CSTRAJ01"


def write_trajectory_dump(path, record: TrajectoryRecord, params: dict | None = None) -> None:
    d = record.states.shape[1]
    k = record.signals.shape[1]
    header = {
        "seed": int(record.seed), "index": int(record.index), "dim": int(d), "mode_count": int(k),
        "n_records": int(len(record.times)), "aborted": bool(record.aborted),
        "params": params or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    rows = np.empty((len(record.times), 1 + 2 * d * d + k), dtype="<f8")
    rows[:, 0] = record.times
    rows[:, 1:1 + 2 * d * d] = record.states.reshape(len(record.times), -1).view(float)
    rows[:, 1 + 2 * d * d:] = record.signals
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rows.tobytes())


def read_trajectory_dump(path) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (header, times, states, signals)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValidationError("not a trajectory dump")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    d, k, n = header["dim"], header["mode_count"], header["n_records"]
    rows = np.frombuffer(raw[12 + hlen:], dtype="<f8").reshape(n, 1 + 2 * d * d + k)
    states = rows[:, 1:1 + 2 * d * d].copy().view(complex).reshape(n, d, d)
    return header, rows[:, 0].copy(), states, rows[:, 1 + 2 * d * d:].copy()
