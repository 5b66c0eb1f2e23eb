"""Time propagation of a lossy pair along Landau-Zener ramps.

Three routes describe the same physics:

* the non-Hermitian Schroedinger equation ``i d psi/dt = H_eff(t) psi`` whose
  squared norm is the probability that the pair has not been lost,
* the Lindblad master equation on ``(gg, eg, ee, vac)`` with a single jump
  ``|vac><ee|`` at rate ``Gamma_ee``,
* quantum-trajectory Monte Carlo with pre-drawn norm thresholds.

Because a jump sends the pair to the vacuum, which is dark, the three must
agree: the non-vacuum block of the density matrix equals ``|psi><psi|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .hamiltonian import EE, SX, PairParams, build_heff, heff_parts

RTOL = 1e-9
ATOL = 1e-12
# 8th-order Dormand-Prince keeps the global phase error of ~1e3-radian ramps below 1e-7
METHOD = "DOP853"
OMEGA_RAMP_SHAPES = ("linear", "intensity")

GG_STATE = np.array([1.0, 0.0, 0.0], dtype=complex)
EE_STATE = np.array([0.0, 0.0, 1.0], dtype=complex)


class IntegrationError(RuntimeError):
    """The adaptive integrator could not reach the requested tolerance."""

    def __init__(self, message: str, last_time: float):
        super().__init__(f"{message} (last good time {last_time:.6g} s)")
        self.last_time = last_time


@dataclass(frozen=True)
class RampProtocol:
    """Piecewise drive schedule: intensity ramp, detuning ramp, hold.

    ``Omega`` rises from 0 to ``omega_nominal`` over ``t_omega`` at fixed
    ``delta_i``; ``delta`` then moves linearly at ``delta_dot`` to
    ``delta_f``; both stay constant for ``t_hold``.  Rates in rad/s, times
    in s, ``delta_dot`` in rad/s^2 and signed.
    """

    delta_i: float
    delta_f: float
    delta_dot: float
    omega_nominal: float
    t_omega: float
    t_hold: float = 0.0
    omega_ramp_shape: str = "linear"

    def __post_init__(self):
        for name in ("delta_i", "delta_f", "delta_dot", "omega_nominal", "t_omega", "t_hold"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.omega_nominal < 0:
            raise ValueError("omega_nominal must be non-negative")
        if self.t_omega < 0 or self.t_hold < 0:
            raise ValueError("durations must be non-negative")
        if self.omega_ramp_shape not in OMEGA_RAMP_SHAPES:
            raise ValueError(f"omega_ramp_shape must be one of {OMEGA_RAMP_SHAPES}")
        span = self.delta_f - self.delta_i
        if span != 0:
            if self.delta_dot == 0 or math.copysign(1.0, self.delta_dot) != math.copysign(1.0, span):
                raise ValueError("delta_dot must be non-zero with the sign of delta_f - delta_i")

    @classmethod
    def two_leg(
        cls,
        delta_i: float,
        delta_f: float,
        speed: float,
        omega: float,
        t_hold: float = 0.0,
        omega_ramp_shape: str = "linear",
    ) -> "RampProtocol":
        """Ramp with ``t_omega = T_R/10``, i.e. ``t_omega = t_delta/9``.

        ``speed`` is the magnitude of the detuning sweep rate; its sign is
        taken from ``delta_f - delta_i``.
        """
        span = delta_f - delta_i
        delta_dot = math.copysign(abs(speed), span) if span != 0 else abs(speed)
        t_delta = span / delta_dot if span != 0 else 0.0
        return cls(delta_i, delta_f, delta_dot, omega, t_delta / 9.0, t_hold, omega_ramp_shape)

    @property
    def t_delta(self) -> float:
        span = self.delta_f - self.delta_i
        return span / self.delta_dot if span != 0 else 0.0

    @property
    def ramp_duration(self) -> float:
        """``T_R = t_omega + t_delta``."""
        return self.t_omega + self.t_delta

    @property
    def duration(self) -> float:
        return self.ramp_duration + self.t_hold

    def with_hold(self, t_hold: float) -> "RampProtocol":
        return replace(self, t_hold=t_hold)

    def omega_shape(self, u: float) -> float:
        """Fraction of the nominal Rabi frequency at ramp fraction ``u`` in [0, 1]."""
        u = min(max(u, 0.0), 1.0)
        return math.sqrt(u) if self.omega_ramp_shape == "intensity" else u

    def omega_at(self, t: float) -> float:
        if self.t_omega > 0 and t < self.t_omega:
            return self.omega_nominal * self.omega_shape(t / self.t_omega)
        return self.omega_nominal

    def delta_at(self, t: float) -> float:
        if t <= self.t_omega:
            return self.delta_i
        if t >= self.ramp_duration:
            return self.delta_f
        return self.delta_i + self.delta_dot * (t - self.t_omega)

    def segments(self) -> list[tuple[float, float, str]]:
        """Non-empty ``(t_start, t_end, kind)`` pieces, kind in intensity/detuning/hold."""
        t1 = self.t_omega
        t2 = t1 + self.t_delta
        t3 = t2 + self.t_hold
        pieces = [(0.0, t1, "intensity"), (t1, t2, "detuning"), (t2, t3, "hold")]
        return [p for p in pieces if p[1] > p[0]]


def _generator(params: PairParams, ramp: RampProtocol, kind: str):
    """Return ``h(t)`` for one ramp segment."""
    static, dz = heff_parts(params)
    if kind == "intensity":
        base = static + ramp.delta_i * dz
        return lambda t: base + ramp.omega_at(t) * SX
    if kind == "detuning":
        base = static + ramp.omega_nominal * SX
        return lambda t: base + ramp.delta_at(t) * dz
    h = static + ramp.delta_f * dz + ramp.omega_nominal * SX
    return lambda t: h


def _check_times(times, ramp: RampProtocol) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.ndim != 1 or t.size == 0:
        raise ValueError("sample_times must be a non-empty 1-D sequence")
    if np.any(np.diff(t) < 0):
        raise ValueError("sample_times must be non-decreasing")
    tol = 1e-12 * max(ramp.duration, 1.0)
    if t[0] < -tol or t[-1] > ramp.duration + tol:
        raise ValueError(f"sample_times must lie in [0, {ramp.duration:.6g}] s")
    return np.clip(t, 0.0, ramp.duration)


def _propagate(make_rhs, ramp, y0, times, rtol, atol, method, dense=False):
    """Integrate segment by segment, sampling at ``times``.

    Returns ``(samples, dense_pieces)``; each dense piece is
    ``(t0, t1, OdeSolution)`` when ``dense`` is requested.
    """
    out = np.empty((times.size, y0.size), dtype=complex)
    filled = np.zeros(times.size, dtype=bool)
    at_zero = times <= 0.0
    out[at_zero] = y0
    filled |= at_zero
    y = np.asarray(y0, dtype=complex)
    pieces = []
    for t0, t1, kind in ramp.segments():
        rhs = make_rhs(kind)
        mask = (~filled) & (times >= t0) & (times <= t1)
        t_eval = np.unique(np.concatenate([times[mask], [t1]]))
        sol = solve_ivp(
            rhs, (t0, t1), y, method=method, t_eval=t_eval, rtol=rtol, atol=atol,
            dense_output=dense,
        )
        if sol.status != 0:
            last = float(sol.t[-1]) if sol.t.size else t0
            raise IntegrationError(sol.message, last)
        idx = np.searchsorted(t_eval, times[mask])
        out[mask] = sol.y[:, idx].T
        filled |= mask
        y = sol.y[:, -1]
        if dense:
            pieces.append((t0, t1, sol.sol))
    return out, y, pieces


@dataclass(frozen=True)
class EvolutionResult:
    """Sampled pair wavefunction; amplitudes ``[time, (gg, eg, ee)]``."""

    times: np.ndarray
    amplitudes: np.ndarray

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @property
    def norm2(self) -> np.ndarray:
        """Survival probability of the pair."""
        return self.populations.sum(axis=1)

    @property
    def final(self) -> np.ndarray:
        return self.amplitudes[-1]


def _nh_rhs(params, ramp):
    def make(kind):
        h = _generator(params, ramp, kind)
        return lambda t, y: -1j * (h(t) @ y)

    return make


def _check_psi0(psi0) -> np.ndarray:
    psi = np.asarray(psi0, dtype=complex).reshape(-1)
    if psi.shape != (3,):
        raise ValueError("psi0 must have three amplitudes (gg, eg, ee)")
    if abs(np.vdot(psi, psi).real - 1.0) > 1e-10:
        raise ValueError("psi0 must be normalized")
    return psi


def evolve_nonhermitian(
    params: PairParams,
    ramp: RampProtocol,
    psi0,
    sample_times,
    *,
    rtol: float = RTOL,
    atol: float = ATOL,
    method: str = METHOD,
) -> EvolutionResult:
    """Propagate ``psi0`` under ``H_eff(t)`` without renormalization."""
    psi = _check_psi0(psi0)
    times = _check_times(sample_times, ramp)
    amps, _, _ = _propagate(_nh_rhs(params, ramp), ramp, psi, times, rtol, atol, method)
    return EvolutionResult(times, amps)


def hold_evolution(params: PairParams, delta: float, psi, times) -> EvolutionResult:
    """Exact propagation under the constant ``H_eff(delta)`` (uses ``params.omega``)."""
    h = build_heff(params, delta)
    psi = np.asarray(psi, dtype=complex)
    times = np.asarray(times, dtype=float)
    amps = np.array([expm(-1j * h * t) @ psi for t in times])
    return EvolutionResult(times, amps)


# -- Lindblad ---------------------------------------------------------------

VAC = 3


@dataclass(frozen=True)
class LindbladResult:
    """Density matrices ``[time, 4, 4]`` over ``(gg, eg, ee, vac)``."""

    times: np.ndarray
    rho: np.ndarray

    @property
    def trace(self) -> np.ndarray:
        return np.einsum("tii->t", self.rho).real

    @property
    def vacuum(self) -> np.ndarray:
        return self.rho[:, VAC, VAC].real

    @property
    def pair_block(self) -> np.ndarray:
        return self.rho[:, :3, :3]

    @property
    def pair_trace(self) -> np.ndarray:
        """Probability that the pair is still present."""
        return np.einsum("tii->t", self.pair_block).real

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.diagonal(self.pair_block, axis1=1, axis2=2))


def _check_rho0(rho0) -> np.ndarray:
    rho = np.asarray(rho0, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError("rho0 must be 4x4 over (gg, eg, ee, vac)")
    if not np.allclose(rho, rho.conj().T, atol=1e-12):
        raise ValueError("rho0 must be Hermitian")
    if abs(np.trace(rho).real - 1.0) > 1e-10:
        raise ValueError("rho0 must have unit trace")
    if np.linalg.eigvalsh(rho).min() < -1e-12:
        raise ValueError("rho0 must be positive semidefinite")
    return rho


def pure_density(psi, vacuum: float = 0.0) -> np.ndarray:
    """``|psi><psi|`` embedded in the 4x4 space, with optional vacuum weight."""
    rho = np.zeros((4, 4), dtype=complex)
    psi = np.asarray(psi, dtype=complex)
    rho[:3, :3] = np.outer(psi, psi.conj())
    rho[VAC, VAC] = vacuum
    return rho


def _lindblad_rhs(params, ramp):
    gamma = params.gamma_ee

    def make(kind):
        h3 = _generator(params, ramp, kind)

        def rhs(t, y):
            rho = y.reshape(4, 4)
            h = np.zeros((4, 4), dtype=complex)
            h[:3, :3] = h3(t)
            d = -1j * (h @ rho - rho @ h.conj().T)
            d[VAC, VAC] += gamma * rho[EE, EE]
            return d.reshape(-1)

        return rhs

    return make


def evolve_lindblad(
    params: PairParams,
    ramp: RampProtocol,
    rho0,
    sample_times,
    *,
    rtol: float = RTOL,
    atol: float = ATOL,
    method: str = METHOD,
) -> LindbladResult:
    """Integrate the master equation with jump operator ``|vac><ee|``."""
    rho = _check_rho0(rho0)
    times = _check_times(sample_times, ramp)
    ys, _, _ = _propagate(
        _lindblad_rhs(params, ramp), ramp, rho.reshape(-1), times, rtol, atol, method
    )
    return LindbladResult(times, ys.reshape(-1, 4, 4))


# -- quantum trajectories --------------------------------------------------


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, trajectory index)``."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), index]))


@dataclass(frozen=True)
class TrajectoryResult:
    times: np.ndarray
    survival_fraction: np.ndarray
    survival_stderr: np.ndarray
    populations: np.ndarray
    populations_stderr: np.ndarray
    jump_times: np.ndarray  # inf when no jump before the last sample
    seed: int

    @property
    def n_traj(self) -> int:
        return self.jump_times.size


def evolve_trajectories(
    params: PairParams,
    ramp: RampProtocol,
    psi0,
    sample_times,
    n_traj: int,
    seed: int,
    *,
    rtol: float = RTOL,
    atol: float = ATOL,
    method: str = METHOD,
) -> TrajectoryResult:
    """Monte Carlo unraveling with a pre-drawn threshold on the squared norm.

    Each trajectory draws ``r ~ U(0, 1)`` and jumps when the no-jump norm
    falls to ``r``.  A jump empties the site, so the trajectory stops there
    and contributes zero to every population afterwards.  Before a jump all
    trajectories share the same no-jump wavefunction, which is therefore
    integrated once with dense output.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    psi = _check_psi0(psi0)
    times = _check_times(sample_times, ramp)
    amps, _, pieces = _propagate(
        _nh_rhs(params, ramp), ramp, psi, times, rtol, atol, method, dense=True
    )
    norm2 = (np.abs(amps) ** 2).sum(axis=1)

    thresholds = np.array([trajectory_rng(seed, i).random() for i in range(n_traj)])
    t_last = times[-1]
    final_norm2 = norm2[-1]
    jump_times = np.full(n_traj, np.inf)

    # fine grid of the monotone no-jump norm, inverted by interpolation
    grid_t, grid_n = [], []
    for t0, t1, sol in pieces:
        if t0 >= t_last:
            break
        ts = np.asarray(sol.ts)
        ts = np.append(ts[ts < min(t1, t_last)], min(t1, t_last))
        sub = (ts[:-1, None] + np.diff(ts)[:, None] * np.linspace(0.0, 1.0, 9)[None, :-1]).ravel()
        tg = np.append(sub, ts[-1])
        y = sol(tg)
        grid_t.append(tg)
        grid_n.append((np.abs(y) ** 2).sum(axis=0))
    if grid_t:
        gt = np.concatenate(grid_t)
        gn = np.minimum.accumulate(np.concatenate(grid_n))
        pending = thresholds > final_norm2
        log_n = np.log(np.maximum(gn, np.finfo(float).tiny))
        jump_times[pending] = np.interp(-np.log(thresholds[pending]), -log_n, gt)

    alive = thresholds[None, :] < norm2[:, None]  # [time, traj]
    n = float(n_traj)
    frac = alive.mean(axis=1)
    frac_err = np.sqrt(frac * (1.0 - frac) / n)
    # state of a surviving trajectory is the renormalized no-jump state
    cond = np.zeros(amps.shape)
    np.divide(np.abs(amps) ** 2, norm2[:, None], out=cond, where=norm2[:, None] > 0)
    pops = frac[:, None] * cond
    pops_err = cond * frac_err[:, None]
    return TrajectoryResult(times, frac, frac_err, pops, pops_err, jump_times, seed)


# -- lifetime of the prepared state ----------------------------------------


@dataclass(frozen=True)
class LifetimeFit:
    gamma: float
    gamma_stderr: float
    log_residual_rms: float
    non_exponential: bool
    hold_times: np.ndarray
    norm2: np.ndarray


def prepared_state_lifetime(
    params: PairParams,
    ramp: RampProtocol,
    *,
    psi0=GG_STATE,
    n_samples: int = 41,
    settle: float | None = None,
    residual_threshold: float = 1e-3,
    rtol: float = RTOL,
    atol: float = ATOL,
    method: str = METHOD,
) -> LifetimeFit:
    """Decay rate of the pair norm during the hold after the ramp.

    The ramp itself is integrated adaptively; the hold uses the exact
    propagator of the constant final Hamiltonian.  The first ``settle``
    seconds of the hold (default ``10/Gamma_ee``) are skipped so that the
    fast-decaying lossy admixture does not bias the rate.  ``ln(norm2)`` is
    fitted linearly; a log-residual RMS above ``residual_threshold`` flags
    a non-exponential decay.
    """
    if ramp.t_hold <= 0:
        raise ValueError("ramp must include a hold segment")
    if n_samples < 3:
        raise ValueError("need at least three hold samples")
    t_r = ramp.ramp_duration
    if t_r > 0:
        res = evolve_nonhermitian(
            params, ramp.with_hold(0.0), psi0, [t_r], rtol=rtol, atol=atol, method=method
        )
        psi_end = res.final
    else:
        psi_end = _check_psi0(psi0)
    if settle is None:
        settle = 10.0 / params.gamma_ee if params.gamma_ee > 0 else 0.0
    settle = min(settle, 0.5 * ramp.t_hold)
    hold_t = np.linspace(settle, ramp.t_hold, n_samples)
    final = params.with_omega(ramp.omega_nominal)
    n2 = hold_evolution(final, ramp.delta_f, psi_end, hold_t).norm2
    y = np.log(n2)
    coef, cov = np.polyfit(hold_t, y, 1, cov="unscaled")
    resid = y - np.polyval(coef, hold_t)
    dof = max(hold_t.size - 2, 1)
    s2 = float(resid @ resid) / dof
    rms = math.sqrt(float(np.mean(resid**2)))
    return LifetimeFit(
        gamma=float(-coef[0]),
        gamma_stderr=math.sqrt(max(cov[0, 0] * s2, 0.0)),
        log_residual_rms=rms,
        non_exponential=rms > residual_threshold,
        hold_times=hold_t,
        norm2=n2,
    )
