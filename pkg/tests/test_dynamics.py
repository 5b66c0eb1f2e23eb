from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import solve_ivp

from zenopair.dynamics import (
    EE_STATE,
    GG_STATE,
    RTOL,
    RampProtocol,
    evolve_lindblad,
    evolve_nonhermitian,
    evolve_trajectories,
    hold_evolution,
    prepared_state_lifetime,
    pure_density,
)
from zenopair.hamiltonian import PairParams, build_heff, hz
from zenopair.spectrum import sweep_spectrum


def hold_only(t_hold, omega=0.0, delta=0.0):
    return RampProtocol(delta, delta, 0.0, omega, 0.0, t_hold)


# -- RampProtocol ---------------------------------------------------------------


def test_two_leg_ramp_timing(descending_ramp):
    r = descending_ramp
    assert r.t_omega == pytest.approx(r.ramp_duration / 10)
    assert r.t_delta == pytest.approx(3000.0 / 11.1e3)
    assert math.copysign(1, r.delta_dot) == math.copysign(1, r.delta_f - r.delta_i)


def test_ramp_schedule(descending_ramp):
    r = descending_ramp.with_hold(0.01)
    assert r.omega_at(0.0) == 0.0
    assert r.omega_at(0.5 * r.t_omega) == pytest.approx(0.5 * r.omega_nominal)
    assert r.delta_at(0.5 * r.t_omega) == r.delta_i
    mid = r.t_omega + 0.5 * r.t_delta
    assert r.delta_at(mid) == pytest.approx(0.5 * (r.delta_i + r.delta_f), abs=1e-9)
    assert r.delta_at(r.duration) == r.delta_f
    assert [s[2] for s in r.segments()] == ["intensity", "detuning", "hold"]


def test_intensity_shape():
    r = RampProtocol(0.0, 0.0, 0.0, 4.0, 1.0, omega_ramp_shape="intensity")
    assert r.omega_at(0.25) == pytest.approx(2.0)


def test_ramp_validation():
    with pytest.raises(ValueError):
        RampProtocol(0.0, 1.0, -1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        RampProtocol(0.0, 1.0, 1.0, -1.0, 0.1)
    with pytest.raises(ValueError):
        RampProtocol(0.0, 1.0, 1.0, 1.0, 0.1, omega_ramp_shape="cubic")


# -- non-Hermitian propagation ----------------------------------------------------


def test_isolated_lossy_level(nominal):
    t = np.linspace(0.0, 3e-3, 31)
    res = evolve_nonhermitian(nominal, hold_only(3e-3), EE_STATE, t)
    np.testing.assert_allclose(res.norm2, np.exp(-nominal.gamma_ee * t), atol=1e-8)


def test_dark_state(nominal):
    res = evolve_nonhermitian(nominal, hold_only(0.1), GG_STATE, np.linspace(0, 0.1, 11))
    np.testing.assert_allclose(res.norm2, 1.0, atol=1e-12)


def test_spin_one_rotation_transfers_fully():
    om = hz(150.0)
    params = PairParams(0.0, 0.0, 0.0, 0.0)
    t_pi = math.pi / om
    res = evolve_nonhermitian(params, hold_only(t_pi, om), GG_STATE, [t_pi])
    assert res.populations[-1, 2] == pytest.approx(1.0, abs=1e-8)


def test_rejects_unnormalized_state(nominal):
    with pytest.raises(ValueError):
        evolve_nonhermitian(nominal, hold_only(1e-3), [1.0, 1.0, 0.0], [0.0])
    with pytest.raises(ValueError):
        evolve_nonhermitian(nominal, hold_only(1e-3), GG_STATE, [0.0, 1.0])


@pytest.fixture(scope="module")
def dense_descending(nominal, descending_ramp):
    t = np.linspace(0.0, descending_ramp.duration, 2001)
    return t, evolve_nonhermitian(nominal, descending_ramp, GG_STATE, t)


def test_norm_monotone(dense_descending):
    _, res = dense_descending
    # dense-output interpolation may wiggle at the integrator tolerance
    assert np.all(np.diff(res.norm2) <= 10 * RTOL)


def test_norm_decay_law(nominal, dense_descending):
    t, res = dense_descending
    dn = np.gradient(res.norm2, t, edge_order=2)
    resid = dn + nominal.gamma_ee * res.populations[:, 2]
    # finite differences of the sampled norm dominate the residual
    assert np.abs(resid[2:-2]).max() <= 1e-3 * nominal.gamma_ee


def test_time_reversal_without_loss(nominal, descending_ramp):
    params = nominal.with_gamma(0.0)
    r = descending_ramp
    end = evolve_nonhermitian(params, r, GG_STATE, [r.duration], rtol=1e-11, atol=1e-13).final

    def rhs(t, y):
        h = build_heff(params.with_omega(r.omega_at(t)), r.delta_at(t))
        return -1j * (h @ y)

    back = solve_ivp(rhs, (r.duration, r.t_omega), end, rtol=1e-11, atol=1e-13, method="DOP853")
    back = solve_ivp(rhs, (r.t_omega, 0.0), back.y[:, -1], rtol=1e-11, atol=1e-13,
                     method="DOP853")
    assert abs(np.vdot(GG_STATE, back.y[:, -1])) ** 2 >= 1 - 1e-6


def test_tolerance_refinement_converges(nominal, descending_ramp):
    r = descending_ramp
    a = evolve_nonhermitian(nominal, r, GG_STATE, [r.duration], rtol=1e-9, atol=1e-12).norm2[-1]
    b = evolve_nonhermitian(nominal, r, GG_STATE, [r.duration], rtol=5e-10, atol=5e-13).norm2[-1]
    assert abs(a - b) <= 1e-7


def test_hold_evolution_matches_integrator(nominal):
    d = hz(300.0)
    t = np.linspace(0, 0.02, 5)
    exact = hold_evolution(nominal, d, GG_STATE, t)
    ode = evolve_nonhermitian(nominal, hold_only(0.02, nominal.omega, d), GG_STATE, t,
                              rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(exact.amplitudes, ode.amplitudes, atol=1e-8)


# -- Lindblad ---------------------------------------------------------------


def test_lindblad_vacuum_growth(nominal):
    t = np.linspace(0, 2e-3, 11)
    res = evolve_lindblad(nominal, hold_only(2e-3), pure_density(EE_STATE), t)
    np.testing.assert_allclose(res.vacuum, 1 - np.exp(-nominal.gamma_ee * t), atol=1e-8)


def test_lindblad_rejects_unphysical(nominal):
    bad = np.diag([1.0, 1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        evolve_lindblad(nominal, hold_only(1e-3), bad, [0.0])
    neg = np.diag([1.5, -0.5, 0.0, 0.0])
    with pytest.raises(ValueError):
        evolve_lindblad(nominal, hold_only(1e-3), neg, [0.0])


@pytest.fixture(scope="module")
def lindblad_descending(nominal, descending_ramp):
    t = np.linspace(0.0, descending_ramp.duration, 41)
    return evolve_lindblad(nominal, descending_ramp, pure_density(GG_STATE), t)


def test_lindblad_trace_preserved(lindblad_descending):
    np.testing.assert_allclose(lindblad_descending.trace, 1.0, atol=1e-9)


def test_lindblad_block_is_pure_state(nominal, descending_ramp, lindblad_descending):
    t = lindblad_descending.times
    psi = evolve_nonhermitian(nominal, descending_ramp, GG_STATE, t).amplitudes
    outer = np.einsum("ti,tj->tij", psi, psi.conj())
    assert np.abs(lindblad_descending.pair_block - outer).max() <= 1e-7


# -- trajectories -------------------------------------------------------------


def test_trajectories_lossless(nominal, descending_ramp):
    params = nominal.with_gamma(0.0)
    t = np.linspace(0, descending_ramp.duration, 5)
    res = evolve_trajectories(params, descending_ramp, GG_STATE, t, 200, seed=1)
    assert np.all(res.survival_fraction == 1.0)
    assert np.all(np.isinf(res.jump_times))


def test_trajectories_seeded():
    params = PairParams.nominal()
    r = hold_only(2e-3)
    t = np.linspace(0, 2e-3, 5)
    a = evolve_trajectories(params, r, EE_STATE, t, 500, seed=3)
    b = evolve_trajectories(params, r, EE_STATE, t, 500, seed=3)
    c = evolve_trajectories(params, r, EE_STATE, t, 500, seed=4)
    np.testing.assert_array_equal(a.jump_times, b.jump_times)
    assert not np.array_equal(a.jump_times, c.jump_times)


def test_trajectories_match_norm(nominal, descending_ramp, dense_descending):
    t, nh = dense_descending
    t, norm = t[::100], nh.norm2[::100]
    res = evolve_trajectories(nominal, descending_ramp, GG_STATE, t, 10_000, seed=7)
    sigma = np.sqrt(norm * (1 - norm) / 10_000)
    assert np.all(np.abs(res.survival_fraction - norm) <= 3 * sigma + 1e-12)


def test_jump_times_exponential(nominal):
    t_end = 20.0 / nominal.gamma_ee
    res = evolve_trajectories(nominal, hold_only(t_end), EE_STATE, [0.0, t_end], 10_000, seed=11)
    jumps = res.jump_times[np.isfinite(res.jump_times)]
    assert jumps.size >= 9990
    p = stats.kstest(jumps, "expon", args=(0.0, 1.0 / nominal.gamma_ee)).pvalue
    assert p > 0.01


def test_trajectories_need_one(nominal):
    with pytest.raises(ValueError):
        evolve_trajectories(nominal, hold_only(1e-3), GG_STATE, [0.0], 0, seed=0)


@given(st.integers(0, 2**32))
def test_trajectory_fraction_in_unit_interval(seed):
    params = PairParams.nominal()
    res = evolve_trajectories(params, hold_only(1e-3), EE_STATE, [0.0, 5e-4, 1e-3], 50, seed)
    assert np.all((res.survival_fraction >= 0) & (res.survival_fraction <= 1))
    assert np.all(np.diff(res.survival_fraction) <= 0)


# -- prepared-state lifetime -----------------------------------------------------


def test_lifetime_far_below_resonance(nominal):
    r = RampProtocol.two_leg(hz(1500.0), hz(-1500.0), hz(11.1e3), nominal.omega)
    sw = sweep_spectrum(nominal, np.linspace(r.delta_i, r.delta_f, 601))
    g_branch = sw.gamma[-1, 0]
    fit = prepared_state_lifetime(nominal, r.with_hold(4.0 / g_branch))
    assert fit.gamma < 0.01 * nominal.gamma_ee
    assert fit.gamma == pytest.approx(g_branch, rel=0.05)


def test_lifetime_single_exponential_at_650(nominal):
    r = RampProtocol.two_leg(hz(1500.0), hz(650.0), hz(11.1e3), nominal.omega)
    fit = prepared_state_lifetime(nominal, r.with_hold(0.5))
    assert not fit.non_exponential


def test_lifetime_without_loss(nominal):
    r = RampProtocol.two_leg(hz(1500.0), hz(650.0), hz(11.1e3), nominal.omega, t_hold=0.1)
    fit = prepared_state_lifetime(nominal.with_gamma(0.0), r)
    assert fit.gamma == pytest.approx(0.0, abs=1e-6)


def test_lifetime_requires_hold(nominal, descending_ramp):
    with pytest.raises(ValueError):
        prepared_state_lifetime(nominal, descending_ramp.with_hold(0.0))
