from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zenopair.dynamics import RampProtocol
from zenopair.experiment import (
    Dataset,
    EnsembleModel,
    bare_levels,
    figure1_pipeline,
    figure2_pipeline,
    figure3_pipeline,
    figure4_pipeline,
    fit_decay,
    landau_zener_transfer,
    observables,
    transfer_probability,
    two_level_evolve,
)
from zenopair.hamiltonian import hz, to_hz

SPEED = hz(11.1e3)


@st.composite
def simplex(draw, n):
    w = np.array([draw(st.floats(0.0, 1.0)) for _ in range(n + 1)])
    if w.sum() == 0:
        w[-1] = 1.0
    return (w / w.sum())[:n]


# -- ensemble bookkeeping -----------------------------------------------------


def test_model_validation():
    with pytest.raises(ValueError):
        EnsembleModel(-1.0, 0.0)
    with pytest.raises(ValueError):
        EnsembleModel(1.0, 1.0, eta_rp=0.0)
    with pytest.raises(ValueError):
        EnsembleModel(1.0, 1.0, eta_rp=1.2)
    with pytest.raises(ValueError):
        EnsembleModel(np.inf, 1.0)


def test_all_ground_state():
    ob = observables(EnsembleModel(100, 200), (1, 0, 0), (1, 0))
    assert ob.n_g == 500.0
    assert ob.n_e == 0.0


def test_eg_pairs_detection_scale():
    ob = observables(EnsembleModel(0, 200, 0.8), (0, 1, 0), (1, 0))
    assert ob.n_g == 200.0
    assert ob.n_e_detected == pytest.approx(160.0)


def test_lost_pairs_leave_shell_asymptote():
    ob = observables(EnsembleModel(100, 200), (0, 0, 0), (1, 0))
    assert ob.n_total == 100.0
    assert ob.lost_pairs == 200.0


def test_observables_reject_bad_probabilities():
    m = EnsembleModel(1, 1)
    with pytest.raises(ValueError):
        observables(m, (0.6, 0.6, 0.0), (1, 0))
    with pytest.raises(ValueError):
        observables(m, (1, 0, 0), (-0.5, 1.0))
    with pytest.raises(ValueError):
        observables(m, (1, 0), (1, 0))


@given(st.floats(0, 1e4), st.floats(0, 1e4), simplex(3), simplex(1))
def test_atom_number_conservation(n1, n2, pair, p_g):
    single = (p_g[0], 1.0 - p_g[0])
    ob = observables(EnsembleModel(n1, n2), pair, single)
    total = ob.n_g + ob.n_e + 2.0 * ob.lost_pairs
    assert total == pytest.approx(n1 + 2.0 * n2, rel=1e-12, abs=1e-9)


@given(st.floats(0, 1e4), st.floats(0, 1e4), simplex(3), simplex(1))
def test_detection_only_scales_e_counts(n1, n2, pair, p_g):
    single = (p_g[0], 1.0 - p_g[0])
    ideal = observables(EnsembleModel(n1, n2, 1.0), pair, single)
    real = observables(EnsembleModel(n1, n2, 0.8), pair, single)
    assert real.n_g == ideal.n_g
    assert real.n_e == ideal.n_e
    assert real.n_e_detected == pytest.approx(0.8 * ideal.n_e_detected, rel=1e-15, abs=0)
    assert real.n_total_detected == pytest.approx(real.n_g + 0.8 * ideal.n_e, rel=1e-15)


# -- decay fits ----------------------------------------------------------------


def synthetic(f1=500.0, f2=1500.0, gamma=8.0, n=20):
    t = np.linspace(0.0, 0.4, n)
    return t, f1 + f2 * np.exp(-gamma * t)


def test_fit_noiseless_round_trip():
    t, c = synthetic()
    fit = fit_decay(t, c)
    np.testing.assert_allclose([fit.f1, fit.f2, fit.gamma], [500.0, 1500.0, 8.0], rtol=1e-6)
    assert not fit.degenerate and not fit.no_decay_resolved
    assert np.all(np.isfinite(fit.stderr))


def test_fit_constant_data_is_degenerate():
    t = np.linspace(0.0, 1.0, 12)
    fit = fit_decay(t, np.full_like(t, 321.0))
    assert fit.degenerate
    assert fit.f2 == pytest.approx(0.0, abs=1e-6)
    assert fit.f1 == pytest.approx(321.0)


def test_fit_rising_data_resolves_no_decay():
    t = np.linspace(0.0, 1.0, 12)
    fit = fit_decay(t, 100.0 + 10.0 * t)
    assert fit.no_decay_resolved
    assert fit.gamma == pytest.approx(0.0, abs=1e-9)


def test_fit_noise_study():
    t, c = synthetic()
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        noisy = c * (1.0 + 0.05 * rng.standard_normal(c.shape))
        errs.append(abs(fit_decay(t, noisy).gamma / 8.0 - 1.0))
    assert np.median(errs) < 0.05


def test_fit_weights_scale_covariance():
    t, c = synthetic()
    rng = np.random.default_rng(0)
    noisy = c + 10.0 * rng.standard_normal(c.shape)
    fit = fit_decay(t, noisy, weights=np.full_like(c, 0.1))
    # with sigma = 10 the reported errors are absolute, not rescaled by chi^2
    assert 0 < fit.stderr[2] < 2.0


@pytest.mark.parametrize(
    "times, counts",
    [
        ([0, 1, 2], [3, 2, 1]),
        ([0, 1, 2, -3], [4, 3, 2, 1]),
        ([1, 1, 1, 1], [4, 3, 2, 1]),
        ([0, 1, 2, 3], [4, np.nan, 2, 1]),
        ([0, 1, 2, 3], [4, 3, 2]),
    ],
)
def test_fit_rejects_bad_input(times, counts):
    with pytest.raises(ValueError):
        fit_decay(times, counts)


def test_fit_rejects_bad_weights():
    t, c = synthetic()
    with pytest.raises(ValueError):
        fit_decay(t, c, weights=-np.ones_like(c))


@given(st.floats(0.0, 1e4), st.floats(1.0, 1e4), st.floats(0.5, 50.0))
def test_fit_bounds_hold(f1, f2, gamma):
    t, c = synthetic(f1, f2, gamma)
    fit = fit_decay(t, c)
    assert fit.f1 >= 0 and fit.f2 >= 0 and fit.gamma >= 0


# -- single atoms ---------------------------------------------------------------


def sweep(omega_hz=150.0, speed=SPEED, d_i=-1500.0, d_f=1500.0):
    return RampProtocol.two_leg(hz(d_i), hz(d_f), speed, hz(omega_hz))


def test_no_drive_stays_ground():
    ramp = sweep()
    res = two_level_evolve(0.0, ramp, np.linspace(0, ramp.duration, 9))
    np.testing.assert_allclose(res.p_g, 1.0, atol=1e-12)


def test_full_sweep_transfers():
    ramp = sweep()
    p = transfer_probability(hz(150.0), ramp)
    assert p == pytest.approx(landau_zener_transfer(hz(150.0), SPEED), abs=1e-3)
    # the dressed state at +1500 Hz still holds (Omega/2 delta)^2 of |g>
    assert two_level_evolve(hz(150.0), ramp).p_e[-1] > 0.99


@pytest.mark.parametrize("speed_hz_per_ms", [1.11, 11.1, 111.0])
def test_landau_zener_formula(speed_hz_per_ms):
    om = hz(15.0)
    speed = hz(speed_hz_per_ms * 1e3)
    ramp = RampProtocol.two_leg(hz(-1500.0), hz(1500.0), speed, om)
    assert transfer_probability(om, ramp) == pytest.approx(
        landau_zener_transfer(om, speed), abs=1e-3
    )


def test_stop_on_resonance_flagged():
    res = two_level_evolve(hz(150.0), sweep(d_f=0.0))
    assert res.ends_near_resonance
    assert not two_level_evolve(hz(150.0), sweep()).ends_near_resonance


def test_probabilities_conserved():
    ramp = sweep(d_f=300.0)
    res = two_level_evolve(hz(150.0), ramp, np.linspace(0, ramp.duration, 11))
    np.testing.assert_allclose(res.p_g + res.p_e, 1.0, atol=1e-8)


def test_transfer_needs_nonzero_start():
    with pytest.raises(ValueError):
        transfer_probability(hz(150.0), sweep(d_i=0.0))


# -- datasets -----------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset("x", {"a": np.zeros(3), "b": np.zeros(4)})
    with pytest.raises(ValueError):
        Dataset("x", {"a": np.zeros((2, 2))})
    ds = Dataset("x", {"a": [1.0, np.inf]})
    assert ds.n_rows == 2 and not ds.all_finite()


# -- spectral datasets ----------------------------------------------------------


@pytest.fixture(scope="module")
def spectra(nominal):
    return figure1_pipeline(nominal, deltas=hz(np.linspace(-1500, 1500, 241)))


def test_spectra_checks_pass(spectra):
    assert spectra.passed
    assert set(spectra.datasets) == {"strong_re", "strong_im", "zeno_re", "zeno_im"}
    for ds in spectra.datasets.values():
        assert ds.all_finite() and ds.n_rows == 241


def test_zeno_decay_in_window(spectra, nominal):
    im = spectra.datasets["zeno_im"].columns
    g3 = np.max([im[f"gamma{b}_hz"] for b in range(3)], axis=0) / to_hz(nominal.gamma_ee)
    assert g3.min() >= 0.9 and g3.max() <= 1.0 + 1e-12
    assert "zeno2x2_gamma_upper_hz" in im


def test_undriven_spectra_are_bare_lines(nominal):
    d = hz(np.linspace(-1500, 1500, 61))
    res = figure1_pipeline(nominal.with_omega(0.0), (0.0, 0.0), d)
    re = res.datasets["zeno_re"].columns
    eps = np.sort(np.column_stack([re[f"eps{b}_hz"] for b in range(3)]), axis=1)
    bare = np.sort(to_hz(bare_levels(nominal, d)), axis=1)
    np.testing.assert_allclose(eps, bare, atol=1e-9)


def test_spectra_reject_bad_input(nominal):
    with pytest.raises(ValueError):
        figure1_pipeline(nominal, deltas=[])
    with pytest.raises(ValueError):
        figure1_pipeline(nominal, (1.0,), hz(np.linspace(-10, 10, 3)))


# -- prepared-state decay rates ---------------------------------------------------


@pytest.fixture(scope="module")
def lifetimes(nominal):
    return figure3_pipeline(nominal, hz(np.array([-900.0, 300.0])), spectrum_points=301)


def test_lifetime_pipeline_checks(lifetimes):
    assert lifetimes.passed
    assert lifetimes.metrics["max_enhancement"] >= 100
    assert set(lifetimes.datasets) == {
        "ascending", "descending", "ascending_theory", "descending_theory",
    }


def test_lifetime_pipeline_consistency(lifetimes):
    for label in ("ascending", "descending"):
        c = lifetimes.datasets[label].columns
        ok = c["max_margin"] < 0.1
        assert ok.any()
        dev = np.abs(c["gamma_sim_hz"][ok] / c["gamma_branch_hz"][ok] - 1)
        assert dev.max() <= 0.05


def test_weak_loss_curves_coincide(nominal):
    weak = nominal.with_gamma(1e-3 * nominal.gamma_ee)
    res = figure3_pipeline(weak, hz(np.array([400.0])), spectrum_points=201, max_hold=5.0)
    for label in ("ascending_theory", "descending_theory"):
        c = res.datasets[label].columns
        keep = c["gamma_branch_hz"] > 1e-9 * to_hz(weak.gamma_ee)
        np.testing.assert_allclose(c["enhancement"][keep], 1.0, rtol=2e-2)


# -- atom numbers ---------------------------------------------------------------


@pytest.fixture(scope="module")
def atom_numbers(nominal):
    model = EnsembleModel(1000.0, 1000.0)
    return figure4_pipeline(model, nominal, hz(np.array([1500.0, 650.0, -300.0, -1400.0])))


def test_atom_number_checks(atom_numbers):
    assert atom_numbers.passed
    assert set(atom_numbers.datasets) == {"ng", "ntotal", "n1", "n2"}


def test_zero_length_detuning_ramp_keeps_pairs(atom_numbers):
    n2 = atom_numbers.datasets["n2"].columns
    assert n2["delta_f_hz"][0] == 1500.0
    assert n2["N2_dynamics"][0] == pytest.approx(2000.0, rel=1e-6)


def test_shell_constant_while_singles_transfer(atom_numbers):
    n1 = atom_numbers.datasets["n1"].columns
    np.testing.assert_allclose(n1["N1"], 1000.0, rtol=1e-2)
    # below resonance the single atoms sit in e and count with eta_rp
    assert n1["N1_detected"][-1] == pytest.approx(800.0, rel=1e-2)


def test_noiseless_fit_recovers_shell_signals(atom_numbers):
    n1 = atom_numbers.datasets["n1"].columns
    n2 = atom_numbers.datasets["n2"].columns
    np.testing.assert_allclose(n1["N1_fit"], n1["N1_detected"], rtol=1e-3)
    np.testing.assert_allclose(n2["N2_fit"], n2["N2_detected"], rtol=1e-2)


def test_noisy_fit_within_covariance(nominal):
    model = EnsembleModel(1000.0, 1000.0)
    res = figure4_pipeline(model, nominal, hz(np.array([650.0, -300.0])), noise=0.05, seed=3)
    n1 = res.datasets["n1"].columns
    n2 = res.datasets["n2"].columns
    assert np.all(np.abs(n1["N1_fit"] - n1["N1_detected"]) <= 3 * n1["N1_fit_err"])
    assert np.all(np.abs(n2["N2_fit"] - n2["N2_detected"]) <= 3 * n2["N2_fit_err"])


def test_atom_numbers_reject_empty_grid(nominal):
    with pytest.raises(ValueError):
        figure4_pipeline(EnsembleModel(1, 1), nominal, [])


def test_hold_curve_fit(nominal):
    res = figure2_pipeline(EnsembleModel(1000.0, 1000.0), nominal)
    assert res.passed
    assert res.metrics["gamma"] == pytest.approx(res.metrics["gamma_branch"], rel=0.05)
