"""Pair Hamiltonian construction.

Two bosonic two-level atoms in one tight trap span the exchange-symmetric
basis ``(|gg>, |eg>, |ee>)``.  Every operator here is a 3x3 complex matrix in
that basis, divided by hbar, so entries are angular frequencies in rad/s.

The driven pair is described by::

    H_eff = (p - delta) Sz - q Sz^2 + Omega Sx - i (Gamma_ee / 2) |ee><ee|

with spin-1 matrices ``Sz = diag(-1, 0, 1)`` and ``Sx`` the usual
tridiagonal matrix with entries ``1/sqrt(2)``.  In the Zeno regime
(``Omega << Gamma_ee``) the lossy level can be eliminated, leaving a 2x2
effective Hamiltonian on ``(|gg>, |eg>)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)

GG, EG, EE = 0, 1, 2
BASIS_LABELS = ("gg", "eg", "ee")

SZ = np.diag([-1.0, 0.0, 1.0]).astype(complex)
SX = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]], dtype=complex) / SQRT2
P_EE = np.diag([0.0, 0.0, 1.0]).astype(complex)

PQ_CONVENTIONS = ("main_text", "table1")

# Collisional properties of 174Yb in the clock-state lattice.
NOMINAL_U_GG_HZ = 1400.0
NOMINAL_U_EG_RATIO = 0.905
NOMINAL_U_EE_RATIO = 1.21
NOMINAL_GAMMA_RATIO = 1.02
NOMINAL_OMEGA_HZ = 150.0


def hz(value_hz: float) -> float:
    """Ordinary frequency (Hz) to angular frequency (rad/s)."""
    return TWO_PI * value_hz


def to_hz(value_rad: float):
    """Angular frequency (rad/s) to ordinary frequency (Hz)."""
    return value_rad / TWO_PI


@dataclass(frozen=True)
class PairParams:
    """Physical parameters of one atom pair, all in rad/s.

    ``pq_convention`` selects how ``(p, q)`` follow from the interaction
    energies; see :func:`derive_pq`.
    """

    u_gg: float
    u_eg: float
    u_ee: float
    gamma_ee: float
    omega: float = 0.0
    pq_convention: str = "main_text"

    def __post_init__(self):
        for name in ("u_gg", "u_eg", "u_ee", "gamma_ee", "omega"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.gamma_ee < 0:
            raise ValueError("gamma_ee must be non-negative")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.pq_convention not in PQ_CONVENTIONS:
            raise ValueError(
                f"pq_convention must be one of {PQ_CONVENTIONS}, got {self.pq_convention!r}"
            )

    @classmethod
    def nominal(
        cls,
        u_gg_hz: float = NOMINAL_U_GG_HZ,
        omega_hz: float = NOMINAL_OMEGA_HZ,
        *,
        u_eg_ratio: float = NOMINAL_U_EG_RATIO,
        u_ee_ratio: float = NOMINAL_U_EE_RATIO,
        gamma_ratio: float = NOMINAL_GAMMA_RATIO,
        gamma_ee_hz: float | None = None,
        pq_convention: str = "main_text",
    ) -> "PairParams":
        """Build parameters from ``U_gg/h`` and the tabulated ratios.

        ``gamma_ee_hz`` overrides the ratio ``hbar Gamma_ee / U_gg`` when given.
        """
        u_gg = hz(u_gg_hz)
        gamma = hz(gamma_ee_hz) if gamma_ee_hz is not None else gamma_ratio * u_gg
        return cls(
            u_gg=u_gg,
            u_eg=u_eg_ratio * u_gg,
            u_ee=u_ee_ratio * u_gg,
            gamma_ee=gamma,
            omega=hz(omega_hz),
            pq_convention=pq_convention,
        )

    def with_omega(self, omega: float) -> "PairParams":
        return PairParams(self.u_gg, self.u_eg, self.u_ee, self.gamma_ee, omega, self.pq_convention)

    def with_gamma(self, gamma_ee: float) -> "PairParams":
        return PairParams(self.u_gg, self.u_eg, self.u_ee, gamma_ee, self.omega, self.pq_convention)

    @property
    def p(self) -> float:
        return derive_pq(self)[0]

    @property
    def q(self) -> float:
        return derive_pq(self)[1]


def derive_pq(params: PairParams) -> tuple[float, float]:
    """Return the transition-frequency shifts ``(p, q)`` in rad/s.

    ``main_text``: ``p = (U_ee - U_gg)/2``, ``q = U_eg - (U_gg + U_ee)/2``.
    With this choice the gg-eg resonance sits at ``delta = p + q = U_eg - U_gg``.

    ``table1``: ``p = U_ee - U_gg``, ``q = (U_ee + U_gg)/2 - U_eg``, the
    alternative definition printed with the collisional-property table.
    """
    if params.pq_convention == "table1":
        return params.u_ee - params.u_gg, 0.5 * (params.u_ee + params.u_gg) - params.u_eg
    return 0.5 * (params.u_ee - params.u_gg), params.u_eg - 0.5 * (params.u_gg + params.u_ee)


def heff_parts(params: PairParams) -> tuple[np.ndarray, np.ndarray]:
    """Split ``H_eff(delta, Omega) = static + delta * D + Omega * SX``.

    Returns ``(static, D)``; ``static`` holds the interaction shifts and the
    loss term, ``D = diag(1, 0, -1) = -SZ``.  Used by the time propagators
    to rebuild the Hamiltonian cheaply at every step.
    """
    p, q = derive_pq(params)
    static = np.diag([-p - q, 0.0, p - q]).astype(complex)
    static[EE, EE] -= 0.5j * params.gamma_ee
    return static, -SZ


def build_h0(params: PairParams, delta: float) -> np.ndarray:
    """Uncoupled part ``(p - delta) Sz - q Sz^2`` (diagonal, Hermitian)."""
    p, q = derive_pq(params)
    a = p - delta
    return np.diag([-a - q, 0.0, a - q]).astype(complex)


def build_coupling(omega: float) -> np.ndarray:
    """Laser coupling ``Omega Sx``; entries ``Omega/sqrt(2)`` on the off-diagonals."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    return omega * SX


def build_heff(params: PairParams, delta: float) -> np.ndarray:
    """Full non-Hermitian pair Hamiltonian at detuning ``delta``."""
    h = build_h0(params, delta) + build_coupling(params.omega)
    h[EE, EE] -= 0.5j * params.gamma_ee
    return h


def build_hermitian_part(params: PairParams, delta: float) -> np.ndarray:
    """Coherent part ``H0 + W`` (the Hamiltonian with ``Gamma_ee`` set to zero)."""
    return build_h0(params, delta) + build_coupling(params.omega)


@dataclass(frozen=True)
class EffectiveTwoLevel:
    """Zeno-regime reduction of the pair Hamiltonian onto ``(|gg>, |eg>)``.

    ``matrix`` is written about the mid-point of the two diagonal entries;
    add ``energy_offset`` to its eigenvalues to compare with the 3x3 frame.
    """

    matrix: np.ndarray
    delta_q: float
    gamma_eff: float
    x: float
    delta_prime: float
    energy_offset: float

    def exact_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``matrix`` (no offset), sorted by real part, descending."""
        w = np.linalg.eigvals(self.matrix)
        return w[np.argsort(-w.real)]


def zeno_shift(params: PairParams, delta: float) -> tuple[float, float, float]:
    """Return ``(x, delta_q, gamma_eff)`` for the eliminated ``|ee>`` level.

    ``delta_q + i gamma_eff/2 = (Omega^2/Gamma_ee) (x + i)/(1 + x^2)`` with
    ``x = 2 (p - q - delta)/Gamma_ee``.
    """
    if params.gamma_ee <= 0:
        raise ValueError("Zeno reduction undefined without dissipation")
    p, q = derive_pq(params)
    x = 2.0 * (p - q - delta) / params.gamma_ee
    z = (params.omega**2 / params.gamma_ee) * (x + 1j) / (1.0 + x * x)
    return x, z.real, 2.0 * z.imag


def build_effective_two_level(params: PairParams, delta: float) -> EffectiveTwoLevel:
    x, delta_q, gamma_eff = zeno_shift(params, delta)
    p, q = derive_pq(params)
    delta_prime = delta - (p + q - delta_q)
    om = params.omega
    m = 0.5 * np.array(
        [[delta_prime, SQRT2 * om], [SQRT2 * om, -delta_prime - 1j * gamma_eff]],
        dtype=complex,
    )
    # gg sits at delta - p - q and eg at -delta_q in the 3x3 frame.
    offset = 0.5 * (delta - p - q - delta_q)
    return EffectiveTwoLevel(m, delta_q, gamma_eff, x, delta_prime, offset)


def lambda12_approx(params: PairParams, delta: float) -> tuple[complex, complex]:
    """Perturbative eigenvalues of the 2x2 Zeno Hamiltonian.

    Returns ``(lambda_1, lambda_2)`` in rad/s about the same origin as
    :attr:`EffectiveTwoLevel.matrix`; ``lambda_1`` is the upper branch.
    Valid for ``Omega << Gamma_ee``; warns when ``Omega/Gamma_ee > 0.3``.
    """
    eff = build_effective_two_level(params, delta)
    if params.omega > 0.3 * params.gamma_ee:
        warnings.warn(
            f"Omega/Gamma_ee = {params.omega / params.gamma_ee:.3g} is outside the Zeno regime",
            RuntimeWarning,
            stacklevel=2,
        )
    dp = eff.delta_prime
    om22 = math.sqrt(dp * dp + 2.0 * params.omega**2)
    if om22 == 0.0:
        return -0.25j * eff.gamma_eff, -0.25j * eff.gamma_eff
    ratio = dp / om22
    lam1 = 0.5 * om22 - 0.25j * eff.gamma_eff * (1.0 - ratio)
    lam2 = -0.5 * om22 - 0.25j * eff.gamma_eff * (1.0 + ratio)
    return lam1, lam2
