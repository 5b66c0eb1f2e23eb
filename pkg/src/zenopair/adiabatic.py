"""Quasi-adiabatic transport of non-Hermitian dressed states.

A state prepared in dressed state ``alpha`` and carried along a ramp ends up,
if the ramp is slow enough, as ``exp(i phi - kappa/2) |lambda_alpha>``.  This
module evaluates the phase ``phi``, the attenuation exponent ``kappa`` and the
adiabaticity margin along a :class:`~zenopair.dynamics.RampProtocol`.

Eigenvectors use the biorthogonal normalization ``<lbar_m|l_n> = delta_mn``
with unit-norm right vectors.  Both ramp legs are linear in a parameter
``s`` in [0, 1]: the Rabi-frequency fraction on the intensity leg and the
detuning fraction ``x`` on the detuning leg.  Time enters only through
``dt/ds``, so::

    kappa = sum_legs int (gamma dt/ds + 2 Im B) ds
    phi   = sum_legs int (-eps dt/ds + Re B) ds

with ``B = i <lbar_alpha| d lambda_alpha/ds>``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from .dynamics import METHOD, RampProtocol, evolve_nonhermitian
from .hamiltonian import SX, PairParams, heff_parts
from .spectrum import (
    AMBIGUITY,
    EP_CONDITION,
    BranchTrackingError,
    NearExceptionalPointWarning,
    assign_by_overlap,
    diagonalize,
)

FD_STEP = 1e-4
NORMALIZATION_TOL = 1e-10


@dataclass(frozen=True)
class _Leg:
    """One ramp leg, ``H(s) = a + s b`` for ``s`` in [0, 1]."""

    kind: str
    a: np.ndarray
    b: np.ndarray
    t0: float
    duration: float
    quadratic: bool = False  # t = t0 + duration * s**2 instead of linear

    def h(self, s):
        s = np.asarray(s, dtype=float)
        return self.a + s[..., None, None] * self.b

    def dtds(self, s):
        s = np.asarray(s, dtype=float)
        if self.quadratic:
            return 2.0 * self.duration * s
        return np.full_like(s, self.duration)

    def time(self, s):
        s = np.asarray(s, dtype=float)
        return self.t0 + self.duration * (s * s if self.quadratic else s)


def _legs(params: PairParams, ramp: RampProtocol) -> list[_Leg]:
    static, dz = heff_parts(params)
    legs = []
    if ramp.t_omega > 0:
        legs.append(
            _Leg(
                "intensity",
                static + ramp.delta_i * dz,
                ramp.omega_nominal * SX,
                0.0,
                ramp.t_omega,
                quadratic=ramp.omega_ramp_shape == "intensity",
            )
        )
    span = ramp.delta_f - ramp.delta_i
    if span != 0:
        legs.append(
            _Leg(
                "detuning",
                static + ramp.delta_i * dz + ramp.omega_nominal * SX,
                span * dz,
                ramp.t_omega,
                ramp.t_delta,
            )
        )
    return legs


def start_matrix(params: PairParams, ramp: RampProtocol) -> np.ndarray:
    """``H_eff`` at the first instant of the ramp."""
    static, dz = heff_parts(params)
    return static + ramp.delta_i * dz + ramp.omega_at(0.0) * SX


def _eig(h: np.ndarray, phase_convention: str = "largest"):
    """Batched eigen-decomposition with unit-norm, phase-fixed right vectors.

    Returns ``(w[n, j], r[n, comp, j], l[n, j, comp])`` with ``l = inv(r)``.
    """
    w, r = np.linalg.eig(h)
    r = r / np.linalg.norm(r, axis=-2, keepdims=True)
    mags = np.abs(r)
    if phase_convention == "largest":
        k = np.argmax(mags, axis=-2)
    elif phase_convention == "first":
        k = np.argmax(mags > 1e-8, axis=-2)
    else:
        raise ValueError(f"unknown phase convention {phase_convention!r}")
    ref = np.take_along_axis(r, k[..., None, :], axis=-2)
    r = r * (np.abs(ref) / ref)
    return w, r, np.linalg.inv(r)


def _overlap_table(l0: np.ndarray, r1: np.ndarray) -> np.ndarray:
    """``|<lbar_b(prev)|lambda_j(new)>| / |lbar_b|``, indexed ``[..., b, j]``."""
    o = np.abs(l0 @ r1)
    return o / np.linalg.norm(l0, axis=-1)[..., :, None]


def _fast_perm(o: np.ndarray) -> np.ndarray | None:
    """Row-wise argmax if it is a permutation with a clear winner, else None."""
    best = np.argmax(o, axis=-1)
    srt = np.sort(o, axis=-1)
    clear = srt[..., -1] - srt[..., -2] >= AMBIGUITY
    ok = clear.all(axis=-1) & (np.sort(best, axis=-1) == np.arange(3)).all(axis=-1)
    return np.where(ok[..., None], best, -1)


class _Tracker:
    """Branch-continuous diagonalization of one leg on a refinable grid."""

    def __init__(self, leg: _Leg, phase_convention: str, max_depth: int = 16):
        self.leg = leg
        self.phase_convention = phase_convention
        self.max_depth = max_depth

    def _one(self, s):
        w, r, l = _eig(self.leg.h(np.array([s])), self.phase_convention)
        return w[0], r[0], l[0]

    def _bisect(self, s0, state0, s1, depth):
        """Permutation taking raw states at ``s1`` to the labels of ``state0``."""
        w1, r1, l1 = self._one(s1)
        order, ambiguous = assign_by_overlap(_overlap_table(state0[2], r1))
        if not ambiguous:
            return order
        if depth >= self.max_depth:
            raise BranchTrackingError(
                f"{self.leg.kind} leg: ambiguous branch assignment between s={s0!r} and s={s1!r}"
            )
        mid = 0.5 * (s0 + s1)
        wm, rm, lm = self._one(mid)
        pm = self._bisect(s0, state0, mid, depth + 1)
        pm = list(pm)
        labelled = (wm[pm], rm[:, pm], lm[pm, :])
        return self._bisect(mid, labelled, s1, depth + 1)

    def track(self, s: np.ndarray, first_order):
        """Labelled ``(w[n, b], r[n, comp, b], l[n, b, comp])`` along ``s``."""
        w, r, l = _eig(self.leg.h(s), self.phase_convention)
        n = s.size
        perms = np.empty((n, 3), dtype=int)
        perms[0] = first_order
        if n > 1:
            step = _fast_perm(_overlap_table(l[:-1], r[1:]))  # raw i -> raw j
        for k in range(1, n):
            prev = perms[k - 1]
            quick = step[k - 1]
            if quick[0] >= 0:
                perms[k] = quick[prev]
            else:
                state0 = (w[k - 1][prev], r[k - 1][:, prev], l[k - 1][prev, :])
                perms[k] = self._bisect(s[k - 1], state0, s[k], 0)
        idx = np.arange(n)[:, None]
        w = w[idx, perms]
        r = np.take_along_axis(r, perms[:, None, :], axis=2)
        l = np.take_along_axis(l, perms[:, :, None], axis=1)
        return w, r, l


def _start_order(w, r, l) -> tuple[int, ...]:
    """Bare-character labels (0=gg, 1=eg, 2=ee) for one raw eigensystem."""
    pops = np.abs(r) ** 2
    best, score = None, -1.0
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        val = sum(pops[b, perm[b]] for b in range(3))
        if val > score:
            best, score = perm, val
    return best


def _continue_order(prev_state, w, r, l) -> tuple[int, ...]:
    order, ambiguous = assign_by_overlap(_overlap_table(prev_state[2], r))
    if ambiguous:
        raise BranchTrackingError("ambiguous branch assignment across a leg boundary")
    return order


def _check_normalization(r: np.ndarray, l: np.ndarray) -> None:
    norm_err = np.abs(np.linalg.norm(r, axis=-2) - 1.0).max()
    bi_err = np.abs(l @ r - np.eye(3)).max()
    if norm_err > NORMALIZATION_TOL or bi_err > 1e3 * NORMALIZATION_TOL:
        raise AssertionError(
            f"eigenvector normalization violated (norm {norm_err:.2e}, biorthogonality {bi_err:.2e})"
        )


def _pt_derivative(leg: _Leg, s: np.ndarray, r: np.ndarray, l: np.ndarray, step: float,
                   phase_convention: str):
    """Richardson-extrapolated central difference of the right eigenvectors.

    Neighbouring vectors are matched to the labelled states at ``s`` and
    re-phased so ``<lambda(s)|lambda(s +- h)>`` is real positive (local
    parallel transport).  Returns ``(dr[n, comp, b], err[n])`` where ``err``
    is the difference between the ``h`` and ``h/2`` estimates.
    """
    n = s.size
    hstep = np.full(n, float(step))
    dr = np.empty_like(r)
    err = np.empty(n)
    todo = np.arange(n)
    for _ in range(8):
        est = {}
        for frac in (1.0, 0.5):
            for sign in (1.0, -1.0):
                sn = s[todo] + sign * frac * hstep[todo]
                _, rn, _ = _eig(leg.h(sn), phase_convention)
                o = _overlap_table(l[todo], rn)
                perm = _fast_perm(o)
                rn = np.take_along_axis(rn, np.maximum(perm, 0)[:, None, :], axis=2)
                c = np.einsum("nib,nib->nb", r[todo].conj(), rn)
                rn = rn * (np.abs(c) / c)[:, None, :]
                est[frac, sign] = (rn, perm[:, 0] >= 0)
        good = np.ones(todo.size, dtype=bool)
        for key in est:
            good &= est[key][1]
        hh = hstep[todo][:, None, None]
        d1 = (est[1.0, 1.0][0] - est[1.0, -1.0][0]) / (2.0 * hh)
        d2 = (est[0.5, 1.0][0] - est[0.5, -1.0][0]) / hh
        rich = (4.0 * d2 - d1) / 3.0
        diff = np.abs(d2 - d1).max(axis=(1, 2))
        scale = np.abs(rich).max(axis=(1, 2))
        good &= diff <= 1e-2 * scale + 1e-12
        dr[todo[good]] = rich[good]
        err[todo[good]] = diff[good]
        todo = todo[~good]
        if todo.size == 0:
            return dr, err
        hstep[todo] *= 0.25
    raise BranchTrackingError(
        f"{leg.kind} leg: eigenvector derivative unresolved at s={s[todo[0]]!r}"
    )


@dataclass
class _LegData:
    leg: _Leg
    s: np.ndarray
    w: np.ndarray
    r: np.ndarray
    l: np.ndarray
    berry: np.ndarray  # [n, beta, alpha]
    fd_error: np.ndarray
    dtds: np.ndarray

    def integrands(self):
        d = np.einsum("nbb->nb", self.berry)
        gam = -2.0 * self.w.imag
        f_kappa = gam * self.dtds[:, None] + 2.0 * d.imag
        f_phi = -self.w.real * self.dtds[:, None] + d.real
        return f_kappa, f_phi


def _evaluate(leg, s, first_order, step, phase_convention, tracker):
    w, r, l = tracker.track(s, first_order)
    _check_normalization(r, l)
    dr, fd_err = _pt_derivative(leg, s, r, l, step, phase_convention)
    berry = 1j * (l @ dr)
    return _LegData(leg, s, w, r, l, berry, fd_err, leg.dtds(s))


def _discrete_transport_phase(r: np.ndarray) -> np.ndarray:
    """Accumulated parallel-transport phase ``theta`` per branch along the nodes."""
    ov = np.einsum("nib,nib->nb", r[:-1].conj(), r[1:])
    return -np.angle(ov).sum(axis=0)


def _integrate_leg(leg, first_order, *, step, phase_convention, rtol, atol,
                   n_start=64, n_max=1 << 15, max_depth=16):
    tracker = _Tracker(leg, phase_convention, max_depth)
    n = n_start
    s = np.linspace(0.0, 1.0, n + 1)
    data = _evaluate(leg, s, first_order, step, phase_convention, tracker)
    fk, fp = data.integrands()
    prev = (simpson(fk, x=s, axis=0), simpson(fp, x=s, axis=0))
    while True:
        if n >= n_max:
            raise RuntimeError(f"{leg.kind} leg: quadrature did not converge with {n} intervals")
        n *= 2
        s = np.linspace(0.0, 1.0, n + 1)
        data = _evaluate(leg, s, first_order, step, phase_convention, tracker)
        fk, fp = data.integrands()
        cur = (simpson(fk, x=s, axis=0), simpson(fp, x=s, axis=0))
        done = all(
            np.all(np.abs(c - p) <= np.maximum(rtol * np.abs(c), atol)) for c, p in zip(cur, prev)
        )
        prev = cur
        if done:
            return data, cur


@dataclass(frozen=True)
class TransportSamples:
    """Per-node data along the whole ramp, all three branches.

    Arrays indexed ``[node]`` or ``[node, branch]``; ``coupling[n, beta, alpha]``
    is ``|<lbar_beta| dH/dt |lambda_alpha>|`` in rad/s^2.  ``berry`` holds the
    diagonal connection in the local parallel-transport gauge (its imaginary
    part is gauge invariant).
    """

    leg: np.ndarray
    s: np.ndarray
    time: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    eigenvalues: np.ndarray
    berry: np.ndarray
    running_kappa: np.ndarray
    coupling: np.ndarray
    fd_error: np.ndarray

    @property
    def gamma(self) -> np.ndarray:
        return -2.0 * self.eigenvalues.imag

    @property
    def running_survival(self) -> np.ndarray:
        return np.exp(-self.running_kappa)


@dataclass(frozen=True)
class TransportReport:
    """Quasi-adiabatic transport of branch ``alpha`` along a ramp.

    The ``branch_*`` arrays carry the same quantities for all three branches.
    ``margin[n, beta]`` is the adiabaticity ratio (NaN for ``beta == alpha``).
    """

    alpha: int
    branch_phi: np.ndarray
    branch_kappa_dissipative: np.ndarray
    branch_kappa_geometric: np.ndarray
    samples: TransportSamples = field(repr=False)
    margin: np.ndarray = field(repr=False)
    near_ep: bool = False
    phase_convention: str = "largest"

    @property
    def branch_kappa(self) -> np.ndarray:
        return self.branch_kappa_dissipative + self.branch_kappa_geometric

    @property
    def phi(self) -> float:
        return float(self.branch_phi[self.alpha])

    @property
    def kappa_dissipative(self) -> float:
        return float(self.branch_kappa_dissipative[self.alpha])

    @property
    def kappa_geometric(self) -> float:
        return float(self.branch_kappa_geometric[self.alpha])

    @property
    def kappa(self) -> float:
        return float(self.branch_kappa[self.alpha])

    @property
    def survival(self) -> float:
        return math.exp(-self.kappa)

    def criterion_margin(self) -> np.ndarray:
        """Margin table ``[node, beta]`` restricted to ``beta != alpha``."""
        cols = [b for b in range(3) if b != self.alpha]
        return self.margin[:, cols]

    @property
    def max_margin(self) -> float:
        m = self.criterion_margin()
        m = m[np.isfinite(m)]
        return float(m.max()) if m.size else 0.0


def _check_alpha(alpha) -> int:
    if alpha not in (0, 1, 2):
        raise ValueError(f"branch id must be 0, 1 or 2, got {alpha!r}")
    return int(alpha)


def _margin(samples: TransportSamples, alpha: int) -> np.ndarray:
    lam = samples.eigenvalues
    lhs = 0.5 * samples.coupling[:, :, alpha]  # [n, beta]
    gap2 = np.abs(lam[:, alpha, None] - lam) ** 2
    # log form avoids overflow of P_beta^-1 for the lossy branch
    logratio = samples.running_kappa[:, alpha, None] - samples.running_kappa
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        m = np.where(lhs > 0, lhs / gap2 * np.exp(logratio), 0.0)
    m[:, alpha] = np.nan
    return m


def transport_all_branches(
    params: PairParams,
    ramp: RampProtocol,
    alpha: int = 0,
    *,
    phase_convention: str = "largest",
    step: float = FD_STEP,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    max_depth: int = 16,
) -> TransportReport:
    """Transport integrals over the ramp (intensity and detuning legs, no hold).

    Each leg is integrated with composite Simpson on a uniform grid that is
    doubled until ``phi`` and ``kappa`` change by less than
    ``max(rtol |value|, atol)`` for every branch.
    """
    alpha = _check_alpha(alpha)
    legs = _legs(params, ramp)
    pieces = []
    phi = np.zeros(3)
    k_diss = np.zeros(3)
    k_geo = np.zeros(3)
    last = None
    theta = np.zeros(3)
    for leg in legs:
        w0, r0, l0 = _eig(leg.h(np.array([0.0])), phase_convention)
        order = _start_order(w0[0], r0[0], l0[0]) if last is None else _continue_order(
            last, w0[0], r0[0], l0[0]
        )
        data, _ = _integrate_leg(
            leg, order, step=step, phase_convention=phase_convention, rtol=rtol, atol=atol,
            max_depth=max_depth,
        )
        d = np.einsum("nbb->nb", data.berry)
        k_diss += simpson(-2.0 * data.w.imag * data.dtds[:, None], x=data.s, axis=0)
        k_geo += simpson(2.0 * d.imag, x=data.s, axis=0)
        _, fp = data.integrands()
        phi += simpson(fp, x=data.s, axis=0)
        theta += _discrete_transport_phase(data.r)
        pieces.append(data)
        last = (data.w[-1], data.r[-1], data.l[-1])
    # phi above is in the parallel-transport gauge; refer it to the
    # phase-fixed eigenvector at the end of the ramp
    phi += theta

    samples = _collect(pieces, params, ramp)
    near_ep = bool(samples.eigenvalues.size and _max_condition(pieces) > EP_CONDITION)
    if near_ep:
        warnings.warn(
            "transport path passes close to an exceptional point", NearExceptionalPointWarning,
            stacklevel=2,
        )
    return TransportReport(
        alpha, phi, k_diss, k_geo, samples, _margin(samples, alpha), near_ep, phase_convention
    )


def _max_condition(pieces) -> float:
    return max(float(np.linalg.cond(p.r).max()) for p in pieces)


def _collect(pieces, params: PairParams, ramp: RampProtocol) -> TransportSamples:
    if not pieces:
        empty = np.empty((0, 3))
        return TransportSamples(
            np.empty(0, dtype="<U9"), np.empty(0), np.empty(0), np.empty(0), np.empty(0),
            empty.astype(complex), empty.astype(complex), empty, np.empty((0, 3, 3)), np.empty(0),
        )
    legs, ss, ts, ds, oms, lams, bs, kap, cpl, errs = ([] for _ in range(10))
    offset = np.zeros(3)
    for p in pieces:
        leg = p.leg
        fk, _ = p.integrands()
        run = cumulative_simpson(fk, x=p.s, axis=0, initial=0.0) + offset
        offset = run[-1]
        t = leg.time(p.s)
        dhdt_mat = np.einsum("nbi,ij,nja->nba", p.l, leg.b, p.r)
        with np.errstate(divide="ignore", invalid="ignore"):
            dhdt = np.abs(dhdt_mat) / p.dtds[:, None, None]
        if leg.kind == "intensity":
            ds.append(np.full(p.s.size, ramp.delta_i))
            oms.append(ramp.omega_nominal * p.s)
        else:
            ds.append(ramp.delta_i + p.s * (ramp.delta_f - ramp.delta_i))
            oms.append(np.full(p.s.size, ramp.omega_nominal))
        legs.append(np.full(p.s.size, leg.kind))
        ss.append(p.s)
        ts.append(t)
        lams.append(p.w)
        bs.append(np.einsum("nbb->nb", p.berry))
        kap.append(run)
        cpl.append(dhdt)
        errs.append(p.fd_error)
    cat = np.concatenate
    return TransportSamples(
        cat(legs), cat(ss), cat(ts), cat(ds), cat(oms), cat(lams), cat(bs), cat(kap), cat(cpl),
        cat(errs),
    )


def transport_integrals(
    params: PairParams,
    ramp: RampProtocol,
    alpha: int = 0,
    *,
    phase_convention: str = "largest",
    step: float = FD_STEP,
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> TransportReport:
    """Quasi-adiabatic phase, attenuation exponent and survival for branch ``alpha``.

    Branch ids follow the bare character at the start of the ramp
    (0 = gg-like, 1 = eg-like, 2 = ee-like) and are tracked by continuity.
    ``phi`` refers to the phase-fixed right eigenvector at the end of the
    ramp (see :func:`zenopair.spectrum.diagonalize`).
    """
    return transport_all_branches(
        params, ramp, alpha, phase_convention=phase_convention, step=step, rtol=rtol, atol=atol
    )


def berry_connection(
    params: PairParams,
    delta: float,
    alpha: int,
    beta: int,
    ramp: RampProtocol,
    *,
    step: float = FD_STEP,
    phase_convention: str = "largest",
) -> complex:
    """``B_ab = i <lbar_beta| d lambda_alpha / dx>`` on the detuning leg.

    ``x = (delta - delta_i)/(delta_f - delta_i)``.  The derivative is a
    Richardson-extrapolated central difference of phase-fixed eigenvectors
    with step ``step`` in ``x``; branch ids are tracked from the ramp start.
    """
    alpha, beta = _check_alpha(alpha), _check_alpha(beta)
    span = ramp.delta_f - ramp.delta_i
    if span == 0:
        raise ValueError("ramp has no detuning leg")
    x = (delta - ramp.delta_i) / span
    if not -1e-12 <= x <= 1 + 1e-12:
        raise ValueError("delta lies outside the detuning leg of the ramp")
    labels = _labels_at(params, ramp, x, phase_convention)
    leg = [lg for lg in _legs(params, ramp) if lg.kind == "detuning"][0]

    def states(xv):
        es = diagonalize(leg.h(np.array(xv)), phase_convention)
        return es

    ref = states(x).relabel(labels)
    if ref.near_ep:
        warnings.warn("Berry connection evaluated near an exceptional point",
                      NearExceptionalPointWarning, stacklevel=2)

    def right_at(xv):
        es = diagonalize(leg.h(np.array(xv)), phase_convention)
        o = _overlap_table(ref.left, es.right)
        order, ambiguous = assign_by_overlap(o)
        if ambiguous:
            raise BranchTrackingError(f"ambiguous branch assignment near x={x!r}")
        return es.right[:, order[alpha]]

    d1 = (right_at(x + step) - right_at(x - step)) / (2.0 * step)
    d2 = (right_at(x + 0.5 * step) - right_at(x - 0.5 * step)) / step
    d = (4.0 * d2 - d1) / 3.0
    return complex(1j * (ref.left[beta] @ d))


def _labels_at(params, ramp, x, phase_convention) -> tuple[int, ...]:
    """Raw-state order at detuning fraction ``x`` matching the ramp's branch ids."""
    legs = _legs(params, ramp)
    last = None
    for leg in legs:
        w0, r0, l0 = _eig(leg.h(np.array([0.0])), phase_convention)
        order = _start_order(w0[0], r0[0], l0[0]) if last is None else _continue_order(
            last, w0[0], r0[0], l0[0]
        )
        tracker = _Tracker(leg, phase_convention)
        end = x if leg.kind == "detuning" else 1.0
        s = np.linspace(0.0, end, 257)
        w, r, l = tracker.track(s, order)
        last = (w[-1], r[-1], l[-1])
    es = diagonalize(legs[-1].h(np.array(x)), phase_convention)
    order, ambiguous = assign_by_overlap(_overlap_table(last[2], es.right))
    if ambiguous:
        raise BranchTrackingError(f"ambiguous branch assignment at x={x!r}")
    return order


@dataclass(frozen=True)
class CriterionTable:
    """Adiabaticity margins ``lhs/rhs`` per node and branch ``beta``."""

    alpha: int
    time: np.ndarray
    leg: np.ndarray
    delta: np.ndarray
    lhs: np.ndarray
    rhs_log: np.ndarray
    margin: np.ndarray
    survival_ratio_log: np.ndarray

    @property
    def max_margin(self) -> float:
        cols = [b for b in range(3) if b != self.alpha]
        m = self.margin[:, cols]
        m = m[np.isfinite(m)]
        return float(m.max()) if m.size else 0.0


def adiabaticity_criterion(
    params: PairParams,
    ramp: RampProtocol,
    alpha: int = 0,
    *,
    report: TransportReport | None = None,
    **kwargs,
) -> CriterionTable:
    """Compare ``|(dH/dt)_ba|/2`` with ``|lambda_a - lambda_b|^2 P_a/P_b``.

    On the detuning leg ``|(dH/dt)_ba| = |delta_dot| |<lbar_b|Sz|lambda_a>|``.
    ``P_a/P_b`` uses running survival factors from the ramp start.  Ramps
    are quasi-adiabatic when the maximum margin is well below one.
    """
    alpha = _check_alpha(alpha)
    if report is None:
        report = transport_all_branches(params, ramp, alpha, **kwargs)
    smp = report.samples
    lam = smp.eigenvalues
    lhs = 0.5 * smp.coupling[:, :, alpha]
    gap2 = np.abs(lam[:, alpha, None] - lam) ** 2
    logratio = smp.running_kappa - smp.running_kappa[:, alpha, None]  # log(P_a/P_b)
    with np.errstate(divide="ignore"):
        rhs_log = np.log(gap2) + logratio
    margin = _margin(smp, alpha)
    return CriterionTable(alpha, smp.time, smp.leg, smp.delta, lhs, rhs_log, margin, logratio)


@dataclass(frozen=True)
class AdiabaticComparison:
    p_s_adiabatic: float
    p_s_exact: float
    fidelity: float
    report: TransportReport = field(repr=False)
    final_state: np.ndarray = field(repr=False)

    @property
    def ratio_error(self) -> float:
        """``P_s_exact / P_s_adiabatic - 1``."""
        return self.p_s_exact / self.p_s_adiabatic - 1.0


def initial_dressed_state(params: PairParams, ramp: RampProtocol, alpha: int,
                          phase_convention: str = "largest") -> np.ndarray:
    """Unit-norm right eigenvector of branch ``alpha`` at the ramp start."""
    alpha = _check_alpha(alpha)
    w, r, l = _eig(start_matrix(params, ramp)[None], phase_convention)
    order = _start_order(w[0], r[0], l[0])
    return r[0][:, order[alpha]].copy()


def adiabatic_vs_exact(
    params: PairParams,
    ramp: RampProtocol,
    alpha: int = 0,
    *,
    report: TransportReport | None = None,
    method: str = METHOD,
    rtol: float = 1e-10,
    atol: float = 1e-13,
) -> AdiabaticComparison:
    """Transport prediction ``exp(-kappa)`` against the propagated survival.

    The propagation starts in the dressed state ``alpha`` at the ramp start
    and stops at the end of the detuning leg (no hold).  ``fidelity`` is
    ``|<lambda_alpha(delta_f)|psi>|^2 / ||psi||^2``.
    """
    alpha = _check_alpha(alpha)
    if report is None:
        report = transport_integrals(params, ramp, alpha)
    ramp_only = ramp.with_hold(0.0)
    psi0 = initial_dressed_state(params, ramp_only, alpha)
    T = ramp_only.ramp_duration
    res = evolve_nonhermitian(params, ramp_only, psi0, [T], rtol=rtol, atol=atol, method=method)
    psi = res.final
    p_exact = float(np.vdot(psi, psi).real)
    end = _final_state(params, ramp_only, report)
    fid = abs(np.vdot(end, psi)) ** 2 / p_exact if p_exact > 0 else float("nan")
    return AdiabaticComparison(report.survival, p_exact, float(fid), report, psi)


def _final_state(params, ramp, report: TransportReport) -> np.ndarray:
    """Right eigenvector of the followed branch at the end of the ramp."""
    legs = _legs(params, ramp)
    if not legs:
        return initial_dressed_state(params, ramp, report.alpha, report.phase_convention)
    leg = legs[-1]
    w, r, l = _eig(leg.h(np.array([1.0])), report.phase_convention)
    lam_end = report.samples.eigenvalues[-1, report.alpha]
    j = int(np.argmin(np.abs(w[0] - lam_end)))
    return r[0][:, j]


def adiabatic_final_state(report: TransportReport, params: PairParams, ramp: RampProtocol):
    """``exp(i phi - kappa/2) |lambda_alpha(delta_f)>`` for the followed branch."""
    end = _final_state(params, ramp, report)
    return np.exp(1j * report.phi - 0.5 * report.kappa) * end
