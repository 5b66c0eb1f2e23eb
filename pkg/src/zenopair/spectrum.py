"""Complex spectrum of the 3x3 pair Hamiltonian.

Eigenvalues come from the characteristic cubic (closed form), then each
root is polished by Newton iteration on the characteristic polynomial of
``H - s I`` with ``s`` the nearest diagonal entry.  The shift keeps small
eigenvalue offsets, and hence tiny decay rates far from resonance, accurate
to full relative precision.  Right eigenvectors are cross products of two
rows of ``H - lambda I``; left eigenvectors are the rows of the inverse of
the right-eigenvector matrix, so ``<lbar_m|l_n> = delta_mn`` up to inversion
error.

Conventions: eigenvalues are ``lambda = epsilon - i gamma/2`` (rad/s),
right vectors have unit norm and their largest component real positive.
"""

from __future__ import annotations

import cmath
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .hamiltonian import EE, PairParams, build_heff, build_hermitian_part, derive_pq

EP_CONDITION = 1e6
AMBIGUITY = 1e-3
PHASE_CONVENTIONS = ("largest", "first")

_EPS = np.finfo(float).eps
_PERMS3 = tuple(itertools.permutations(range(3)))


class NearExceptionalPointWarning(RuntimeWarning):
    """Eigenvector matrix is close to singular; results are flagged."""


class BranchTrackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DressedState:
    """One eigen-triplet of the non-Hermitian Hamiltonian."""

    eigenvalue: complex
    right: np.ndarray
    left: np.ndarray
    branch_id: int = -1

    @property
    def epsilon(self) -> float:
        return self.eigenvalue.real

    @property
    def gamma(self) -> float:
        return -2.0 * self.eigenvalue.imag

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.right) ** 2


@dataclass(frozen=True)
class Eigensystem:
    """Three dressed states of one matrix plus conditioning diagnostics."""

    states: tuple[DressedState, ...]
    condition: float
    near_ep: bool

    def __iter__(self):
        return iter(self.states)

    def __getitem__(self, i):
        return self.states[i]

    def __len__(self):
        return len(self.states)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([s.eigenvalue for s in self.states])

    @property
    def right(self) -> np.ndarray:
        """Right eigenvectors as columns."""
        return np.column_stack([s.right for s in self.states])

    @property
    def left(self) -> np.ndarray:
        """Left eigenvectors as rows."""
        return np.vstack([s.left for s in self.states])

    def relabel(self, order: Sequence[int]) -> "Eigensystem":
        """Reorder so that branch ``b`` is ``states[order[b]]``."""
        states = tuple(
            DressedState(self.states[j].eigenvalue, self.states[j].right, self.states[j].left, b)
            for b, j in enumerate(order)
        )
        return Eigensystem(states, self.condition, self.near_ep)


# -- cubic -----------------------------------------------------------------


def char_poly(m) -> tuple[complex, complex, complex]:
    """Coefficients ``(c2, c1, c0)`` of ``det(lam I - m) = lam^3 + c2 lam^2 + c1 lam + c0``."""
    a00, a01, a02 = complex(m[0][0]), complex(m[0][1]), complex(m[0][2])
    a10, a11, a12 = complex(m[1][0]), complex(m[1][1]), complex(m[1][2])
    a20, a21, a22 = complex(m[2][0]), complex(m[2][1]), complex(m[2][2])
    tr = a00 + a11 + a22
    minors = (a00 * a11 - a01 * a10) + (a00 * a22 - a02 * a20) + (a11 * a22 - a12 * a21)
    det = (
        a00 * (a11 * a22 - a12 * a21)
        - a01 * (a10 * a22 - a12 * a20)
        + a02 * (a10 * a21 - a11 * a20)
    )
    return -tr, minors, -det


def cubic_roots(c2: complex, c1: complex, c0: complex) -> list[complex]:
    """Roots of the monic cubic by Cardano's formula."""
    shift = c2 / 3.0
    p = c1 - c2 * c2 / 3.0
    q = 2.0 * c2**3 / 27.0 - c2 * c1 / 3.0 + c0
    disc = cmath.sqrt((q / 2.0) ** 2 + (p / 3.0) ** 3)
    # pick the sign that avoids cancellation
    u3 = -q / 2.0 + disc
    alt = -q / 2.0 - disc
    if abs(alt) > abs(u3):
        u3 = alt
    if u3 == 0:
        return [-shift] * 3
    u = u3 ** (1.0 / 3.0)
    omega = complex(-0.5, math.sqrt(3.0) / 2.0)
    roots = []
    for k in range(3):
        uk = u * omega**k
        roots.append(uk - p / (3.0 * uk) - shift)
    return roots


def _polish(m: np.ndarray, lam: complex, others: Sequence[complex]) -> complex:
    diag = [m[i, i] for i in range(3)]
    s = min(diag, key=lambda d: abs(d - lam))
    shifted = m - s * np.eye(3)
    c2, c1, c0 = char_poly(shifted)
    mu = lam - s
    sep = min((abs(lam - o) for o in others), default=math.inf)

    def f(z):
        return ((z + c2) * z + c1) * z + c0

    fz = abs(f(mu))
    for _ in range(8):
        d = (3.0 * mu + 2.0 * c2) * mu + c1
        if d == 0:
            break
        step = f(mu) / d
        cand = mu - step
        fc = abs(f(cand))
        if fc > fz:
            break
        mu, fz = cand, fc
        if abs(step) <= 4.0 * _EPS * max(abs(mu), 1e-300):
            break
    new = s + mu
    # never let polishing jump to a neighbouring root
    if abs(new - lam) > 0.5 * sep:
        return lam
    return new


def _cross(u, v):
    return (
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    )


def _null_vector(m: np.ndarray, lam: complex) -> np.ndarray | None:
    diag = [complex(m[i, i]) for i in range(3)]
    s = min(diag, key=lambda d: abs(d - lam))
    mu = lam - s
    rows = [[complex(m[i, j]) for j in range(3)] for i in range(3)]
    for i in range(3):
        # (m_ii - s) - mu keeps small differences exact
        rows[i][i] = (diag[i] - s) - mu
    best, best_norm = None, 0.0
    for i, j in ((0, 1), (0, 2), (1, 2)):
        v = _cross(rows[i], rows[j])
        n = math.sqrt(sum(abs(c) ** 2 for c in v))
        if n > best_norm:
            best, best_norm = v, n
    norms = sorted(math.sqrt(sum(abs(c) ** 2 for c in r)) for r in rows)
    if best is None or best_norm <= 1e3 * _EPS * norms[1] * norms[2]:
        return None
    return np.array(best) / best_norm


def fix_phase(v: np.ndarray, convention: str = "largest") -> np.ndarray:
    """Multiply ``v`` by a unit phase so a reference component is real positive.

    ``largest``: the largest-magnitude component; ``first``: the first
    component with magnitude above 1e-8.
    """
    mags = np.abs(v)
    if convention == "largest":
        k = int(np.argmax(mags))
    elif convention == "first":
        k = int(np.argmax(mags > 1e-8))
    else:
        raise ValueError(f"unknown phase convention {convention!r}")
    c = v[k]
    if c == 0:
        return v
    return v * (abs(c) / c)


def _biorthogonal(right: np.ndarray) -> tuple[np.ndarray, float]:
    left = np.linalg.inv(right)
    return left, float(np.linalg.cond(right))


def diagonalize(h: np.ndarray, phase_convention: str = "largest") -> Eigensystem:
    """Eigen-decompose a 3x3 (generally non-Hermitian) matrix.

    States are ordered by ascending real part, then ascending decay rate.
    A near-singular eigenvector matrix (condition number above
    ``EP_CONDITION``) raises :class:`NearExceptionalPointWarning` and sets
    ``near_ep`` on the result.
    """
    m = np.asarray(h, dtype=complex)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")

    offdiag = m - np.diag(np.diag(m))
    if not offdiag.any():
        lams = [complex(m[i, i]) for i in range(3)]
        vecs = [np.eye(3, dtype=complex)[:, i] for i in range(3)]
    else:
        raw = cubic_roots(*char_poly(m))
        lams = [_polish(m, raw[i], raw[:i] + raw[i + 1 :]) for i in range(3)]
        vecs = [_null_vector(m, lam) for lam in lams]
        if any(v is None for v in vecs):
            # geometric degeneracy or an exact exceptional point
            w, r = np.linalg.eig(m)
            lams = [complex(x) for x in w]
            vecs = [r[:, i] / np.linalg.norm(r[:, i]) for i in range(3)]

    order = sorted(range(3), key=lambda i: (lams[i].real, -lams[i].imag))
    right = np.column_stack([fix_phase(vecs[i], phase_convention) for i in order])
    lams = [lams[i] for i in order]
    left, cond = _biorthogonal(right)
    near_ep = cond > EP_CONDITION
    if near_ep:
        warnings.warn(
            f"eigenvector condition number {cond:.3g} exceeds {EP_CONDITION:g}; "
            "close to an exceptional point",
            NearExceptionalPointWarning,
            stacklevel=2,
        )
    states = tuple(DressedState(lams[i], right[:, i], left[i, :], -1) for i in range(3))
    return Eigensystem(states, cond, near_ep)


def bare_character_order(es: Eigensystem) -> tuple[int, ...]:
    """State index assigned to each bare label (gg, eg, ee) by maximal weight."""
    pops = np.abs(es.right) ** 2  # [component, state]
    best = max(_PERMS3, key=lambda perm: sum(pops[b, perm[b]] for b in range(3)))
    return best


def _overlaps(prev: Eigensystem, new: Eigensystem) -> np.ndarray:
    left = prev.left
    o = np.abs(left @ new.right)
    return o / np.linalg.norm(left, axis=1)[:, None]


def assign_by_overlap(o: np.ndarray, ambiguity: float = AMBIGUITY):
    """Greedy assignment on a 3x3 overlap table ``o[branch, candidate]``.

    Returns ``(order, ambiguous)``; ``ambiguous`` is set when a pick beats
    the runner-up among the remaining candidates by less than ``ambiguity``.
    """
    order = [-1, -1, -1]
    rows, cols = set(range(3)), set(range(3))
    ambiguous = False
    while rows:
        r, c = max(((r, c) for r in rows for c in cols), key=lambda rc: o[rc])
        rest = [o[r, cc] for cc in cols if cc != c]
        if rest and o[r, c] - max(rest) < ambiguity:
            ambiguous = True
        order[r] = c
        rows.discard(r)
        cols.discard(c)
    return tuple(order), ambiguous


def match_branches(prev: Eigensystem, new: Eigensystem, ambiguity: float = AMBIGUITY):
    """Greedy maximum-overlap assignment of ``new`` states to ``prev`` branches.

    Returns ``(order, ambiguous)`` where ``order[b]`` indexes ``new.states``.
    """
    return assign_by_overlap(_overlaps(prev, new), ambiguity)


def track_path(
    hfunc: Callable[[float], np.ndarray],
    svals: Sequence[float],
    *,
    start: Eigensystem | None = None,
    max_depth: int = 16,
    phase_convention: str = "largest",
) -> list[Eigensystem]:
    """Diagonalize ``hfunc(s)`` along ``svals`` keeping branch labels continuous.

    Branch labels at the first point follow bare-state character (0=gg,
    1=eg, 2=ee) unless ``start`` supplies already-labelled states to
    continue from.  Ambiguous steps are bisected up to ``max_depth`` times.
    """
    svals = list(svals)
    if not svals:
        return []
    first = diagonalize(hfunc(svals[0]), phase_convention)
    if start is None:
        first = first.relabel(bare_character_order(first))
    else:
        order, _ = match_branches(start, first)
        first = first.relabel(order)
    out = [first]

    def step(prev_s, prev_es, s, depth):
        es = diagonalize(hfunc(s), phase_convention)
        order, ambiguous = match_branches(prev_es, es)
        if not ambiguous:
            return es.relabel(order)
        if depth >= max_depth:
            raise BranchTrackingError(
                f"ambiguous branch assignment between s={prev_s!r} and s={s!r}"
            )
        mid = 0.5 * (prev_s + s)
        mid_es = step(prev_s, prev_es, mid, depth + 1)
        return step(mid, mid_es, s, depth + 1)

    for s_prev, s in zip(svals[:-1], svals[1:]):
        out.append(step(s_prev, out[-1], s, 0))
    return out


@dataclass(frozen=True)
class SpectralSweep:
    """Branch-tracked spectrum along a detuning grid.

    Arrays are indexed ``[grid point, branch]``; vectors carry a trailing
    component axis in the (gg, eg, ee) basis.
    """

    deltas: np.ndarray
    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    near_ep: np.ndarray
    conditions: np.ndarray = field(repr=False)

    @property
    def epsilon(self) -> np.ndarray:
        return self.eigenvalues.real

    @property
    def gamma(self) -> np.ndarray:
        return -2.0 * self.eigenvalues.imag

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.right) ** 2

    def states(self, k: int) -> tuple[DressedState, ...]:
        return tuple(
            DressedState(self.eigenvalues[k, b], self.right[k, b], self.left[k, b], b)
            for b in range(3)
        )

    @classmethod
    def from_eigensystems(cls, deltas, systems: Sequence[Eigensystem]) -> "SpectralSweep":
        return cls(
            deltas=np.asarray(deltas, dtype=float),
            eigenvalues=np.array([es.eigenvalues for es in systems]),
            right=np.array([es.right.T for es in systems]),
            left=np.array([es.left for es in systems]),
            near_ep=np.array([es.near_ep for es in systems]),
            conditions=np.array([es.condition for es in systems]),
        )


def _check_monotone(deltas) -> np.ndarray:
    d = np.asarray(deltas, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("detuning grid must be a non-empty 1-D sequence")
    if d.size > 1:
        steps = np.diff(d)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError("detuning grid must be strictly monotone")
    return d


def sweep_spectrum(params: PairParams, deltas, phase_convention: str = "largest") -> SpectralSweep:
    """Diagonalize ``H_eff`` on a detuning grid with continuous branch labels."""
    d = _check_monotone(deltas)
    systems = track_path(lambda x: build_heff(params, x), d, phase_convention=phase_convention)
    return SpectralSweep.from_eigensystems(d, systems)


def perturbative_decay_rates(
    params: PairParams, deltas, sweep: SpectralSweep | None = None
) -> np.ndarray:
    """Decay rates from the eigenstates of the Hermitian part.

    Each branch of the full sweep is paired with the Hermitian eigenstate
    it overlaps most (joint assignment), and that state's ``|ee>`` weight
    times ``Gamma_ee`` is reported.  Returns an array ``[grid point, branch]``.
    """
    d = _check_monotone(deltas)
    if sweep is None:
        sweep = sweep_spectrum(params, d)
    out = np.empty((d.size, 3))
    for k, delta in enumerate(d):
        herm = diagonalize(build_hermitian_part(params, delta))
        hr = herm.right
        ov = np.abs(hr.conj().T @ sweep.right[k].T) ** 2  # [herm state, branch]
        perm = max(_PERMS3, key=lambda pm: sum(ov[pm[b], b] for b in range(3)))
        for b in range(3):
            out[k, b] = params.gamma_ee * abs(hr[EE, perm[b]]) ** 2
    return out


@dataclass(frozen=True)
class ZenoCrossover:
    omegas: np.ndarray
    gammas: np.ndarray  # [omega, branch]

    @property
    def gamma_min(self) -> np.ndarray:
        return self.gammas.min(axis=1)

    @property
    def gamma_min_monotone(self) -> bool:
        g = self.gamma_min
        return bool(np.all(np.diff(g) >= -1e-12 * np.abs(g[1:]).max(initial=0.0)))


def zeno_crossover_report(params: PairParams, delta: float, omegas) -> ZenoCrossover:
    """Decay rates versus drive strength at fixed detuning."""
    om = _check_monotone(omegas)
    systems = track_path(lambda w: build_heff(params.with_omega(w), delta), om)
    return ZenoCrossover(om, np.array([-2.0 * es.eigenvalues.imag for es in systems]))


def resonances(params: PairParams) -> dict[str, float]:
    """Bare-level crossing detunings in rad/s."""
    p, q = derive_pq(params)
    return {"gg-eg": p + q, "eg-ee": p - q, "gg-ee": p}
