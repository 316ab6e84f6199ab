"""Phase-stability engine: energy above hull via linear programming,
incremental hull maintenance for binary systems, and subsystem caching.

Energies are treated per atom throughout; compositions enter the LP as
atomic-fraction vectors, so the mixture coefficients automatically sum
to one. The reported hull distance is the raw LP difference and may be
negative when a candidate deepens the hull.
"""

from __future__ import annotations

import bisect
import hashlib
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .chem import Composition, reduce_composition

LP_TOL = 1e-10

METASTABLE_LIMIT = 0.050  # eV/atom
MARGINAL_LIMIT = 0.100  # eV/atom


class IncompleteChemicalSystem(ValueError):
    pass


class MalformedPhaseSet(ValueError):
    pass


class NonFiniteEnergy(ValueError):
    pass


class Stability(Enum):
    STABLE = "stable"
    METASTABLE = "metastable"
    MARGINALLY_METASTABLE = "marginally_metastable"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class PhaseEntry:
    composition: Composition  # reduced
    formation_energy: float  # eV/atom
    phase_id: str

    def __post_init__(self):
        if not math.isfinite(self.formation_energy):
            raise NonFiniteEnergy(f"phase {self.phase_id!r} has non-finite energy")
        object.__setattr__(self, "composition", reduce_composition(self.composition))

    def fraction_vector(self, element_order: Sequence[str]) -> np.ndarray:
        fracs = self.composition.fractions()
        return np.array([fracs.get(sym, 0.0) for sym in element_order])

    def is_elemental(self) -> bool:
        return len(self.composition.entries) == 1

    def to_line(self) -> str:
        return f"{self.phase_id}\t{self.composition.formula()}\t{self.formation_energy!r}"

    @classmethod
    def from_line(cls, line: str) -> "PhaseEntry":
        pid, formula, energy = line.rstrip("\n").split("\t")
        return cls(Composition.parse(formula, reduce=True), float(energy), pid)


@dataclass(frozen=True)
class HullResult:
    e_hull: float  # eV/atom
    competing_phases: tuple[str, ...]
    phase_fractions: tuple[float, ...]
    classification: Stability


def classify_stability(e_hull: float) -> Stability:
    """Stability class from hull distance (boundaries at 0/50/100 meV/atom)."""
    if not math.isfinite(e_hull):
        raise NonFiniteEnergy(f"hull distance is not finite: {e_hull}")
    if e_hull < 0:
        return Stability.STABLE
    if e_hull <= METASTABLE_LIMIT:
        return Stability.METASTABLE
    if e_hull <= MARGINAL_LIMIT:
        return Stability.MARGINALLY_METASTABLE
    return Stability.UNSTABLE


# ---------------------------------------------------------------------------
# Dense two-phase simplex (Bland's rule), for min c@x s.t. Ax = b, x >= 0.
# Problem sizes here are a handful of rows and at most a few hundred columns.
# ---------------------------------------------------------------------------

def _simplex_iterate(tableau: np.ndarray, basis: list[int], n_decision: int) -> None:
    while True:
        costs = tableau[-1, :n_decision]
        entering = -1
        for j in range(n_decision):
            if costs[j] < -LP_TOL and j not in basis:
                entering = j
                break
        if entering < 0:
            return
        col = tableau[:-1, entering]
        rhs = tableau[:-1, -1]
        leaving_row, best_ratio = -1, math.inf
        for r in range(len(basis)):
            if col[r] > LP_TOL:
                ratio = rhs[r] / col[r]
                if (ratio < best_ratio - LP_TOL
                        or (abs(ratio - best_ratio) <= LP_TOL
                            and (leaving_row < 0 or basis[r] < basis[leaving_row]))):
                    best_ratio = ratio
                    leaving_row = r
        if leaving_row < 0:
            raise MalformedPhaseSet("linear program is unbounded")
        pivot = tableau[leaving_row, entering]
        tableau[leaving_row] /= pivot
        for r in range(tableau.shape[0]):
            if r != leaving_row and abs(tableau[r, entering]) > 0:
                tableau[r] -= tableau[r, entering] * tableau[leaving_row]
        basis[leaving_row] = entering


def solve_lp(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve min c@x subject to a@x = b, x >= 0.

    Returns (x, optimum). Raises IncompleteChemicalSystem when infeasible
    and MalformedPhaseSet when unbounded.
    """
    a = np.asarray(a, dtype=float).copy()
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = a.shape
    flip = b < 0
    a[flip] *= -1
    b[flip] *= -1

    # Phase 1: artificials with unit cost.
    tableau = np.zeros((m + 1, n + m + 1))
    tableau[:m, :n] = a
    tableau[:m, n:n + m] = np.eye(m)
    tableau[:m, -1] = b
    tableau[-1, :n] = -a.sum(axis=0)
    tableau[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    _simplex_iterate(tableau, basis, n)
    if tableau[-1, -1] < -1e-9:
        raise IncompleteChemicalSystem("mass balance infeasible for candidate")

    # Drive any degenerate artificials out of the basis.
    for r, var in enumerate(basis):
        if var >= n:
            for j in range(n):
                if abs(tableau[r, j]) > LP_TOL:
                    pivot = tableau[r, j]
                    tableau[r] /= pivot
                    for rr in range(tableau.shape[0]):
                        if rr != r and abs(tableau[rr, j]) > 0:
                            tableau[rr] -= tableau[rr, j] * tableau[r]
                    basis[r] = j
                    break

    # Phase 2: original objective over the decision columns.
    tableau2 = np.zeros((m + 1, n + 1))
    tableau2[:m, :n] = tableau[:m, :n]
    tableau2[:m, -1] = tableau[:m, -1]
    tableau2[-1, :n] = c
    for r, var in enumerate(basis):
        if var < n:
            tableau2[-1] -= c[var] * tableau2[r]
    _simplex_iterate(tableau2, basis, n)

    x = np.zeros(n)
    for r, var in enumerate(basis):
        if var < n:
            x[var] = tableau2[r, -1]
    return x, float(c @ x)


# ---------------------------------------------------------------------------
# Incremental lower hull for binary systems (fraction, energy) in 2D.
# ---------------------------------------------------------------------------

class LowerHull2D:
    """Sorted lower-hull chain over (x, y) points, with O(log m + k)
    incremental insertion against O(m log m) reconstruction."""

    __slots__ = ("xs", "ys")

    def __init__(self, points: Iterable[tuple[float, float]] = ()):
        self.xs: list[float] = []
        self.ys: list[float] = []
        for x, y in sorted(points):
            self._append(x, y)

    @classmethod
    def build(cls, points: Iterable[tuple[float, float]]) -> "LowerHull2D":
        return cls(points)

    @staticmethod
    def _keeps(x0, y0, x1, y1, x2, y2) -> bool:
        # Middle point survives iff it sits strictly below the outer chord.
        return (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0) > 1e-15

    def _append(self, x: float, y: float) -> None:
        # Monotone-chain append; x must be nondecreasing.
        if self.xs and x == self.xs[-1]:
            if y >= self.ys[-1]:
                return
            self.xs.pop()
            self.ys.pop()
        while len(self.xs) >= 2 and not self._keeps(
                self.xs[-2], self.ys[-2], self.xs[-1], self.ys[-1], x, y):
            self.xs.pop()
            self.ys.pop()
        self.xs.append(x)
        self.ys.append(y)

    def height(self, x: float) -> float:
        """Lower-hull value at x; inf outside the spanned interval."""
        if not self.xs or x < self.xs[0] - 1e-12 or x > self.xs[-1] + 1e-12:
            return math.inf
        idx = bisect.bisect_right(self.xs, x)
        if idx == 0:
            return self.ys[0]
        if idx == len(self.xs):
            return self.ys[-1]
        x0, x1 = self.xs[idx - 1], self.xs[idx]
        y0, y1 = self.ys[idx - 1], self.ys[idx]
        t = (x - x0) / (x1 - x0)
        return y0 + t * (y1 - y0)

    def insert(self, x: float, y: float) -> "LowerHull2D":
        """Return a new chain with (x, y) inserted; no-op when not below."""
        out = LowerHull2D.__new__(LowerHull2D)
        out.xs = list(self.xs)
        out.ys = list(self.ys)
        if self.xs and self.xs[0] <= x <= self.xs[-1] and y >= self.height(x) - 1e-15:
            return out
        i = bisect.bisect_left(out.xs, x)
        if i < len(out.xs) and out.xs[i] == x:
            out.ys[i] = y
        else:
            out.xs.insert(i, x)
            out.ys.insert(i, y)
        while i >= 2 and not self._keeps(
                out.xs[i - 2], out.ys[i - 2], out.xs[i - 1], out.ys[i - 1],
                out.xs[i], out.ys[i]):
            del out.xs[i - 1], out.ys[i - 1]
            i -= 1
        while i + 2 <= len(out.xs) - 1 and not self._keeps(
                out.xs[i], out.ys[i], out.xs[i + 1], out.ys[i + 1],
                out.xs[i + 2], out.ys[i + 2]):
            del out.xs[i + 1], out.ys[i + 1]
        return out


# ---------------------------------------------------------------------------
# Hull state over a chemical system.
# ---------------------------------------------------------------------------

class HullState:
    """Immutable snapshot of a phase set, ready for hull-distance queries.

    Precomputes the fraction matrix (and the 2D chain for binary systems);
    ``insert`` returns a new snapshot sharing nothing mutable.
    """

    def __init__(self, elements: Sequence[str], phases: Sequence[PhaseEntry]):
        self.elements = tuple(sorted(set(elements)))
        self.phases = tuple(phases)
        for p in self.phases:
            extra = set(p.composition.fractions()) - set(self.elements)
            if extra:
                raise IncompleteChemicalSystem(
                    f"phase {p.phase_id!r} has elements outside the system: {sorted(extra)}")
        self._fractions = (np.array([p.fraction_vector(self.elements) for p in self.phases]).T
                           if self.phases else np.zeros((len(self.elements), 0)))
        self._energies = np.array([p.formation_energy for p in self.phases])
        self._chain: Optional[LowerHull2D] = None
        if len(self.elements) == 2 and self.phases:
            self._chain = LowerHull2D(
                (float(self._fractions[1, i]), float(self._energies[i]))
                for i in range(len(self.phases)))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for p in sorted(self.phases, key=lambda p: p.phase_id):
            h.update(f"{p.phase_id}\x00{p.composition.formula()}\x00"
                     f"{p.formation_energy!r}\n".encode())
        return h.hexdigest()

    def insert(self, p: PhaseEntry) -> "HullState":
        extra = set(p.composition.fractions()) - set(self.elements)
        if extra:
            raise IncompleteChemicalSystem(
                f"phase {p.phase_id!r} has elements outside the system: {sorted(extra)}")
        out = HullState.__new__(HullState)
        out.elements = self.elements
        out.phases = self.phases + (p,)
        out._fractions = np.column_stack(
            [self._fractions, p.fraction_vector(self.elements)])
        out._energies = np.append(self._energies, p.formation_energy)
        out._chain = None
        if self._chain is not None:
            frac = p.fraction_vector(self.elements)
            out._chain = self._chain.insert(float(frac[1]), p.formation_energy)
        return out

    def energy_above_hull(self, x: PhaseEntry) -> HullResult:
        return energy_above_hull(x, self.phases, _state=self)


def incremental_insert(hull_state: HullState, p: PhaseEntry) -> HullState:
    return hull_state.insert(p)


def _check_references(x: PhaseEntry, phases: Sequence[PhaseEntry]) -> None:
    """Every element of x needs an elemental reference phase."""
    have = {p.composition.entries[0][0].symbol
            for p in phases if p.is_elemental()}
    missing = [sym for sym in x.composition.fractions() if sym not in have]
    if missing:
        raise IncompleteChemicalSystem(
            f"no elemental reference for {missing} in the phase set")


def energy_above_hull(x: PhaseEntry, phases: Sequence[PhaseEntry],
                      _state: Optional[HullState] = None) -> HullResult:
    """Hull distance of x against competing phases.

    Solves min sum(c_i E_i) with per-element mass balance and c >= 0; the
    candidate itself is excluded from its own decomposition set.
    """
    competitors = [p for p in phases if p.phase_id != x.phase_id]
    _check_references(x, competitors)
    if _state is not None and _state.phases == tuple(phases):
        elements = _state.elements
        keep = [i for i, p in enumerate(_state.phases) if p.phase_id != x.phase_id]
        a_full = _state._fractions[:, keep]
        energies = _state._energies[keep]
        competitors = [_state.phases[i] for i in keep]
    else:
        elements = tuple(sorted({sym for p in competitors
                                 for sym in p.composition.fractions()}))
        a_full = np.array([p.fraction_vector(elements) for p in competitors]).T
        energies = np.array([p.formation_energy for p in competitors])
    target = x.fraction_vector(elements)
    if abs(target.sum() - 1.0) > 1e-9:
        raise IncompleteChemicalSystem(
            f"candidate {x.phase_id!r} has elements outside the phase system")
    coeffs, optimum = solve_lp(energies, a_full, target)
    support = [i for i in range(len(competitors)) if coeffs[i] > 1e-9]
    e_hull = x.formation_energy - optimum
    return HullResult(
        e_hull=e_hull,
        competing_phases=tuple(competitors[i].phase_id for i in support),
        phase_fractions=tuple(float(coeffs[i]) for i in support),
        classification=classify_stability(e_hull),
    )


def brute_force_mixture_minimum(x: PhaseEntry,
                                phases: Sequence[PhaseEntry]) -> float:
    """Independent oracle: enumerate simplices of up to n_elements + 1
    phases and minimize the mixture energy directly."""
    competitors = [p for p in phases if p.phase_id != x.phase_id]
    _check_references(x, competitors)
    elements = tuple(sorted({sym for p in competitors
                             for sym in p.composition.fractions()}))
    a_full = np.array([p.fraction_vector(elements) for p in competitors]).T
    energies = np.array([p.formation_energy for p in competitors])
    target = x.fraction_vector(elements)
    best = math.inf
    n_el = len(elements)
    for size in range(1, min(n_el + 1, len(competitors)) + 1):
        for subset in itertools.combinations(range(len(competitors)), size):
            a_s = a_full[:, subset]
            coeffs, residual, rank, _ = np.linalg.lstsq(a_s, target, rcond=None)
            if rank < size:
                continue
            if np.any(coeffs < -1e-9):
                continue
            if np.max(np.abs(a_s @ coeffs - target)) > 1e-9:
                continue
            best = min(best, float(energies[list(subset)] @ coeffs))
    if not math.isfinite(best):
        raise IncompleteChemicalSystem("no feasible decomposition found")
    return best


def quick_stability_bound(x: PhaseEntry, phases: Sequence[PhaseEntry]) -> float:
    """Cheap lower bound on the hull distance, usable as a pre-filter.

    Any feasible mixture upper-bounds the LP optimum, so blending each
    single phase with elemental references (at zero formation energy)
    gives a certified bound: quick_bound <= exact e_hull.
    """
    competitors = [p for p in phases if p.phase_id != x.phase_id]
    _check_references(x, competitors)
    elements = tuple(sorted({sym for p in competitors
                             for sym in p.composition.fractions()}))
    target = x.fraction_vector(elements)
    best_mixture = 0.0  # pure-elements decomposition
    for p in competitors:
        if p.formation_energy >= 0:
            continue
        frac = p.fraction_vector(elements)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(frac > 0, target / np.where(frac > 0, frac, 1.0), math.inf)
        w = float(min(1.0, ratios.min()))
        if w > 0:
            best_mixture = min(best_mixture, w * p.formation_energy)
    return x.formation_energy - best_mixture


class HullCache:
    """Subsystem cache keyed on (sorted elements, phase-set content hash).

    Single-writer by contract: lookups that miss build and store a fresh
    state. Hit/miss counters expose cache behavior to the bench harness.
    """

    def __init__(self):
        self._store: dict[tuple[tuple[str, ...], str], HullState] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def _content_hash(phases: Sequence[PhaseEntry]) -> str:
        h = hashlib.sha256()
        for p in sorted(phases, key=lambda p: p.phase_id):
            h.update(f"{p.phase_id}\x00{p.composition.formula()}\x00"
                     f"{p.formation_energy!r}\n".encode())
        return h.hexdigest()

    def lookup(self, elements: Sequence[str],
               phases: Sequence[PhaseEntry]) -> tuple[HullState, bool]:
        key = (tuple(sorted(elements)), self._content_hash(phases))
        state = self._store.get(key)
        if state is not None:
            self.hits += 1
            return state, True
        self.misses += 1
        state = HullState(elements, phases)
        self._store[key] = state
        return state, False
