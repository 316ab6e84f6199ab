"""Core chemical data types: compositions, periodic structures, fidelity
levels, and energy records.

All types are immutable after construction and all operations are pure
functions, so everything here is safe to share across threads.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

from .elements import Element, get_element

MAX_ATOMS_PER_CELL = 20

# Charge-neutrality tolerances (|e| per formula unit). Sampling is lenient,
# final validation is strict.
CHARGE_TOL_SAMPLING = 0.1
CHARGE_TOL_VALIDATION = 0.01

# Minimum-image search uses 27 images unless the cell is badly skewed.
_SKEW_CONDITION_LIMIT = 10.0


class EmptyComposition(ValueError):
    pass


class NoOxidationStates(ValueError):
    pass


class NonFiniteCoordinate(ValueError):
    pass


class DegenerateLattice(ValueError):
    pass


class EmptyStructure(ValueError):
    pass


class FidelityLevel(IntEnum):
    """Theory-hierarchy rung, ordered by accuracy (and cost)."""

    PBE = 0
    SCAN = 1
    HSE06 = 2
    CCSDT = 3

    @property
    def loss_weight(self) -> float:
        return _LOSS_WEIGHTS[self]

    @property
    def oracle_cost(self) -> float:
        return _ORACLE_COSTS[self]


# Loss weights increase strictly with fidelity; PBE/CCSDT endpoints are the
# documented defaults, intermediate rungs interpolate.
_LOSS_WEIGHTS = {
    FidelityLevel.PBE: 0.1,
    FidelityLevel.SCAN: 0.3,
    FidelityLevel.HSE06: 0.6,
    FidelityLevel.CCSDT: 1.0,
}

# Abstract CPU-hour unit costs per oracle call.
_ORACLE_COSTS = {
    FidelityLevel.PBE: 1.0,
    FidelityLevel.SCAN: 2.0,
    FidelityLevel.HSE06: 5.0,
    FidelityLevel.CCSDT: 100.0,
}


@dataclass(frozen=True)
class Composition:
    """Element/count multiset, sorted by atomic number.

    ``oxidation_assignment`` is an optional per-entry signed state parallel
    to ``entries``.
    """

    entries: tuple[tuple[Element, int], ...]
    oxidation_assignment: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if not self.entries:
            raise EmptyComposition("composition has no entries")
        ordered = tuple(sorted(self.entries, key=lambda e: e[0].atomic_number))
        object.__setattr__(self, "entries", ordered)
        for el, count in self.entries:
            if count <= 0 or count != int(count):
                raise ValueError(f"counts must be positive integers, got {el.symbol}:{count}")
        if self.atom_count > MAX_ATOMS_PER_CELL:
            raise ValueError(
                f"composition has {self.atom_count} atoms, max is {MAX_ATOMS_PER_CELL}")
        if self.oxidation_assignment is not None:
            if len(self.oxidation_assignment) != len(self.entries):
                raise ValueError("oxidation_assignment must parallel entries")
            object.__setattr__(self, "oxidation_assignment",
                               tuple(int(q) for q in self.oxidation_assignment))

    @property
    def atom_count(self) -> int:
        return sum(count for _, count in self.entries)

    @property
    def elements(self) -> tuple[Element, ...]:
        return tuple(el for el, _ in self.entries)

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(el.symbol for el, _ in self.entries)

    def fractions(self) -> dict[str, float]:
        n = self.atom_count
        return {el.symbol: count / n for el, count in self.entries}

    def formula(self) -> str:
        return "".join(f"{el.symbol}{count if count != 1 else ''}"
                       for el, count in self.entries)

    def expand_species(self) -> tuple[Element, ...]:
        """Per-atom element list, entry order."""
        out: list[Element] = []
        for el, count in self.entries:
            out.extend([el] * count)
        return tuple(out)

    @classmethod
    def from_symbols(cls, counts: dict[str, int] | Sequence[tuple[str, int]],
                     oxidation: Optional[Sequence[int]] = None) -> "Composition":
        items = counts.items() if isinstance(counts, dict) else counts
        entries = tuple((get_element(sym), int(n)) for sym, n in items)
        oxi = tuple(oxidation) if oxidation is not None else None
        return cls(entries, oxi)

    _FORMULA_RE = re.compile(r"([A-Z][a-z]?)(\d*)")

    @classmethod
    def parse(cls, formula: str, reduce: bool = False) -> "Composition":
        """Parse a plain formula like ``Na2Cl2`` (no parentheses).

        ``reduce=True`` divides counts by their GCD before construction,
        which lets raw database formulas exceed the per-cell atom cap.
        """
        formula = formula.strip()
        if not formula or not re.fullmatch(r"(?:[A-Z][a-z]?\d*)+", formula):
            raise EmptyComposition(f"unparseable formula: {formula!r}")
        counts: dict[str, int] = {}
        for sym, num in cls._FORMULA_RE.findall(formula):
            if not sym:
                continue
            counts[sym] = counts.get(sym, 0) + (int(num) if num else 1)
        if reduce:
            g = math.gcd(*counts.values())
            counts = {sym: n // g for sym, n in counts.items()}
        return cls.from_symbols(counts)


def reduce_composition(c: Composition) -> Composition:
    """Divide counts by their GCD; idempotent, keeps canonical ordering."""
    counts = [count for _, count in c.entries]
    g = math.gcd(*counts) if len(counts) > 1 else counts[0]
    entries = tuple((el, count // g) for el, count in c.entries)
    return Composition(entries, c.oxidation_assignment)


def charge_balance(c: Composition) -> float:
    """Net charge per formula unit (|e|) under the current assignment."""
    if c.oxidation_assignment is None:
        raise NoOxidationStates("composition has no oxidation assignment")
    return float(sum(n * q for (_, n), q in zip(c.entries, c.oxidation_assignment)))


def assign_oxidation_states(c: Composition) -> Composition:
    """Pick the assignment minimizing |net charge| by exhaustive search.

    Ties go to the earliest combination, so the most common state listed
    first for each element wins.
    """
    state_lists = [el.allowed_oxidation_states for el, _ in c.entries]
    counts = [n for _, n in c.entries]
    best: tuple[int, ...] | None = None
    best_abs = math.inf
    for combo in itertools.product(*state_lists):
        net = abs(sum(n * q for n, q in zip(counts, combo)))
        if net < best_abs - 1e-12:
            best_abs = net
            best = combo
    assert best is not None
    return Composition(c.entries, best)


@dataclass(frozen=True)
class CrystalStructure:
    """Periodic cell: lattice metric tensor + fractional coordinates.

    ``metric`` holds the 6 unique Gram-matrix components
    (G11, G22, G33, G12, G13, G23) in A^2; coordinates live in [0,1)^3.
    """

    metric: np.ndarray  # shape (6,)
    frac_coords: np.ndarray  # shape (n, 3)
    species: tuple[Element, ...]
    id: str

    def __post_init__(self):
        metric = np.asarray(self.metric, dtype=float).reshape(6)
        coords = np.asarray(self.frac_coords, dtype=float).reshape(-1, 3)
        if coords.shape[0] == 0:
            raise EmptyStructure(f"structure {self.id!r} has no atoms")
        if coords.shape[0] != len(self.species):
            raise ValueError("species length must match coordinate count")
        if coords.shape[0] > MAX_ATOMS_PER_CELL:
            raise ValueError(f"structure has {coords.shape[0]} atoms, max {MAX_ATOMS_PER_CELL}")
        if not np.all(np.isfinite(metric)) or not np.all(np.isfinite(coords)):
            raise NonFiniteCoordinate(f"structure {self.id!r} has non-finite values")
        if np.any(coords < 0) or np.any(coords >= 1):
            raise ValueError("fractional coordinates must lie in [0, 1)")
        eigs = np.linalg.eigvalsh(metric_to_matrix(metric))
        if np.any(eigs <= 0):
            raise DegenerateLattice(
                f"metric tensor of {self.id!r} is not positive definite (eigs {eigs})")
        metric.setflags(write=False)
        coords.setflags(write=False)
        object.__setattr__(self, "metric", metric)
        object.__setattr__(self, "frac_coords", coords)
        object.__setattr__(self, "species", tuple(self.species))

    @property
    def n_atoms(self) -> int:
        return self.frac_coords.shape[0]

    def metric_matrix(self) -> np.ndarray:
        return metric_to_matrix(self.metric)

    def lattice_matrix(self) -> np.ndarray:
        """Rows are lattice vectors; L @ L.T equals the metric matrix."""
        return np.linalg.cholesky(self.metric_matrix())

    def volume(self) -> float:
        return float(math.sqrt(np.linalg.det(self.metric_matrix())))

    def composition(self) -> Composition:
        counts: dict[str, int] = {}
        by_symbol: dict[str, Element] = {}
        for el in self.species:
            counts[el.symbol] = counts.get(el.symbol, 0) + 1
            by_symbol[el.symbol] = el
        entries = tuple((by_symbol[s], n) for s, n in counts.items())
        return Composition(entries)

    def lattice_parameters(self) -> tuple[float, float, float, float, float, float]:
        """(a, b, c) lengths in Angstrom and (alpha, beta, gamma) in degrees."""
        g = self.metric_matrix()
        a, b, c = math.sqrt(g[0, 0]), math.sqrt(g[1, 1]), math.sqrt(g[2, 2])
        alpha = math.degrees(math.acos(max(-1.0, min(1.0, g[1, 2] / (b * c)))))
        beta = math.degrees(math.acos(max(-1.0, min(1.0, g[0, 2] / (a * c)))))
        gamma = math.degrees(math.acos(max(-1.0, min(1.0, g[0, 1] / (a * b)))))
        return a, b, c, alpha, beta, gamma


def metric_to_matrix(metric: np.ndarray) -> np.ndarray:
    g11, g22, g33, g12, g13, g23 = np.asarray(metric, dtype=float).reshape(6)
    return np.array([[g11, g12, g13], [g12, g22, g23], [g13, g23, g33]])


def matrix_to_metric(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    return np.array([g[0, 0], g[1, 1], g[2, 2], g[0, 1], g[0, 2], g[1, 2]])


def cubic_metric(a: float) -> np.ndarray:
    return np.array([a * a, a * a, a * a, 0.0, 0.0, 0.0])


def wrap_fractional(x: np.ndarray) -> np.ndarray:
    """Componentwise x - floor(x); result always in [0, 1)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteCoordinate(f"cannot wrap non-finite coordinates: {x}")
    wrapped = x - np.floor(x)
    # floor(x) can round such that wrapped == 1.0 for tiny negative inputs
    wrapped[wrapped >= 1.0] -= 1.0
    return wrapped


def _image_offsets(reach: int) -> np.ndarray:
    r = range(-reach, reach + 1)
    return np.array(list(itertools.product(r, r, r)), dtype=float)


_IMAGES_27 = _image_offsets(1)
_IMAGES_125 = _image_offsets(2)


def _images_for_metric(gmat: np.ndarray) -> np.ndarray:
    eigs = np.linalg.eigvalsh(gmat)
    if eigs[0] <= 0:
        raise DegenerateLattice(f"metric tensor not positive definite (eigs {eigs})")
    if eigs[-1] / eigs[0] > _SKEW_CONDITION_LIMIT:
        return _IMAGES_125
    return _IMAGES_27


def pairwise_min_image_distances(s: CrystalStructure) -> list[tuple[int, int, float]]:
    """Minimum-image distance for every unordered atom pair.

    Self pairs (i, i) report the distance to the atom's nearest periodic
    copy, which guards against cells smaller than the atoms they hold.
    """
    gmat = s.metric_matrix()
    images = _images_for_metric(gmat)
    nonzero = images[np.any(images != 0, axis=1)]
    coords = s.frac_coords
    n = coords.shape[0]
    out: list[tuple[int, int, float]] = []
    for i in range(n):
        for j in range(i, n):
            offs = nonzero if i == j else images
            v = coords[i] - coords[j] + offs
            d2 = np.einsum("ki,ij,kj->k", v, gmat, v)
            out.append((i, j, float(math.sqrt(max(0.0, d2.min())))))
    return out


def neighbor_list(s: CrystalStructure,
                  cutoff: "np.ndarray | float") -> list[tuple[int, int, float]]:
    """All periodic neighbors within a cutoff, counting each image once.

    ``cutoff`` is either a scalar or an (n, n) per-pair matrix. Returns
    ordered entries (center i, neighbor j, distance); an atom's own images
    appear as (i, i, d). Assumes the cutoff stays below twice the shortest
    lattice vector, which holds for the cells in scope.
    """
    gmat = s.metric_matrix()
    images = _images_for_metric(gmat)
    coords = s.frac_coords
    n = coords.shape[0]
    cut = np.broadcast_to(np.asarray(cutoff, dtype=float), (n, n))
    out: list[tuple[int, int, float]] = []
    for i in range(n):
        for j in range(n):
            v = coords[i] - coords[j] + images
            d2 = np.einsum("ki,ij,kj->k", v, gmat, v)
            if i == j:
                d2 = d2[d2 > 1e-18]
            dists = np.sqrt(d2[d2 < cut[i, j] ** 2])
            out.extend((i, j, float(d)) for d in np.sort(dists))
    return out


def structure_to_record(s: CrystalStructure) -> str:
    """One-line serialization: id | metric | species | flat coordinates."""
    metric = ",".join(repr(float(x)) for x in s.metric)
    species = ",".join(el.symbol for el in s.species)
    coords = ",".join(repr(float(x)) for x in s.frac_coords.ravel())
    return "|".join([s.id, metric, species, coords])


def structure_from_record(line: str) -> CrystalStructure:
    sid, metric, species, coords = line.strip().split("|")
    syms = species.split(",")
    flat = np.array([float(x) for x in coords.split(",")])
    return CrystalStructure(
        metric=np.array([float(x) for x in metric.split(",")]),
        frac_coords=flat.reshape(len(syms), 3),
        species=tuple(get_element(s) for s in syms),
        id=sid,
    )


@dataclass(frozen=True)
class EnergyRecord:
    """One oracle evaluation: per-atom energy at a fidelity, with provenance."""

    structure_id: str
    fidelity: FidelityLevel
    energy_per_atom: float  # eV/atom
    forces: Optional[np.ndarray] = None  # (n, 3) eV/A
    provenance: str = ""

    def __post_init__(self):
        if not math.isfinite(self.energy_per_atom):
            raise ValueError(f"energy for {self.structure_id!r} is not finite")
        if self.forces is not None:
            forces = np.asarray(self.forces, dtype=float).reshape(-1, 3)
            forces.setflags(write=False)
            object.__setattr__(self, "forces", forces)
