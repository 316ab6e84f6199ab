"""Hierarchical synthetic energy oracles.

A Lennard-Jones-type pair landscape plays ground truth. Lower theory
rungs see only part of the extra well depth that d/f-block ("correlation
prone") pairs carry, so their error versus the top rung is largest for
exactly those chemistries -- giving the screening loop a high-divergence
region to find by construction. All magnitudes here are configuration,
not physics.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .chem import Composition, CrystalStructure, EnergyRecord, FidelityLevel
from .elements import Element

# Fraction of the correlation well-depth correction each rung resolves.
CORRELATION_RESOLUTION = {
    FidelityLevel.PBE: 0.0,
    FidelityLevel.SCAN: 0.4,
    FidelityLevel.HSE06: 0.8,
    FidelityLevel.CCSDT: 1.0,
}

# Evaluation noise per fidelity (eV/atom); invented scales.
DEFAULT_NOISE_SIGMA = {
    FidelityLevel.PBE: 0.005,
    FidelityLevel.SCAN: 0.003,
    FidelityLevel.HSE06: 0.002,
    FidelityLevel.CCSDT: 0.001,
}

_PAIR_IMAGE_REACH = 2  # fixed 5^3 image block keeps the pair sum smooth


class BudgetExhausted(RuntimeError):
    pass


class InvalidCardinal(ValueError):
    pass


class RecordRejected(ValueError):
    pass


@dataclass
class OracleBudget:
    """Abstract CPU-hour ledger; spent is monotone and never exceeds total."""

    total: float
    spent: float = 0.0
    calls: dict = field(default_factory=dict)

    @property
    def remaining(self) -> float:
        return self.total - self.spent

    def can_afford(self, fidelity: FidelityLevel) -> bool:
        return self.spent + fidelity.oracle_cost <= self.total + 1e-9

    def debit(self, fidelity: FidelityLevel) -> None:
        cost = fidelity.oracle_cost
        if self.spent + cost > self.total + 1e-9:
            raise BudgetExhausted(
                f"cannot afford {fidelity.name} (cost {cost}, remaining {self.remaining})")
        self.spent += cost
        self.calls[fidelity.name] = self.calls.get(fidelity.name, 0) + 1

    def refund(self, fidelity: FidelityLevel) -> None:
        self.spent -= fidelity.oracle_cost
        self.calls[fidelity.name] -= 1

    def audit(self) -> bool:
        """Ledger conservation: spent equals the sum of per-call costs."""
        expected = sum(FidelityLevel[name].oracle_cost * n
                       for name, n in self.calls.items())
        return abs(expected - self.spent) < 1e-9 and self.spent <= self.total + 1e-9


@dataclass(frozen=True)
class SyntheticLandscape:
    """Pair-potential ground truth with fidelity-dependent systematic bias.

    The pair term is a soft-core Lennard-Jones variant: same (well depth,
    equilibrium distance) parameterization, but the repulsive wall is
    capped so barely-feasible cells stay on an eV-scale, learnable
    surface. epsilon_scale sets the base well depth (eV);
    correlation_gamma is the extra well-depth factor on pairs involving
    d/f-block species that low rungs fail to resolve.
    """

    seed: int = 0
    epsilon_scale: float = 0.4
    chi_coupling: float = 0.6  # unlike pairs bind deeper with chi contrast
    correlation_gamma: float = 0.8
    softcore_alpha: float = 0.5  # caps the d -> 0 repulsion at 8 epsilon
    noise_sigma: dict = field(default_factory=lambda: dict(DEFAULT_NOISE_SIGMA))

    def pair_params(self, a: Element, b: Element,
                    fidelity: FidelityLevel) -> tuple[float, float]:
        """(epsilon, r_min) for a species pair at a fidelity's resolution."""
        eps = self.epsilon_scale
        if a.symbol != b.symbol:
            eps *= 1.0 + self.chi_coupling * abs(a.electronegativity - b.electronegativity)
        if a.correlation_prone or b.correlation_prone:
            eps *= 1.0 + self.correlation_gamma * CORRELATION_RESOLUTION[fidelity]
        return eps, a.covalent_radius + b.covalent_radius

    def _pair_table(self, species: Sequence[Element],
                    fidelity: FidelityLevel) -> tuple[np.ndarray, np.ndarray]:
        n = len(species)
        eps = np.empty((n, n))
        rmin = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                eps[i, j], rmin[i, j] = self.pair_params(species[i], species[j], fidelity)
        return eps, rmin

    def energy_and_forces(self, s: CrystalStructure,
                          fidelity: FidelityLevel) -> tuple[float, np.ndarray]:
        """Noise-free (energy per atom, Cartesian forces on the total energy)."""
        eps, rmin = self._pair_table(s.species, fidelity)
        alpha = self.softcore_alpha
        sigma = rmin * (2.0 - alpha) ** (-1.0 / 6.0)  # well bottom at d = rmin
        lat = s.lattice_matrix()
        cart = s.frac_coords @ lat
        reach = range(-_PAIR_IMAGE_REACH, _PAIR_IMAGE_REACH + 1)
        shifts = np.array([[i, j, k] for i in reach for j in reach for k in reach],
                          dtype=float) @ lat
        n = s.n_atoms
        energy = 0.0
        forces = np.zeros((n, 3))
        for i in range(n):
            for j in range(n):
                vecs = cart[i] - cart[j] + shifts
                d2 = np.einsum("ij,ij->i", vecs, vecs)
                if i == j:
                    keep = d2 > 1e-18
                    vecs, d2 = vecs[keep], d2[keep]
                d = np.sqrt(d2)
                u = (d / sigma[i, j]) ** 6
                inv = 1.0 / (alpha + u)
                energy += 0.5 * float(np.sum(4.0 * eps[i, j] * (inv * inv - inv)))
                if i != j:
                    # dV/dd = dV/du * du/dd with du/dd = 6 u / d
                    dv = 4.0 * eps[i, j] * (-2.0 * inv ** 3 + inv ** 2) * 6.0 * u / d
                    forces[i] -= (dv / d) @ vecs
        return energy / n, forces

    def noise_for(self, structure_id: str, fidelity: FidelityLevel) -> float:
        """Deterministic per-(structure, fidelity) Gaussian draw."""
        digest = hashlib.sha256(
            f"{self.seed}|{structure_id}|{fidelity.name}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return float(rng.normal(0.0, self.noise_sigma[fidelity]))


def evaluate(s: CrystalStructure, fidelity: FidelityLevel,
             landscape: SyntheticLandscape, budget: OracleBudget,
             noise_free: bool = False) -> EnergyRecord:
    """One oracle call: debit the ledger, evaluate, return the record.

    Debit happens before evaluation and is refunded if evaluation fails,
    so concurrent callers can rely on the ledger never overdrawing.
    """
    budget.debit(fidelity)
    try:
        energy, forces = landscape.energy_and_forces(s, fidelity)
        if not noise_free:
            energy += landscape.noise_for(s.id, fidelity)
    except Exception:
        budget.refund(fidelity)
        raise
    return EnergyRecord(
        structure_id=s.id,
        fidelity=fidelity,
        energy_per_atom=energy,
        forces=forces,
        provenance=f"synthetic/{fidelity.name.lower()}",
    )


def relax_structure(s: CrystalStructure, landscape: SyntheticLandscape,
                    fidelity: FidelityLevel, max_steps: int = 80,
                    force_tol: float = 0.05,
                    max_move: float = 0.12) -> CrystalStructure:
    """Coordinate-only steepest descent on the noise-free landscape.

    Stand-in for the geometry optimization behind database entries; the
    cell is kept fixed and atoms follow the forces with a capped step.
    """
    lat = s.lattice_matrix()
    lat_inv = np.linalg.inv(lat)
    current = s
    energy, forces = landscape.energy_and_forces(current, fidelity)
    for _ in range(max_steps):
        fmax = float(np.abs(forces).max())
        if fmax < force_tol:
            break
        step = min(0.05, max_move / fmax)
        moved = current.frac_coords + (step * forces) @ lat_inv
        trial = CrystalStructure(
            metric=current.metric,
            frac_coords=np.asarray(
                moved - np.floor(moved)).clip(0.0, 1.0 - 1e-12),
            species=current.species, id=current.id)
        new_energy, new_forces = landscape.energy_and_forces(trial, fidelity)
        if new_energy >= energy:
            max_move *= 0.5
            if max_move < 1e-4:
                break
            continue
        current, energy, forces = trial, new_energy, new_forces
    return current


def cbs_extrapolate(e_x: float, e_xm1: float, x: int) -> float:
    """Complete-basis-set estimate from two consecutive cardinal numbers."""
    if x < 3:
        raise InvalidCardinal(f"cardinal number must be >= 3, got {x}")
    return e_x + (e_x - e_xm1) / ((x / (x - 1)) ** -3 - 1.0)


# ---------------------------------------------------------------------------
# Raw-record ingestion and deduplication.
# ---------------------------------------------------------------------------

# Raw line format: source, formula, a, b, c, energy (eV/atom), experimental.
_RAW_FIELDS = 7

# Entries whose lattice parameters all sit within 5% of a cluster
# representative merge into it; between 5% and the cluster window they are
# inconsistent duplicates and get dropped. Beyond the window they start a
# new cluster (a genuinely different polymorph).
DUPLICATE_TOLERANCE = 0.05
CLUSTER_WINDOW = 0.20


@dataclass(frozen=True)
class RawRecord:
    source: str
    composition: Composition
    lattice_abc: tuple[float, float, float]
    energy_per_atom: float
    experimental: bool

    @classmethod
    def parse(cls, line: str) -> "RawRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != _RAW_FIELDS:
            raise RecordRejected(f"expected {_RAW_FIELDS} fields, got {len(parts)}")
        source, formula, a, b, c, energy, exp = parts
        try:
            comp = Composition.parse(formula, reduce=True)
            abc = (float(a), float(b), float(c))
            e = float(energy)
        except Exception as err:
            raise RecordRejected(f"unparseable record: {err}") from err
        if any(v <= 0 or not math.isfinite(v) for v in abc) or not math.isfinite(e):
            raise RecordRejected("lattice parameters and energy must be finite/positive")
        return cls(source, comp, abc, e, exp.strip() in ("1", "true", "True", "yes"))


@dataclass(frozen=True)
class CuratedEntry:
    entry_id: str
    composition: Composition
    lattice_abc: tuple[float, float, float]
    energy_per_atom: float
    experimental: bool
    provenance: tuple[str, ...]

    def to_line(self) -> str:
        a, b, c = self.lattice_abc
        return "\t".join([
            self.entry_id, self.composition.formula(),
            repr(a), repr(b), repr(c), repr(self.energy_per_atom),
            "1" if self.experimental else "0", ";".join(self.provenance),
        ])


def _lattice_deviation(abc: Sequence[float], ref: Sequence[float]) -> float:
    return max(abs(p - r) / r for p, r in zip(abc, ref))


def ingest_and_deduplicate(lines: Iterable[str]) -> tuple[
        list[CuratedEntry], list[tuple[int, str]], dict]:
    """Parse raw records, reduce formulas, and deduplicate per composition.

    Returns (curated entries, rejections as (line number, reason), stats).
    Representatives are chosen experimental-first then lowest-energy;
    running the output back through ingest is a no-op.
    """
    records: list[RawRecord] = []
    rejections: list[tuple[int, str]] = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            records.append(RawRecord.parse(stripped))
        except RecordRejected as err:
            rejections.append((lineno, str(err)))

    by_formula: dict[str, list[RawRecord]] = {}
    for rec in records:
        by_formula.setdefault(rec.composition.formula(), []).append(rec)

    curated: list[CuratedEntry] = []
    n_merged = 0
    n_discarded = 0
    for formula in sorted(by_formula):
        group = sorted(by_formula[formula],
                       key=lambda r: (not r.experimental, r.energy_per_atom, r.source))
        remaining = list(group)
        while remaining:
            rep = remaining.pop(0)
            provenance = [rep.source]
            still: list[RawRecord] = []
            for other in remaining:
                dev = _lattice_deviation(other.lattice_abc, rep.lattice_abc)
                if dev <= DUPLICATE_TOLERANCE:
                    provenance.append(other.source)
                    n_merged += 1
                elif dev <= CLUSTER_WINDOW:
                    n_discarded += 1  # same cluster, inconsistent lattice
                else:
                    still.append(other)
            remaining = still
            curated.append(CuratedEntry(
                entry_id="",  # assigned after the full pass
                composition=rep.composition,
                lattice_abc=rep.lattice_abc,
                energy_per_atom=rep.energy_per_atom,
                experimental=rep.experimental,
                provenance=tuple(provenance),
            ))

    curated = [replace(entry, entry_id=f"MP-OQMD-{i:04d}")
               for i, entry in enumerate(curated, start=1)]
    stats = {
        "parsed": len(records),
        "rejected": len(rejections),
        "curated": len(curated),
        "merged_duplicates": n_merged,
        "discarded_inconsistent": n_discarded,
    }
    return curated, rejections, stats
