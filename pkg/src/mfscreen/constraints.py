"""Physical-plausibility validation: distances, charge, Pauling rules, and
bond-valence sums.

Two stages with different strictness: during generation only the
minimum-distance rule is hard (the chemistry checks feed a smooth soft
penalty the sampler can descend), while final validation applies every
check as a hard reject.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._data import read_data_text
from .chem import (
    CHARGE_TOL_VALIDATION,
    Composition,
    CrystalStructure,
    assign_oxidation_states,
    charge_balance,
    neighbor_list,
    pairwise_min_image_distances,
    reduce_composition,
    _images_for_metric,
)

ALPHA_GENERATION = 0.7
ALPHA_VALIDATION = 0.8
NEIGHBOR_CUTOFF_SCALE = 1.2  # neighbors are atoms with d < 1.2 (r_i + r_j)
PAULING_TOLERANCE = 0.2
BVS_TOLERANCE = 0.3
BVS_B = 0.37  # Angstrom

BVS_TABLE_VERSION = "v1"


class NotIonic(ValueError):
    pass


class MissingBVSParameter(KeyError):
    pass


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    violation: float  # how far past threshold; 0 when satisfied
    applicable: bool = True


@dataclass(frozen=True)
class ConstraintReport:
    structure_id: str
    checks: tuple[CheckResult, ...]
    overall_pass: bool
    soft_penalty: float

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_line(self) -> str:
        parts = [self.structure_id, "pass" if self.overall_pass else "fail",
                 f"{self.soft_penalty:.6g}"]
        parts += [f"{c.name}={'ok' if c.passed else 'bad'}:{c.violation:.4g}"
                  if c.applicable else f"{c.name}=n/a" for c in self.checks]
        return "\t".join(parts)


@dataclass(frozen=True)
class CoordinationEnvironment:
    center_atom: int
    neighbor_indices: tuple[int, ...]  # one entry per periodic image
    coordination_number: int
    bond_valences: tuple[float, ...]


def _load_bvs_table() -> dict[tuple[str, str], float]:
    raw = read_data_text(f"bvs_params_{BVS_TABLE_VERSION}.tsv")
    table: dict[tuple[str, str], float] = {}
    for line in raw.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cation, anion, r0 = line.split("\t")
        table[(cation, anion)] = float(r0)
    return table


BVS_PARAMS = _load_bvs_table()


def atom_radii(s: CrystalStructure) -> np.ndarray:
    return np.array([el.covalent_radius for el in s.species])


def structure_oxidation_states(s: CrystalStructure) -> np.ndarray:
    """Per-atom signed oxidation state, from the charge-minimizing
    assignment of the structure's composition."""
    comp = assign_oxidation_states(s.composition())
    by_symbol = {el.symbol: q for (el, _), q in
                 zip(comp.entries, comp.oxidation_assignment)}
    return np.array([by_symbol[el.symbol] for el in s.species], dtype=int)


def check_min_distances(s: CrystalStructure, alpha: float) -> tuple[bool, float]:
    """Hard-sphere rule: every pair must satisfy d >= alpha (r_i + r_j).

    Returns (pass, worst ratio d/(r_i+r_j)); self-image pairs count, so a
    cell smaller than its own atoms fails.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    radii = atom_radii(s)
    worst = math.inf
    for i, j, d in pairwise_min_image_distances(s):
        worst = min(worst, d / (radii[i] + radii[j]))
    return worst >= alpha, worst


def _covalent_neighbors(s: CrystalStructure) -> list[tuple[int, int, float]]:
    radii = atom_radii(s)
    cutoff = NEIGHBOR_CUTOFF_SCALE * (radii[:, None] + radii[None, :])
    return neighbor_list(s, cutoff)


def coordination_environment(s: CrystalStructure, atom: int,
                             states: Optional[np.ndarray] = None,
                             bvs_params: Optional[dict] = None) -> CoordinationEnvironment:
    """Neighbors of one atom under the covalent-radius cutoff rule."""
    params = BVS_PARAMS if bvs_params is None else bvs_params
    if states is None:
        states = structure_oxidation_states(s)
    neighbors = [(j, d) for i, j, d in _covalent_neighbors(s) if i == atom]
    valences = []
    for j, d in neighbors:
        key = _bvs_key(s, atom, j, states)
        r0 = params.get(key) if key is not None else None
        valences.append(math.exp((r0 - d) / BVS_B) if r0 is not None else 0.0)
    return CoordinationEnvironment(
        center_atom=atom,
        neighbor_indices=tuple(j for j, _ in neighbors),
        coordination_number=len(neighbors),
        bond_valences=tuple(valences),
    )


def _bvs_key(s: CrystalStructure, i: int, j: int,
             states: np.ndarray) -> Optional[tuple[str, str]]:
    """(cation, anion) symbol pair for a bond, or None if not cation-anion."""
    qi, qj = states[i], states[j]
    if qi > 0 and qj < 0:
        return s.species[i].symbol, s.species[j].symbol
    if qi < 0 and qj > 0:
        return s.species[j].symbol, s.species[i].symbol
    return None


def pauling_deviations(s: CrystalStructure,
                       states: Optional[np.ndarray] = None,
                       neighbors: Optional[list] = None) -> list[tuple[int, float]]:
    """Local charge-neutrality deviation for every cation polyhedron.

    The coordination number counts all neighbors under the cutoff rule;
    only the anion neighbors carry bond strength Z/CN back, so a cation
    surrounded partly by cations shows a nonzero deviation.
    """
    if states is None:
        states = structure_oxidation_states(s)
    cations = [i for i in range(s.n_atoms) if states[i] > 0]
    anions = {i for i in range(s.n_atoms) if states[i] < 0}
    if not cations or not anions:
        raise NotIonic("structure has no cation/anion partition")
    if neighbors is None:
        neighbors = _covalent_neighbors(s)
    out = []
    for i in cations:
        mine = [j for ci, j, _ in neighbors if ci == i]
        cn = len(mine)
        z = float(states[i])
        if cn == 0:
            out.append((i, z))
            continue
        strength_sum = sum(z / cn for j in mine if j in anions)
        out.append((i, abs(strength_sum - z)))
    return out


def pauling_valence_check(s: CrystalStructure,
                          states: Optional[np.ndarray] = None,
                          neighbors: Optional[list] = None) -> CheckResult:
    """Worst cation-polyhedron deviation against the 0.2 threshold."""
    try:
        devs = pauling_deviations(s, states, neighbors)
    except NotIonic:
        return CheckResult("pauling", True, 0.0, applicable=False)
    worst = max(d for _, d in devs)
    return CheckResult("pauling", worst < PAULING_TOLERANCE,
                       max(0.0, worst - PAULING_TOLERANCE))


def bond_valence_sum(s: CrystalStructure, atom: int,
                     states: Optional[np.ndarray] = None,
                     bvs_params: Optional[dict] = None,
                     neighbors: Optional[list] = None) -> float:
    """Sum of exp((R0 - d)/b) over counter-ion neighbors of one atom.

    Raises MissingBVSParameter when a counter-ion bond has no R0 entry.
    """
    if states is None:
        states = structure_oxidation_states(s)
    params = BVS_PARAMS if bvs_params is None else bvs_params
    if neighbors is None:
        neighbors = _covalent_neighbors(s)
    total = 0.0
    for i, j, d in neighbors:
        if i != atom:
            continue
        key = _bvs_key(s, i, j, states)
        if key is None:
            continue
        if key not in params:
            raise MissingBVSParameter(f"no R0 for pair {key}")
        total += math.exp((params[key] - d) / BVS_B)
    return total


def _bvs_check(s: CrystalStructure, states: np.ndarray,
               bvs_params: Optional[dict],
               neighbors: Optional[list] = None) -> CheckResult:
    if neighbors is None:
        neighbors = _covalent_neighbors(s)
    worst = 0.0
    applicable = False
    for i in range(s.n_atoms):
        if states[i] == 0:
            continue
        try:
            bvs = bond_valence_sum(s, i, states, bvs_params, neighbors)
        except MissingBVSParameter:
            continue
        applicable = True
        worst = max(worst, abs(bvs - abs(states[i])))
    if not applicable:
        return CheckResult("bvs", True, 0.0, applicable=False)
    return CheckResult("bvs", worst < BVS_TOLERANCE, max(0.0, worst - BVS_TOLERANCE))


def validate(s: CrystalStructure, stage: str,
             bvs_params: Optional[dict] = None) -> ConstraintReport:
    """Full constraint report for one structure.

    generation: distance at alpha=0.7 is hard; Pauling/BVS enter the soft
    penalty. validation: distance at 0.8, charge at 0.01 |e|, Pauling and
    BVS are all hard. Not-applicable checks never fail a structure.
    """
    if stage not in ("generation", "validation"):
        raise ValueError(f"unknown stage {stage!r}")
    alpha = ALPHA_GENERATION if stage == "generation" else ALPHA_VALIDATION
    dist_ok, worst_ratio = check_min_distances(s, alpha)
    checks = [CheckResult("min_distance", dist_ok, max(0.0, alpha - worst_ratio))]

    states = structure_oxidation_states(s)
    # net charge per formula unit = net charge of the reduced composition
    comp = assign_oxidation_states(reduce_composition(s.composition()))
    net = abs(charge_balance(comp))
    neighbors = _covalent_neighbors(s)
    pauling = pauling_valence_check(s, states, neighbors)
    bvs = _bvs_check(s, states, bvs_params, neighbors)

    soft = 0.0
    if stage == "generation":
        soft = pauling.violation ** 2 + bvs.violation ** 2
        checks += [pauling, bvs]
        hard = [checks[0]]
    else:
        charge = CheckResult("charge", net < CHARGE_TOL_VALIDATION,
                             max(0.0, net - CHARGE_TOL_VALIDATION))
        checks += [charge, pauling, bvs]
        hard = checks
    overall = all(c.passed for c in hard if c.applicable)
    return ConstraintReport(s.id, tuple(checks), overall, soft)


def distance_penalty_and_grad(s: CrystalStructure,
                              alpha: float) -> tuple[float, np.ndarray]:
    """Squared-hinge distance penalty and its gradient in fractional space.

    Penalty is sum over pairs of max(0, alpha (r_i+r_j) - d)^2; smooth,
    zero exactly when the alpha rule holds. Self-image violations add to
    the value but have no coordinate gradient (only the cell could fix
    them).
    """
    gmat = s.metric_matrix()
    images = _images_for_metric(gmat)
    nonzero = images[np.any(images != 0, axis=1)]
    coords = s.frac_coords
    radii = atom_radii(s)
    n = coords.shape[0]
    penalty = 0.0
    grad = np.zeros((n, 3))
    for i in range(n):
        for j in range(i, n):
            offs = nonzero if i == j else images
            v = coords[i] - coords[j] + offs
            d2 = np.einsum("ki,ij,kj->k", v, gmat, v)
            k = int(np.argmin(d2))
            d = math.sqrt(max(d2[k], 1e-24))
            gap = alpha * (radii[i] + radii[j]) - d
            if gap <= 0:
                continue
            penalty += gap * gap
            if i == j:
                continue
            dd_dfi = gmat @ v[k] / d
            grad[i] += -2.0 * gap * dd_dfi
            grad[j] -= -2.0 * gap * dd_dfi
    return penalty, grad
