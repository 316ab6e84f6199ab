import itertools
import math

import numpy as np
import pytest

from mfscreen.chem import Composition, CrystalStructure, EmptyStructure, cubic_metric
from mfscreen.constraints import (
    ALPHA_GENERATION,
    ALPHA_VALIDATION,
    BVS_B,
    MissingBVSParameter,
    NEIGHBOR_CUTOFF_SCALE,
    NotIonic,
    bond_valence_sum,
    check_min_distances,
    coordination_environment,
    distance_penalty_and_grad,
    pauling_deviations,
    pauling_valence_check,
    structure_oxidation_states,
    validate,
)
from mfscreen.elements import get_element

from conftest import synthetic_element


def ionic_pair_elements(radius=1.0, qa=2, qb=-2):
    a = synthetic_element("Aa", 201, radius, (qa,), "s", 1.0)
    b = synthetic_element("Bb", 202, radius, (qb,), "p", 3.0)
    return a, b


class TestMinDistances:
    def test_boundary_inclusive(self, pair_cell):
        ok, worst = check_min_distances(pair_cell(1.4), alpha=0.7)
        assert ok
        assert worst == pytest.approx(0.7)

    def test_just_below_boundary_fails(self, pair_cell):
        ok, worst = check_min_distances(pair_cell(1.39), alpha=0.7)
        assert not ok
        assert worst < 0.7

    def test_alpha_domain(self, pair_cell):
        with pytest.raises(ValueError):
            check_min_distances(pair_cell(1.4), alpha=0.0)

    def test_eight_atom_cell_matches_brute_force(self):
        rng = np.random.default_rng(3)
        species = tuple(get_element(s) for s in
                        ("Na", "Cl", "Na", "Cl", "O", "Fe", "O", "Fe"))
        coords = rng.random((8, 3))
        s = CrystalStructure(cubic_metric(7.0), coords, species, "rand8")
        radii = np.array([el.covalent_radius for el in species])
        gmat = s.metric_matrix()
        images = np.array(list(itertools.product(range(-2, 3), repeat=3)),
                          dtype=float)
        worst = math.inf
        for i in range(8):
            for j in range(i, 8):
                offs = images if i != j else images[np.any(images != 0, axis=1)]
                v = coords[i] - coords[j] + offs
                d = math.sqrt(np.einsum("ki,ij,kj->k", v, gmat, v).min())
                worst = min(worst, d / (radii[i] + radii[j]))
        ok, got = check_min_distances(s, 0.7)
        assert got == pytest.approx(worst, abs=1e-12)
        assert ok == (worst >= 0.7)

    def test_self_image_violation_detected(self):
        # Cell period 1.2 A with an atom of radius 1.0: own images collide.
        big = synthetic_element("Aa", 201, 1.0, (1,))
        s = CrystalStructure(cubic_metric(1.2), np.array([[0.0, 0.0, 0.0]]),
                             (big,), "tiny")
        ok, worst = check_min_distances(s, 0.7)
        assert not ok
        assert worst == pytest.approx(1.2 / 2.0)


def cluster_cell(center_el, neighbor_el, shells, a=12.0):
    """One center atom plus neighbors at given (direction, distance) pairs,
    isolated in a roomy cell so periodic images stay out of every cutoff."""
    coords = [[0.5, 0.5, 0.5]]
    species = [center_el]
    for direction, dist in shells:
        direction = np.asarray(direction, dtype=float)
        unit = direction / np.linalg.norm(direction)
        coords.append((np.array([0.5, 0.5, 0.5]) + unit * dist / a).tolist())
        species.append(neighbor_el)
    return CrystalStructure(cubic_metric(a), np.array(coords), tuple(species),
                            "cluster")


class TestPauling:
    def test_exact_balance_passes(self):
        a, b = ionic_pair_elements(qa=4, qb=-1)
        dirs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)]
        s = cluster_cell(a, b, [(d, 2.0) for d in dirs])  # inside 1.2*(r+r)
        states = np.array([4, -1, -1, -1, -1])
        devs = dict(pauling_deviations(s, states))
        assert devs[0] == pytest.approx(0.0, abs=1e-12)
        assert pauling_valence_check(s, states).passed

    def test_bond_strength_definition(self):
        # CN = 3 anions: each bond carries Z / CN = 4/3.
        a, b = ionic_pair_elements(qa=4, qb=-1)
        dirs = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
        s = cluster_cell(a, b, [(d, 2.0) for d in dirs])
        states = np.array([4, -1, -1, -1])
        env = coordination_environment(s, 0, states, bvs_params={})
        assert env.coordination_number == 3
        # Deviation reconstructs the per-bond strength: |CN*(Z/CN) - Z| = 0
        devs = dict(pauling_deviations(s, states))
        assert devs[0] == pytest.approx(abs(3 * (4 / 3) - 4), abs=1e-12)

    def test_cation_cation_contact_breaks_balance(self):
        # 3 anions + 1 cation neighbor: CN = 4, anion strength sum = 3*Z/4.
        a, b = ionic_pair_elements(qa=4, qb=-1)
        dirs = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
        s = cluster_cell(a, b, [(d, 2.0) for d in dirs])
        coords = np.vstack([s.frac_coords,
                            [0.5 - 2.0 / 12.0, 0.5, 0.5]])
        s2 = CrystalStructure(s.metric, coords, s.species + (a,), "contact")
        states = np.array([4, -1, -1, -1, 4])
        devs = dict(pauling_deviations(s2, states))
        assert devs[0] == pytest.approx(abs(3 * (4 / 4) - 4), abs=1e-12)
        assert not pauling_valence_check(s2, states).passed

    def test_rocksalt_hand_computed(self, rocksalt):
        # Each Na sees exactly its 6 Cl neighbors: deviation |6*(1/6) - 1| = 0.
        devs = pauling_deviations(rocksalt)
        assert len(devs) == 4
        for _, dev in devs:
            assert dev == pytest.approx(0.0, abs=1e-9)

    def test_not_ionic(self):
        s = CrystalStructure(cubic_metric(6.0),
                             np.array([[0.1, 0.1, 0.1], [0.6, 0.6, 0.6]]),
                             (get_element("Cu"), get_element("Cu")), "metal")
        with pytest.raises(NotIonic):
            pauling_deviations(s, np.array([0, 0]))
        check = pauling_valence_check(s, np.array([0, 0]))
        assert not check.applicable and check.passed


class TestBondValenceSum:
    def test_single_neighbor_at_r0(self):
        a, b = ionic_pair_elements()
        r0 = 2.0
        s = cluster_cell(a, b, [((1, 0, 0), r0)])
        params = {("Aa", "Bb"): r0}
        states = np.array([2, -2])
        assert bond_valence_sum(s, 0, states, params) == pytest.approx(1.0)

    def test_no_neighbors_in_cutoff(self):
        a, b = ionic_pair_elements()
        s = cluster_cell(a, b, [((1, 0, 0), 5.0)])  # beyond 1.2 * 2.0
        assert bond_valence_sum(s, 0, np.array([2, -2]), {("Aa", "Bb"): 2.0}) == 0.0

    def test_four_neighbors_closed_form(self):
        # d = R0 + b ln 4 makes each bond worth exactly 1/4.
        a, b = ionic_pair_elements(radius=1.2)
        r0 = 2.0
        d = r0 + BVS_B * math.log(4.0)
        dirs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)]
        s = cluster_cell(a, b, [(v, d) for v in dirs])
        states = np.array([2, -2, -2, -2, -2])
        assert bond_valence_sum(s, 0, states, {("Aa", "Bb"): r0}) == pytest.approx(1.0)

    def test_missing_parameter_raises(self):
        a, b = ionic_pair_elements()
        s = cluster_cell(a, b, [((1, 0, 0), 2.0)])
        with pytest.raises(MissingBVSParameter):
            bond_valence_sum(s, 0, np.array([2, -2]), {})

    def test_rocksalt_shipped_parameters(self, rocksalt):
        # d = a/2 = 2.82 A against the shipped Na-Cl R0.
        expected = 6 * math.exp((2.15 - 2.82) / BVS_B)
        assert bond_valence_sum(rocksalt, 0) == pytest.approx(expected, rel=1e-9)


class TestValidate:
    def test_stage_semantics(self, pair_cell):
        # ratio 0.75: passes generation alpha 0.7, fails validation alpha 0.8
        s = pair_cell(1.5)
        assert validate(s, "generation").check("min_distance").passed
        report = validate(s, "validation")
        assert not report.check("min_distance").passed
        assert not report.overall_pass

    def test_compliant_rocksalt_both_stages(self, rocksalt):
        for stage in ("generation", "validation"):
            report = validate(rocksalt, stage)
            assert report.overall_pass, report.checks
        assert validate(rocksalt, "generation").soft_penalty == 0.0

    def test_empty_structure_error(self):
        with pytest.raises(EmptyStructure):
            CrystalStructure(cubic_metric(3.0), np.zeros((0, 3)), (), "none")

    def test_unknown_stage(self, rocksalt):
        with pytest.raises(ValueError):
            validate(rocksalt, "both")

    def test_monotonicity_validation_implies_generation(self):
        from mfscreen.generator import random_feasible_structures
        rng = np.random.default_rng(0)
        comps = [Composition.parse(f) for f in ("NaCl", "MgO", "FeO")]
        for comp in comps:
            for s in random_feasible_structures(comp, 3, rng, id_prefix="mono"):
                if validate(s, "validation").check("min_distance").passed:
                    assert validate(s, "generation").check("min_distance").passed

    def test_determinism(self, rocksalt):
        assert validate(rocksalt, "validation") == validate(rocksalt, "validation")

    def test_charge_imbalance_fails_validation(self):
        a = synthetic_element("Aa", 201, 1.3, (2,), "s", 1.0)
        b = synthetic_element("Bb", 202, 1.3, (-1,), "p", 3.0)
        s = CrystalStructure(
            cubic_metric(6.0),
            np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]),
            (a, b), "imbalanced")
        report = validate(s, "validation")
        assert not report.check("charge").passed
        assert not report.overall_pass
        # net charge of the reduced formula unit is +1
        assert report.check("charge").violation == pytest.approx(1.0 - 0.01)


class TestSoftPenalty:
    def test_zero_on_feasible(self, rocksalt):
        penalty, grad = distance_penalty_and_grad(rocksalt, ALPHA_GENERATION)
        assert penalty == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_positive_when_violated(self, pair_cell):
        penalty, grad = distance_penalty_and_grad(pair_cell(1.0), ALPHA_GENERATION)
        assert penalty == pytest.approx((0.7 * 2.0 - 1.0) ** 2)
        assert np.abs(grad).max() > 0

    def test_gradient_matches_finite_differences(self, pair_cell):
        s = pair_cell(1.0)
        _, grad = distance_penalty_and_grad(s, ALPHA_GENERATION)
        eps = 1e-6
        for atom in range(2):
            for axis in range(3):
                for sign, stash in ((1, []), ):
                    coords = s.frac_coords.copy()
                    coords[atom, axis] += eps
                    plus = CrystalStructure(s.metric, coords % 1.0, s.species, "p")
                    coords = s.frac_coords.copy()
                    coords[atom, axis] -= eps
                    minus = CrystalStructure(s.metric, coords % 1.0, s.species, "m")
                    fd = (distance_penalty_and_grad(plus, ALPHA_GENERATION)[0]
                          - distance_penalty_and_grad(minus, ALPHA_GENERATION)[0]
                          ) / (2 * eps)
                    assert grad[atom, axis] == pytest.approx(fd, abs=1e-5)

    def test_continuity_near_threshold(self, pair_cell):
        # Penalty approaches zero smoothly as the pair reaches the rule.
        values = [distance_penalty_and_grad(pair_cell(d), 0.7)[0]
                  for d in (1.38, 1.39, 1.399, 1.4)]
        assert values[-1] == 0.0
        assert all(v1 > v2 for v1, v2 in zip(values, values[1:]))
        assert values[2] < 1e-5
