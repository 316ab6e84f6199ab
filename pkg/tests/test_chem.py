import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfscreen.chem import (
    Composition,
    CrystalStructure,
    DegenerateLattice,
    EmptyComposition,
    EmptyStructure,
    FidelityLevel,
    NoOxidationStates,
    NonFiniteCoordinate,
    assign_oxidation_states,
    charge_balance,
    cubic_metric,
    matrix_to_metric,
    neighbor_list,
    pairwise_min_image_distances,
    reduce_composition,
    structure_from_record,
    structure_to_record,
    wrap_fractional,
)
from mfscreen.elements import ALLOWED_ELEMENTS, get_element

from conftest import synthetic_element


def comp(**counts):
    return Composition.from_symbols(counts)


class TestComposition:
    def test_reduce_divides_by_gcd(self):
        reduced = reduce_composition(comp(Na=2, Cl=4))
        assert [(el.symbol, n) for el, n in reduced.entries] == [("Na", 1), ("Cl", 2)]

    def test_reduce_identity_when_coprime(self):
        c = comp(Na=1, Cl=1)
        assert reduce_composition(c).entries == c.entries

    def test_reduce_three_species(self):
        # gcd computed independently of the implementation under test
        counts = {"Li": 6, "O": 9, "Fe": 3}
        g = math.gcd(*counts.values())
        reduced = reduce_composition(comp(**counts))
        assert {el.symbol: n for el, n in reduced.entries} == {
            sym: n // g for sym, n in counts.items()}

    @given(st.dictionaries(
        st.sampled_from(["Li", "O", "Fe", "Na", "Cl"]),
        st.integers(min_value=1, max_value=6), min_size=1, max_size=3))
    @settings(max_examples=60, deadline=None)
    def test_reduce_idempotent(self, counts):
        c = comp(**counts)
        once = reduce_composition(c)
        twice = reduce_composition(once)
        assert once.entries == twice.entries

    def test_entries_sorted_by_atomic_number(self):
        c = comp(Cl=1, Na=1, O=2)
        zs = [el.atomic_number for el, _ in c.entries]
        assert zs == sorted(zs)

    def test_empty_composition_rejected(self):
        with pytest.raises(EmptyComposition):
            Composition(())

    def test_atom_cap_enforced(self):
        with pytest.raises(ValueError):
            comp(Na=21)

    def test_parse_and_reduce(self):
        assert Composition.parse("Na2Cl2").atom_count == 4
        assert Composition.parse("Na24Cl24", reduce=True).formula() == "NaCl"
        with pytest.raises(EmptyComposition):
            Composition.parse("")
        with pytest.raises(EmptyComposition):
            Composition.parse("not a formula!")


class TestChargeBalance:
    def test_symmetric_salt(self):
        c = Composition(tuple(comp(Na=1, Cl=1).entries), (1, -1))
        assert charge_balance(c) == 0.0

    def test_direct_sum(self):
        a = synthetic_element("Aa", 201, 1.0, (2,))
        b = synthetic_element("Bb", 202, 1.0, (-1,))
        c = Composition(((a, 1), (b, 1)), (2, -1))
        assert charge_balance(c) == pytest.approx(1.0)

    def test_two_three_balance(self):
        # 2 * (+3) - 3 * (+2) = 0 by direct arithmetic
        a = synthetic_element("Aa", 201, 1.0, (3,))
        b = synthetic_element("Bb", 202, 1.0, (-2,))
        c = Composition(((a, 2), (b, 3)), (3, -2))
        assert charge_balance(c) == pytest.approx(2 * 3 - 3 * 2)

    def test_missing_assignment(self):
        with pytest.raises(NoOxidationStates):
            charge_balance(comp(Na=1, Cl=1))

    def test_assignment_minimizes_net_charge(self):
        c = assign_oxidation_states(comp(Fe=1, O=1))
        assert abs(charge_balance(c)) <= 1.0  # Fe has no +2-free path blocked
        c2 = assign_oxidation_states(comp(Na=1, Cl=1))
        assert charge_balance(c2) == 0.0
        assert c2.oxidation_assignment == (1, -1)

    def test_assignment_tie_prefers_first_listed_state(self):
        a = synthetic_element("Aa", 201, 1.0, (4, 2))
        b = synthetic_element("Bb", 202, 1.0, (-2, -4))
        c = assign_oxidation_states(Composition(((a, 1), (b, 1))))
        # (4,-4) and (2,-2) both balance; the earlier product combo wins
        assert c.oxidation_assignment == (4, -4)


class TestWrapFractional:
    def test_definition(self):
        np.testing.assert_allclose(
            wrap_fractional(np.array([1.2, -0.3, 0.5])), [0.2, 0.7, 0.5])

    def test_identity(self):
        np.testing.assert_array_equal(
            wrap_fractional(np.zeros(3)), np.zeros(3))

    def test_integer_lattice_points(self):
        np.testing.assert_array_equal(
            wrap_fractional(np.array([2.0, -1.0, 1.0])), np.zeros(3))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteCoordinate):
            wrap_fractional(np.array([np.nan, 0, 0]))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
           st.lists(st.integers(-5, 5), min_size=3, max_size=3))
    @settings(max_examples=100, deadline=None)
    def test_range_and_shift_invariance(self, xs, ks):
        x = np.array(xs)
        w = wrap_fractional(x)
        assert np.all(w >= 0) and np.all(w < 1)
        shifted = wrap_fractional(x + np.array(ks, dtype=float))
        np.testing.assert_allclose(shifted, w, atol=1e-6)


class TestMinImageDistances:
    def test_cubic_pair(self):
        na, cl = get_element("Na"), get_element("Cl")
        s = CrystalStructure(cubic_metric(2.0),
                             np.array([[0, 0, 0], [0.5, 0, 0]], dtype=float),
                             (na, cl), "cube")
        got = dict(((i, j), d) for i, j, d in pairwise_min_image_distances(s))
        assert got[(0, 1)] == pytest.approx(1.0)

    def test_single_atom_self_image(self):
        s = CrystalStructure(cubic_metric(2.0), np.array([[0.3, 0.3, 0.3]]),
                             (get_element("Na"),), "solo")
        assert pairwise_min_image_distances(s) == [(0, 0, pytest.approx(2.0))]

    def test_triclinic_matches_brute_force(self):
        rng = np.random.default_rng(5)
        lat = rng.normal(0, 2, (3, 3)) + np.eye(3) * 3
        gmat = lat @ lat.T
        coords = rng.random((3, 3))
        species = tuple(get_element(sym) for sym in ("Na", "Cl", "O"))
        s = CrystalStructure(matrix_to_metric(gmat), coords, species, "tri")
        images = np.array(list(itertools.product(range(-2, 3), repeat=3)),
                          dtype=float)
        for i, j, d in pairwise_min_image_distances(s):
            offs = images if i != j else images[np.any(images != 0, axis=1)]
            v = coords[i] - coords[j] + offs
            brute = math.sqrt(np.einsum("ki,ij,kj->k", v, gmat, v).min())
            assert d == pytest.approx(brute, abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(11)
        coords = rng.random((4, 3))
        species = tuple(get_element(sym) for sym in ("Na", "Cl", "Na", "Cl"))
        s1 = CrystalStructure(cubic_metric(5.0), coords, species, "a")
        shift = rng.random(3)
        s2 = CrystalStructure(cubic_metric(5.0),
                              wrap_fractional(coords + shift), species, "b")
        d1 = [d for _, _, d in pairwise_min_image_distances(s1)]
        d2 = [d for _, _, d in pairwise_min_image_distances(s2)]
        np.testing.assert_allclose(d1, d2, atol=1e-9)

    def test_neighbor_list_counts_images(self):
        # One atom in a small cubic cell sees 6 nearest self-images.
        s = CrystalStructure(cubic_metric(3.0), np.array([[0.0, 0.0, 0.0]]),
                             (get_element("Na"),), "sc")
        neighbors = neighbor_list(s, 3.1)
        assert len(neighbors) == 6
        assert all(d == pytest.approx(3.0) for _, _, d in neighbors)


class TestCrystalStructure:
    def test_degenerate_metric_rejected(self):
        metric = np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0])  # zero eigenvalue
        with pytest.raises(DegenerateLattice):
            CrystalStructure(metric, np.array([[0.1, 0.1, 0.1]]),
                             (get_element("Na"),), "bad")

    def test_negative_eigenvalue_rejected(self):
        metric = np.array([1.0, 1.0, -0.5, 0.0, 0.0, 0.0])
        with pytest.raises(DegenerateLattice):
            CrystalStructure(metric, np.array([[0.1, 0.1, 0.1]]),
                             (get_element("Na"),), "bad")

    def test_empty_structure_rejected(self):
        with pytest.raises(EmptyStructure):
            CrystalStructure(cubic_metric(3.0), np.zeros((0, 3)), (), "empty")

    def test_coordinates_must_be_wrapped(self):
        with pytest.raises(ValueError):
            CrystalStructure(cubic_metric(3.0), np.array([[1.2, 0, 0]]),
                             (get_element("Na"),), "oops")

    def test_species_length_checked(self):
        with pytest.raises(ValueError):
            CrystalStructure(cubic_metric(3.0), np.array([[0.1, 0, 0]]),
                             (get_element("Na"), get_element("Cl")), "oops")

    def test_immutable_arrays(self, rocksalt):
        with pytest.raises(ValueError):
            rocksalt.frac_coords[0, 0] = 0.9

    def test_volume_and_parameters(self):
        s = CrystalStructure(cubic_metric(4.0), np.array([[0.1, 0.2, 0.3]]),
                             (get_element("Na"),), "cube")
        assert s.volume() == pytest.approx(64.0)
        a, b, c, al, be, ga = s.lattice_parameters()
        assert (a, b, c) == pytest.approx((4.0, 4.0, 4.0))
        assert (al, be, ga) == pytest.approx((90.0, 90.0, 90.0))

    def test_record_round_trip(self, rocksalt):
        line = structure_to_record(rocksalt)
        back = structure_from_record(line)
        np.testing.assert_array_equal(back.frac_coords, rocksalt.frac_coords)
        np.testing.assert_array_equal(back.metric, rocksalt.metric)
        assert [el.symbol for el in back.species] == [
            el.symbol for el in rocksalt.species]
        assert back.id == rocksalt.id


class TestFidelity:
    def test_ordering(self):
        assert (FidelityLevel.PBE < FidelityLevel.SCAN
                < FidelityLevel.HSE06 < FidelityLevel.CCSDT)

    def test_loss_weights_strictly_increase(self):
        weights = [lvl.loss_weight for lvl in FidelityLevel]
        assert all(a < b for a, b in zip(weights, weights[1:]))
        assert FidelityLevel.PBE.loss_weight == 0.1
        assert FidelityLevel.CCSDT.loss_weight == 1.0

    def test_costs(self):
        assert FidelityLevel.CCSDT.oracle_cost == 100.0
        assert FidelityLevel.PBE.oracle_cost == 1.0


def test_whitelist_has_exactly_63_elements():
    assert len(ALLOWED_ELEMENTS) == 63
    assert all(el.allowed_oxidation_states for el in ALLOWED_ELEMENTS)
    assert all(el.covalent_radius > 0 for el in ALLOWED_ELEMENTS)
