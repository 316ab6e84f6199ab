import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfscreen.chem import Composition, CrystalStructure, EnergyRecord, FidelityLevel
from mfscreen.generator import random_feasible_structures
from mfscreen.oracles import OracleBudget, SyntheticLandscape, evaluate
from mfscreen.surrogate import (
    DivergenceUndefined,
    DivisionBySigmaZero,
    EmptyInput,
    LabeledExample,
    ModelNotTrained,
    MultiFidelityModel,
    SurrogateConfig,
    aggregate_ensemble,
    divergence_metric,
    error_propagation_report,
    estimate_label_sensitivity,
    expected_calibration_error,
    train,
)
from mfscreen.stats import norm_ppf


class TestAggregation:
    def test_all_members_identical(self):
        e, s = aggregate_ensemble([1.5] * 5, [0.2] * 5)
        assert e == pytest.approx(1.5)
        assert s == pytest.approx(0.2)

    def test_spread_fixture(self):
        e, s = aggregate_ensemble([1, 1, 1, 1, 6], [0, 0, 0, 0, 0])
        assert (e, s) == (pytest.approx(2.0), pytest.approx(2.0))

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            es = rng.normal(0, 2, 5)
            ss = np.abs(rng.normal(0, 1, 5))
            e, s = aggregate_ensemble(es, ss)
            # direct transcription of the aggregation formulas
            e_ref = sum(es) / 5
            s_ref = math.sqrt(sum(x * x for x in ss) / 5
                              + sum((x - e_ref) ** 2 for x in es) / 5)
            assert e == pytest.approx(e_ref, abs=1e-14)
            assert s == pytest.approx(s_ref, abs=1e-14)


class TestDivergenceMetric:
    def test_abs(self):
        assert divergence_metric(-1.00, -1.05, 0.05, "abs") == pytest.approx(0.05)

    def test_rel(self):
        assert divergence_metric(-1.00, -1.05, 0.05, "rel") == pytest.approx(1.0)

    def test_signed_underbinding_positive(self):
        # Low rung above the refined estimate reads as underbinding (+).
        assert divergence_metric(-1.00, -1.05, 0.05, "sgn") == pytest.approx(0.05)
        assert divergence_metric(-1.10, -1.05, 0.05, "sgn") == pytest.approx(-0.05)

    def test_rel_requires_positive_sigma(self):
        with pytest.raises(DivisionBySigmaZero):
            divergence_metric(1.0, 0.5, 0.0, "rel")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            divergence_metric(1.0, 0.5, 0.1, "weird")

    @given(st.floats(-10, 10), st.floats(-10, 10),
           st.floats(0.01, 10))
    @settings(max_examples=200, deadline=None)
    def test_identities(self, e_pbe, e_mf, sigma):
        d_abs = divergence_metric(e_pbe, e_mf, sigma, "abs")
        d_rel = divergence_metric(e_pbe, e_mf, sigma, "rel")
        d_sgn = divergence_metric(e_pbe, e_mf, sigma, "sgn")
        assert d_abs == abs(d_sgn)
        assert d_rel * sigma == pytest.approx(d_abs, rel=1e-12, abs=1e-300)


class TestECE:
    def test_perfectly_calibrated(self):
        rng = np.random.default_rng(0)
        sigmas = np.abs(rng.normal(1.0, 0.2, 10_000)) + 0.1
        preds = rng.normal(0, 1, sigmas.size)
        trues = preds + rng.normal(0, 1, sigmas.size) * sigmas
        ece = expected_calibration_error(list(zip(preds, sigmas, trues)))
        assert ece < 0.03

    def test_understated_sigma_flagged(self):
        rng = np.random.default_rng(1)
        sigmas = np.ones(10_000)
        preds = np.zeros(10_000)
        trues = rng.normal(0, 10.0, 10_000)  # 10x wider than claimed
        ece = expected_calibration_error(list(zip(preds, sigmas / 1.0, trues)))
        assert ece > 0.3

    def test_single_bin_perfect_coverage(self):
        # Half the points inside the 50% interval, half outside: exact.
        z50 = norm_ppf(0.75)
        rows = [(0.0, 1.0, z50 * 0.5)] * 50 + [(0.0, 1.0, z50 * 2.0)] * 50
        assert expected_calibration_error(rows, bins=1) == pytest.approx(0.0)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            expected_calibration_error([])

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            expected_calibration_error([(0.0, 0.0, 1.0)] * 20)


def landscape_dataset(formulas, per_comp=5, seed=0, ladder=(1.0, 0.5, 0.5, 0.5)):
    landscape = SyntheticLandscape(seed=0)
    budget = OracleBudget(total=math.inf)
    rng = np.random.default_rng(seed)
    examples = []
    structures = []
    for formula in formulas:
        comp = Composition.parse(formula)
        cells = random_feasible_structures(comp, per_comp, rng,
                                           id_prefix=f"ds-{formula}")
        structures.extend(cells)
        for k, s in enumerate(cells):
            for frac, level in zip(ladder, FidelityLevel):
                if frac < 1.0 and k % int(round(1 / frac)):
                    continue
                examples.append(LabeledExample(
                    s, evaluate(s, level, landscape, budget), None))
    return examples, structures, landscape


class TestTraining:
    def test_identical_labels_give_near_zero_divergence(self):
        rng = np.random.default_rng(0)
        comp = Composition.parse("NaCl")
        cells = random_feasible_structures(comp, 8, rng, id_prefix="flat")
        noise = 0.01
        examples = []
        for k, s in enumerate(cells):
            base = float(rng.normal(-2.0, 0.3))
            for level in FidelityLevel:
                examples.append(LabeledExample(s, EnergyRecord(
                    s.id, level, base + float(rng.normal(0, noise))), None))
        model = train(examples, SurrogateConfig(epochs=300, seed=1))
        divs = [model.predict(s).divergence for s in cells]
        assert float(np.mean(divs)) < 2 * noise + 0.02

    def test_pbe_only_weights_track_pbe_labels(self):
        rng = np.random.default_rng(1)
        comp = Composition.parse("MgO")
        cells = random_feasible_structures(comp, 8, rng, id_prefix="w0")
        examples = []
        for s in cells:
            pbe_label = float(rng.normal(-1.0, 0.2))
            examples.append(LabeledExample(
                s, EnergyRecord(s.id, FidelityLevel.PBE, pbe_label), None))
            examples.append(LabeledExample(
                s, EnergyRecord(s.id, FidelityLevel.CCSDT, pbe_label - 3.0), None))
        weights = {FidelityLevel.PBE: 1.0, FidelityLevel.SCAN: 0.0,
                   FidelityLevel.HSE06: 0.0, FidelityLevel.CCSDT: 0.0}
        model = train(examples, SurrogateConfig(epochs=300, seed=2,
                                                loss_weights=weights))
        for s in cells[:3]:
            bundle = model.predict(s)
            # zero-weight upper rungs keep the CC head at the PBE baseline
            assert bundle.divergence == pytest.approx(0.0, abs=1e-9)

    def test_single_fidelity_degraded_mode(self):
        rng = np.random.default_rng(2)
        comp = Composition.parse("NaCl")
        cells = random_feasible_structures(comp, 6, rng, id_prefix="sf")
        examples = [LabeledExample(
            s, EnergyRecord(s.id, FidelityLevel.PBE, -1.0), None) for s in cells]
        with pytest.warns(UserWarning):
            model = train(examples, SurrogateConfig(epochs=50, seed=3))
        with pytest.raises(DivergenceUndefined):
            model.predict(cells[0])
        # single-level queries still work
        e, sigma = model.predict_energy(cells[0], None, FidelityLevel.PBE)
        assert math.isfinite(e) and sigma > 0

    def test_untrained_model_raises(self):
        model = MultiFidelityModel(SurrogateConfig())
        with pytest.raises(ModelNotTrained):
            model.predict_energy(None, None, FidelityLevel.PBE)

    def test_bootstrap_member_index_sets_differ(self):
        examples, _, _ = landscape_dataset(["NaCl", "MgO"], per_comp=5)
        model = train(examples, SurrogateConfig(epochs=50, seed=4))
        signatures = {tuple(sorted(m.bootstrap_indices.tolist()))
                      for m in model.members}
        assert len(signatures) > 1

    def test_exactly_five_members_by_default(self):
        examples, _, _ = landscape_dataset(["NaCl"], per_comp=5)
        model = train(examples, SurrogateConfig(epochs=30, seed=5))
        assert len(model.members) == 5

    def test_prediction_deterministic(self):
        examples, cells, _ = landscape_dataset(["NaCl"], per_comp=5)
        model = train(examples, SurrogateConfig(epochs=50, seed=6))
        a = model.predict(cells[0])
        b = model.predict(cells[0])
        assert a == b

    def test_multi_fidelity_beats_pbe_only_on_cc_labels(self):
        # Correlated chemistry: the fidelity ladder carries real signal.
        formulas = ["FeO", "CuO", "NiO", "NaCl", "MgO"]
        examples, cells, landscape = landscape_dataset(formulas, per_comp=6)
        config = SurrogateConfig(epochs=500, seed=7, n_features=192)
        mf_model = train(examples, config)
        pbe_examples = [ex for ex in examples
                        if ex.record.fidelity == FidelityLevel.PBE]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pbe_model = train(pbe_examples, config)
        rng = np.random.default_rng(99)
        test_cells = []
        for formula in formulas:
            test_cells += random_feasible_structures(
                Composition.parse(formula), 2, rng, id_prefix=f"te-{formula}")
        truth = [landscape.energy_and_forces(s, FidelityLevel.CCSDT)[0]
                 for s in test_cells]
        mf_pred = [mf_model.predict(s).e_mf for s in test_cells]
        pbe_pred = [pbe_model.predict_energy(s, None, FidelityLevel.PBE)[0]
                    for s in test_cells]
        rmse = lambda p: float(np.sqrt(np.mean((np.array(p) - truth) ** 2)))
        assert rmse(mf_pred) < rmse(pbe_pred)


class TestForces:
    def test_gradient_check_against_finite_differences(self):
        rng = np.random.default_rng(0)
        comp = Composition.parse("NaCl")
        cells = random_feasible_structures(comp, 6, rng, id_prefix="f")
        landscape = SyntheticLandscape(seed=0)
        budget = OracleBudget(total=math.inf)
        examples = [LabeledExample(
            s, evaluate(s, FidelityLevel.PBE, landscape, budget), None)
            for s in cells]
        config = SurrogateConfig(epochs=150, seed=1, force_mode=True,
                                 force_weight=0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = train(examples, config)
        member = model.members[0]
        s = cells[0]
        forces = member.predict_forces(s, FidelityLevel.PBE)
        lat = s.lattice_matrix()
        lat_inv = np.linalg.inv(lat)
        h = 1e-5

        def member_total_energy(struct):
            feats = model.feature_map.structure_features(struct, None)
            x = model.feature_map.with_level(feats, FidelityLevel.PBE)
            return member.predict_rows(x[None, :], FidelityLevel.PBE)[0] * s.n_atoms

        for atom in (0, 1):
            for axis in range(3):
                step = np.zeros(3)
                step[axis] = h
                frac_step = step @ lat_inv
                up = s.frac_coords.copy()
                up[atom] = (up[atom] + frac_step) % 1.0
                down = s.frac_coords.copy()
                down[atom] = (down[atom] - frac_step) % 1.0
                fd = -(member_total_energy(
                    CrystalStructure(s.metric, up, s.species, "u"))
                    - member_total_energy(
                        CrystalStructure(s.metric, down, s.species, "d"))) / (2 * h)
                assert forces[atom, axis] == pytest.approx(fd, abs=1e-4)


class TestErrorPropagation:
    def test_formula(self):
        report = error_propagation_report(0.001, 0.005, 0.002, j_mf=0.5,
                                          j_diff=1.0)
        expected = math.sqrt(0.001 ** 2 + (0.5 * 0.005) ** 2 + 0.002 ** 2)
        assert report["sigma_final"] == pytest.approx(expected)
        assert report["sigma_final"] >= report["sigma_ccsdt"]

    def test_label_sensitivity_estimate(self):
        examples, cells, _ = landscape_dataset(["NaCl", "MgO"], per_comp=4)
        config = SurrogateConfig(epochs=120, seed=8, n_features=64)
        j = estimate_label_sensitivity(examples, config, cells[0], shift=0.1)
        assert math.isfinite(j)
