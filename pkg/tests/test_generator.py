import math

import numpy as np
import pytest

from mfscreen.chem import Composition, CrystalStructure, cubic_metric, wrap_fractional
from mfscreen.constraints import check_min_distances
from mfscreen.elements import get_element
from mfscreen.generator import (
    ConditioningContext,
    Denoiser,
    DenoiserContractViolation,
    EmptyDataset,
    NoiseSchedule,
    ReferenceDenoiser,
    StepOutOfRange,
    UNCONDITIONAL,
    WrappedGaussianScoreDenoiser,
    forward_marginal,
    forward_noise,
    metric_scale_for,
    project_metric_pd,
    project_to_distance_rule,
    random_feasible_structures,
    reverse_step,
    sample,
    sample_two_stage,
    train_reference_denoiser,
    wrapped_normal_pdf,
)


def matched_distance(s, template):
    """Mean per-coordinate wrapped distance under per-species matching."""
    total, count = 0.0, 0
    for sym in {el.symbol for el in s.species}:
        si = [i for i, el in enumerate(s.species) if el.symbol == sym]
        ti = [i for i, el in enumerate(template.species) if el.symbol == sym]
        used = set()
        for i in si:
            best, best_d = None, math.inf
            for j in ti:
                if j in used:
                    continue
                d = s.frac_coords[i] - template.frac_coords[j]
                d -= np.round(d)
                dist = float(np.abs(d).mean())
                if dist < best_d:
                    best, best_d = j, dist
            used.add(best)
            total += best_d
            count += 1
    return total / count


class TestNoiseSchedule:
    @pytest.mark.parametrize("factory", [NoiseSchedule.cosine, NoiseSchedule.linear])
    def test_alpha_bar_strictly_decreasing(self, factory):
        sched = factory(200)
        diffs = np.diff(sched.alpha_bars)
        assert np.all(diffs < 0)
        assert sched.alpha_bar(0) == 1.0

    def test_betas_in_range(self):
        sched = NoiseSchedule.cosine(1000)
        assert np.all(sched.betas > 0) and np.all(sched.betas < 1)
        assert sched.steps == 1000

    def test_step_out_of_range(self):
        sched = NoiseSchedule.cosine(10)
        with pytest.raises(StepOutOfRange):
            sched.alpha_bar(11)
        with pytest.raises(StepOutOfRange):
            sched.beta(0)


class TestForwardNoise:
    def test_t_zero_is_identity(self, rocksalt):
        sched = NoiseSchedule.cosine(50)
        rng = np.random.default_rng(0)
        assert forward_noise(rocksalt, 0, sched, rng) is rocksalt

    def test_marginal_variance(self):
        sched = NoiseSchedule.cosine(100)
        rng = np.random.default_rng(1)
        x0 = np.full(4000, 0.37)
        for t in (25, 50, 100):
            noisy, _ = forward_marginal(x0, t, sched, rng)
            ab = sched.alpha_bar(t)
            var = np.var(noisy - math.sqrt(ab) * x0)
            se = (1 - ab) * math.sqrt(2.0 / (x0.size - 1))
            assert abs(var - (1 - ab)) < 3 * se

    def test_terminal_step_decorrelates(self):
        sched = NoiseSchedule.cosine(300)
        rng = np.random.default_rng(2)
        x0 = rng.random(1000)
        noisy, _ = forward_marginal(x0, 300, sched, rng)
        corr = np.corrcoef(x0, noisy)[0, 1]
        assert abs(corr) < 0.05

    def test_structure_invariants_preserved(self, rocksalt):
        sched = NoiseSchedule.cosine(60)
        rng = np.random.default_rng(3)
        for t in (1, 30, 60):
            noisy = forward_noise(rocksalt, t, sched, rng)
            assert np.all(noisy.frac_coords >= 0) and np.all(noisy.frac_coords < 1)
            assert np.linalg.eigvalsh(noisy.metric_matrix())[0] > 0


class _EchoDenoiser(Denoiser):
    """Returns zero noise; records the q it was called with."""

    def __init__(self):
        self.calls = []

    def predict(self, s, t, q):
        self.calls.append(None if q is None else np.array(q))
        return np.zeros(6), np.zeros_like(s.frac_coords)


class _BadShapeDenoiser(Denoiser):
    def predict(self, s, t, q):
        return np.zeros(5), np.zeros_like(s.frac_coords)


class TestReverseStep:
    def test_zero_noise_schedule_fixed_point(self, rocksalt):
        sched = NoiseSchedule(5, np.zeros(5), "degenerate")
        rng = np.random.default_rng(0)
        out = reverse_step(rocksalt, 3, _EchoDenoiser(), UNCONDITIONAL, sched, rng)
        assert out is rocksalt

    def test_lambda_zero_is_q_independent(self, rocksalt):
        sched = NoiseSchedule.cosine(20)
        noisy = forward_noise(rocksalt, 10, sched, np.random.default_rng(1))
        outs = []
        for q in (np.zeros(8), np.ones(8)):
            ctx = ConditioningContext(q=q, strength=0.0)
            out = reverse_step(noisy, 10, _EchoDenoiser(), ctx, sched,
                               np.random.default_rng(7))
            outs.append(out)
        np.testing.assert_array_equal(outs[0].frac_coords, outs[1].frac_coords)
        np.testing.assert_array_equal(outs[0].metric, outs[1].metric)

    def test_blend_endpoints_exact(self, rocksalt):
        sched = NoiseSchedule.cosine(20)
        noisy = forward_noise(rocksalt, 10, sched, np.random.default_rng(1))
        den = _EchoDenoiser()
        reverse_step(noisy, 10, den, UNCONDITIONAL, sched, np.random.default_rng(0))
        assert den.calls == [None]
        den = _EchoDenoiser()
        ctx = ConditioningContext(q=np.ones(8), strength=1.0)
        reverse_step(noisy, 10, den, ctx, sched, np.random.default_rng(0))
        assert len(den.calls) == 1 and den.calls[0] is not None

    def test_shape_violation_raises(self, rocksalt):
        sched = NoiseSchedule.cosine(20)
        with pytest.raises(DenoiserContractViolation):
            reverse_step(rocksalt, 10, _BadShapeDenoiser(), UNCONDITIONAL, sched,
                         np.random.default_rng(0))

    def test_t_below_one_rejected(self, rocksalt):
        sched = NoiseSchedule.cosine(20)
        with pytest.raises(StepOutOfRange):
            reverse_step(rocksalt, 0, _EchoDenoiser(), UNCONDITIONAL, sched,
                         np.random.default_rng(0))

    def test_strength_warning_outside_tuned_range(self):
        with pytest.warns(UserWarning):
            ConditioningContext(q=np.ones(8), strength=0.9)


class TestKnownScoreSampling:
    def test_wrapped_gaussian_target_recovered(self):
        steps = 300
        sched = NoiseSchedule.cosine(steps)
        mu, sigma0 = 0.5, 0.1
        n_atoms = 20
        target_metric = cubic_metric(6.0)
        den = WrappedGaussianScoreDenoiser(
            np.full((n_atoms, 3), mu), sigma0, target_metric, sched,
            metric_sigma=0.005)
        rng = np.random.default_rng(42)
        species = (get_element("Na"),) * n_atoms
        samples = []
        mscale = metric_scale_for(species)
        for chain in range(40):
            coords = wrap_fractional(rng.standard_normal((n_atoms, 3)))
            s = CrystalStructure(project_metric_pd(rng.standard_normal(6) * mscale),
                                 coords, species, f"chain{chain}")
            for t in range(steps, 0, -1):
                s = reverse_step(s, t, den, UNCONDITIONAL, sched, rng)
            samples.append(s.frac_coords.ravel())
        values = np.concatenate(samples)
        hist, edges = np.histogram(values, bins=20, range=(0.0, 1.0))
        centers = 0.5 * (edges[:-1] + edges[1:])
        target = wrapped_normal_pdf(centers, mu, sigma0 ** 2)
        tv = 0.5 * np.abs(hist / hist.sum() - target / target.sum()).sum()
        assert tv < 0.08
        # the metric channel converged to its pinned target
        np.testing.assert_allclose(s.metric, target_metric, atol=1.0)


class TestSample:
    @pytest.fixture(scope="class")
    def trained(self):
        rng = np.random.default_rng(7)
        comp = Composition.from_symbols({"Na": 2, "Cl": 2})
        template = random_feasible_structures(comp, 1, rng, id_prefix="tmpl")[0]
        sched = NoiseSchedule.cosine(60)
        den = train_reference_denoiser([template], sched,
                                       np.random.default_rng(1), n_steps=3000)
        return comp, template, sched, den

    def test_seeded_determinism(self, trained):
        comp, _, sched, den = trained
        a = sample(2, comp, UNCONDITIONAL, den, sched, np.random.default_rng(5),
                   projection_iters=10)
        b = sample(2, comp, UNCONDITIONAL, den, sched, np.random.default_rng(5),
                   projection_iters=10)
        assert len(a.structures) == len(b.structures)
        for sa, sb in zip(a.structures, b.structures):
            np.testing.assert_array_equal(sa.frac_coords, sb.frac_coords)
            np.testing.assert_array_equal(sa.metric, sb.metric)

    def test_outputs_satisfy_invariants(self, trained):
        comp, _, sched, den = trained
        batch = sample(4, comp, UNCONDITIONAL, den, sched,
                       np.random.default_rng(6), projection_iters=10)
        assert batch.n_requested == 4
        for s in batch.structures:
            assert np.all(s.frac_coords >= 0) and np.all(s.frac_coords < 1)
            assert np.linalg.eigvalsh(s.metric_matrix())[0] > 0
            ok, _ = check_min_distances(s, 0.7)
            assert ok

    def test_generation_pass_rate(self, trained):
        comp, _, sched, den = trained
        batch = sample(25, comp, UNCONDITIONAL, den, sched,
                       np.random.default_rng(8), projection_iters=20)
        assert batch.acceptance_rate >= 0.9

    def test_schedule_switch_keeps_invariants(self, trained):
        comp, template, _, _ = trained
        sched = NoiseSchedule.linear(60)
        den = train_reference_denoiser([template], sched,
                                       np.random.default_rng(2), n_steps=800)
        batch = sample(2, comp, UNCONDITIONAL, den, sched,
                       np.random.default_rng(9), projection_iters=10)
        for s in batch.structures:
            assert np.all(s.frac_coords >= 0) and np.all(s.frac_coords < 1)

    def test_two_stage_ranks_by_descriptor_distance(self, trained):
        comp, _, sched, den = trained
        from mfscreen.descriptors import compute_descriptors, composition_descriptors
        target = composition_descriptors(comp).as_array()
        batch = sample_two_stage(4, comp, den, sched, np.random.default_rng(10),
                                 target_q=target)
        dists = [float(np.linalg.norm(compute_descriptors(s).as_array() - target))
                 for s in batch.structures]
        assert dists == sorted(dists)


class TestTrainReferenceDenoiser:
    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train_reference_denoiser([], NoiseSchedule.cosine(10))

    def test_loss_decreases_on_smoothed_window(self):
        rng = np.random.default_rng(3)
        comp = Composition.from_symbols({"Na": 2, "Cl": 2})
        structures = random_feasible_structures(comp, 2, rng, id_prefix="tr")
        sched = NoiseSchedule.cosine(40)
        den = train_reference_denoiser(structures, sched,
                                       np.random.default_rng(0), n_steps=800)
        first = float(np.mean(den.loss_history[:100]))
        last = float(np.mean(den.loss_history[-100:]))
        assert last < first

    def test_single_structure_concentration(self):
        rng = np.random.default_rng(7)
        comp = Composition.from_symbols({"Na": 2, "Cl": 2})
        template = random_feasible_structures(comp, 1, rng, id_prefix="tmpl")[0]
        sched = NoiseSchedule.cosine(60)
        den = train_reference_denoiser([template], sched,
                                       np.random.default_rng(1),
                                       n_steps=8000, lr=8e-3, draws_per_step=16)
        dists = []
        for seed in (3, 4, 5):
            batch = sample(6, comp, UNCONDITIONAL, den, sched,
                           np.random.default_rng(seed), projection_iters=20)
            dists += [matched_distance(s, template) for s in batch.structures]
        assert float(np.mean(dists)) < 0.1

    def test_noise_training_control_does_not_concentrate(self):
        rng = np.random.default_rng(11)
        comp = Composition.from_symbols({"Na": 2, "Cl": 2})
        template = random_feasible_structures(comp, 1, rng, id_prefix="tmpl")[0]
        # Train against unrelated random cells: no mode to concentrate on.
        noise_cells = random_feasible_structures(comp, 8, rng, id_prefix="noise")
        sched = NoiseSchedule.cosine(60)
        den = train_reference_denoiser(noise_cells, sched,
                                       np.random.default_rng(1), n_steps=2000)
        batch = sample(6, comp, UNCONDITIONAL, den, sched,
                       np.random.default_rng(3), projection_iters=20)
        dists = [matched_distance(s, template) for s in batch.structures]
        assert float(np.mean(dists)) > 0.1


class TestProjection:
    def test_violating_cell_gets_repaired(self):
        na, cl = get_element("Na"), get_element("Cl")
        s = CrystalStructure(cubic_metric(7.0),
                             np.array([[0.5, 0.5, 0.5], [0.52, 0.5, 0.5]]),
                             (na, cl), "close")
        ok, _ = check_min_distances(s, 0.7)
        assert not ok
        repaired, success = project_to_distance_rule(s, 0.7, max_iters=100)
        assert success
        ok, _ = check_min_distances(repaired, 0.7)
        assert ok

    def test_feasible_cell_untouched(self, rocksalt):
        out, ok = project_to_distance_rule(rocksalt, 0.7)
        assert ok and out is rocksalt


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, rocksalt):
        sched = NoiseSchedule.cosine(30)
        den = train_reference_denoiser([rocksalt], sched,
                                       np.random.default_rng(0), n_steps=50)
        path = tmp_path / "denoiser.npz"
        den.save(str(path))
        loaded = ReferenceDenoiser.load(str(path))
        eps_m, eps_x = den.predict(rocksalt, 10, None)
        eps_m2, eps_x2 = loaded.predict(rocksalt, 10, None)
        np.testing.assert_array_equal(eps_m, eps_m2)
        np.testing.assert_array_equal(eps_x, eps_x2)

    def test_schema_hash_mismatch(self, tmp_path, rocksalt):
        sched = NoiseSchedule.cosine(30)
        den = train_reference_denoiser([rocksalt], sched,
                                       np.random.default_rng(0), n_steps=50)
        path = tmp_path / "denoiser.npz"
        den.save(str(path))
        data = dict(np.load(str(path), allow_pickle=False))
        data["schema_hash"] = np.zeros(32, dtype=np.uint8)
        np.savez(str(path), **data)
        with pytest.raises(ValueError):
            ReferenceDenoiser.load(str(path))
