"""Diffusion sampler over periodic crystals.

Cells diffuse in the 6-component metric-tensor representation and atoms
in wrapped fractional coordinates: every denoising step is applied in
flat space and wrapped back to [0,1)^3, and the metric is projected back
to the positive-definite cone after each noising or denoising step.

The shipped reference denoiser is a small feed-forward network (two
hidden layers, shared across atoms) trained on the standard predict-the-
noise objective with classifier-free descriptor conditioning. It makes
the sampler testable end to end; no equivariance is claimed.
"""

from __future__ import annotations

import hashlib
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .chem import (
    Composition,
    CrystalStructure,
    matrix_to_metric,
    metric_to_matrix,
    wrap_fractional,
)
from .constraints import ALPHA_GENERATION, check_min_distances, distance_penalty_and_grad
from .descriptors import compute_descriptors, composition_descriptors

MIN_METRIC_EIGENVALUE = 0.1  # A^2, floor for the positive-definite projection
WRAPPED_IMAGE_REACH = 3  # image-sum truncation for wrapped-normal math

DEFAULT_STEPS = 1000
DEFAULT_CONDITIONING_STRENGTH = 0.3


class StepOutOfRange(ValueError):
    pass


class DenoiserContractViolation(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta sequence with cached cumulative alpha-bar products."""

    steps: int
    betas: np.ndarray
    kind: str
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float).reshape(-1)
        if betas.shape[0] != self.steps:
            raise ValueError("betas length must equal steps")
        if np.any(betas < 0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie in [0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of (1 - beta) through step t; 1 at t = 0."""
        if not 0 <= t <= self.steps:
            raise StepOutOfRange(f"t={t} outside [0, {self.steps}]")
        return float(self.alpha_bars[t])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.steps:
            raise StepOutOfRange(f"t={t} outside [1, {self.steps}]")
        return float(self.betas[t - 1])

    @classmethod
    def cosine(cls, steps: int = DEFAULT_STEPS, offset: float = 0.008) -> "NoiseSchedule":
        ts = np.arange(steps + 1) / steps
        f = np.cos((ts + offset) / (1 + offset) * math.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
        return cls(steps, betas, "cosine")

    @classmethod
    def linear(cls, steps: int = DEFAULT_STEPS, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(steps, np.linspace(beta_start, beta_end, steps), "linear")


@dataclass(frozen=True)
class ConditioningContext:
    """Descriptor target and blend strength for guided sampling."""

    q: Optional[np.ndarray] = None
    strength: float = DEFAULT_CONDITIONING_STRENGTH
    refresh_each_step: bool = False  # recompute q from the current estimate

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"conditioning strength must be in [0, 1], got {self.strength}")
        if self.strength > 0 and not 0.2 <= self.strength <= 0.4:
            warnings.warn(
                f"conditioning strength {self.strength} is outside the tuned range [0.2, 0.4]",
                stacklevel=2)
        if self.q is not None:
            q = np.asarray(self.q, dtype=float).reshape(-1)
            q.setflags(write=False)
            object.__setattr__(self, "q", q)


UNCONDITIONAL = ConditioningContext(q=None, strength=0.0)


class Denoiser:
    """Interface: predict the injected noise for both channels.

    ``predict`` must be deterministic given (structure, t, q) and return
    arrays shaped like (metric 6-vector, coords (n, 3)); ``q=None`` asks
    for the unconditional prediction.
    """

    def predict(self, s: CrystalStructure, t: int,
                q: Optional[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


def metric_scale_for(species) -> float:
    """Composition-derived whitening scale for the metric channel.

    Diffusion runs on G / scale so every composition's cell tensor sits
    near unit magnitude regardless of atom size or count."""
    r_mean = float(np.mean([el.covalent_radius for el in species]))
    vol = len(species) * 1.3 * (2.0 * r_mean) ** 3
    return vol ** (2.0 / 3.0)


def project_metric_pd(metric: np.ndarray,
                      floor: float = MIN_METRIC_EIGENVALUE) -> np.ndarray:
    """Clamp metric eigenvalues to >= floor, keeping eigenvectors."""
    gmat = metric_to_matrix(metric)
    eigs, vecs = np.linalg.eigh(gmat)
    if eigs[0] >= floor:
        return np.asarray(metric, dtype=float).reshape(6)
    clamped = np.maximum(eigs, floor)
    return matrix_to_metric((vecs * clamped) @ vecs.T)


def forward_marginal(x0: np.ndarray, t: int, schedule: NoiseSchedule,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form t-step noising of an array channel, before any wrapping.

    Returns (noised values, the standard-normal draw used), so callers can
    verify the marginal variance 1 - alpha_bar(t) directly.
    """
    ab = schedule.alpha_bar(t)
    x0 = np.asarray(x0, dtype=float)
    eps = rng.standard_normal(x0.shape)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, eps


def forward_noise(s: CrystalStructure, t: int, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> CrystalStructure:
    """Noise a structure to step t: metric stays PD, coordinates wrap.

    The metric channel diffuses in whitened units (G / composition scale)
    so the marginal matches the unit-variance prior the sampler starts
    from."""
    if t == 0:
        return s
    scale = metric_scale_for(s.species)
    noisy_scaled, _ = forward_marginal(s.metric / scale, t, schedule, rng)
    noisy_coords, _ = forward_marginal(s.frac_coords, t, schedule, rng)
    return CrystalStructure(
        metric=project_metric_pd(noisy_scaled * scale),
        frac_coords=wrap_fractional(noisy_coords),
        species=s.species,
        id=f"{s.id}@t{t}",
    )


def _blended_prediction(s: CrystalStructure, t: int, denoiser: Denoiser,
                        ctx: ConditioningContext) -> tuple[np.ndarray, np.ndarray]:
    lam = ctx.strength
    q = ctx.q
    if q is not None and ctx.refresh_each_step:
        q = compute_descriptors(s).as_array()
    if q is None or lam == 0.0:
        eps_m, eps_x = denoiser.predict(s, t, None)
    elif lam == 1.0:
        eps_m, eps_x = denoiser.predict(s, t, q)
    else:
        um, ux = denoiser.predict(s, t, None)
        cm, cx = denoiser.predict(s, t, q)
        eps_m = (1.0 - lam) * um + lam * cm
        eps_x = (1.0 - lam) * ux + lam * cx
    eps_m = np.asarray(eps_m, dtype=float)
    eps_x = np.asarray(eps_x, dtype=float)
    if eps_m.shape != (6,) or eps_x.shape != s.frac_coords.shape:
        raise DenoiserContractViolation(
            f"denoiser returned shapes {eps_m.shape}/{eps_x.shape}, "
            f"expected (6,)/{s.frac_coords.shape}")
    return eps_m, eps_x


def reverse_step(s_t: CrystalStructure, t: int, denoiser: Denoiser,
                 ctx: ConditioningContext, schedule: NoiseSchedule,
                 rng: np.random.Generator) -> CrystalStructure:
    """One ancestral denoising step from t to t-1."""
    if t < 1:
        raise StepOutOfRange(f"reverse step needs t >= 1, got {t}")
    beta = schedule.beta(t)
    if beta == 0.0:
        return s_t
    alpha = 1.0 - beta
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    eps_m, eps_x = _blended_prediction(s_t, t, denoiser, ctx)

    mscale = metric_scale_for(s_t.species)
    step_scale = beta / math.sqrt(1.0 - ab_t)
    mean_m = (s_t.metric / mscale - step_scale * eps_m) / math.sqrt(alpha)
    mean_x = (s_t.frac_coords - step_scale * eps_x) / math.sqrt(alpha)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    if var > 0 and t > 1:
        sd = math.sqrt(var)
        mean_m = mean_m + sd * rng.standard_normal(6)
        mean_x = mean_x + sd * rng.standard_normal(mean_x.shape)
    return CrystalStructure(
        metric=project_metric_pd(mean_m * mscale),
        frac_coords=wrap_fractional(mean_x),
        species=s_t.species,
        id=s_t.id,
    )


def project_to_distance_rule(s: CrystalStructure, alpha: float = ALPHA_GENERATION,
                             max_iters: int = 50) -> tuple[CrystalStructure, bool]:
    """Push coordinates down the distance-penalty gradient until the
    alpha rule holds or the iteration budget runs out."""
    ok, _ = check_min_distances(s, alpha)
    if ok:
        return s, True
    coords = s.frac_coords.copy()
    current = s
    penalty, grad = distance_penalty_and_grad(current, alpha)
    for _ in range(max_iters):
        gmax = float(np.abs(grad).max())
        if gmax < 1e-12:
            break  # only cell-size violations remain; coordinates cannot fix them
        step = 0.08 / gmax
        for _ in range(4):
            trial = CrystalStructure(
                metric=current.metric,
                frac_coords=wrap_fractional(coords - step * grad),
                species=s.species, id=s.id)
            new_penalty, new_grad = distance_penalty_and_grad(trial, alpha)
            if new_penalty < penalty:
                break
            step *= 0.5
        if new_penalty >= penalty:
            break
        current, coords = trial, trial.frac_coords.copy()
        penalty, grad = new_penalty, new_grad
        if penalty == 0.0:
            break
    ok, _ = check_min_distances(current, alpha)
    return current, ok


@dataclass
class SampleBatch:
    structures: list[CrystalStructure]
    n_requested: int
    n_rejected: int

    @property
    def acceptance_rate(self) -> float:
        return len(self.structures) / self.n_requested if self.n_requested else 0.0


def sample(n: int, composition: Composition, ctx: ConditioningContext,
           denoiser: Denoiser, schedule: NoiseSchedule,
           rng: np.random.Generator, id_prefix: str = "gen",
           projection_iters: int = 50,
           project_every_step: bool = True) -> SampleBatch:
    """Draw n structures for a composition through the reverse chain.

    Each reverse step is followed by a projected-gradient push toward the
    generation-stage distance rule; chains still violating it after the
    final projection are dropped and counted.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    species = composition.expand_species()
    n_atoms = len(species)
    kept: list[CrystalStructure] = []
    rejected = 0
    mscale = metric_scale_for(species)
    for i in range(n):
        metric = project_metric_pd(rng.standard_normal(6) * mscale)
        coords = wrap_fractional(rng.standard_normal((n_atoms, 3)))
        s = CrystalStructure(metric=metric, frac_coords=coords,
                             species=species, id=f"{id_prefix}-{i:05d}")
        for t in range(schedule.steps, 0, -1):
            s = reverse_step(s, t, denoiser, ctx, schedule, rng)
            if project_every_step or t == 1:
                s, _ = project_to_distance_rule(s, ALPHA_GENERATION, projection_iters)
        ok, _ = check_min_distances(s, ALPHA_GENERATION)
        if ok:
            kept.append(s)
        else:
            rejected += 1
    return SampleBatch(kept, n, rejected)


def sample_two_stage(n: int, composition: Composition, denoiser: Denoiser,
                     schedule: NoiseSchedule, rng: np.random.Generator,
                     target_q: Optional[np.ndarray] = None,
                     weak_strength: float = 0.1,
                     id_prefix: str = "gen2") -> SampleBatch:
    """Weak conditioning during sampling plus descriptor re-ranking after,
    which trades a little guidance for less mode collapse."""
    if target_q is None:
        target_q = composition_descriptors(composition).as_array()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ctx = ConditioningContext(q=target_q, strength=weak_strength)
        batch = sample(n, composition, ctx, denoiser, schedule, rng, id_prefix)
    batch.structures.sort(
        key=lambda s: (float(np.linalg.norm(compute_descriptors(s).as_array() - target_q)), s.id))
    return batch


# ---------------------------------------------------------------------------
# Reference denoiser: per-atom feed-forward regressor with two hidden
# layers, trained by Adam on the predict-the-noise objective.
# ---------------------------------------------------------------------------

class _MLP:
    """Two-hidden-layer tanh network with manual backprop."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        self.sizes = tuple(sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(rng.normal(0.0, math.sqrt(1.0 / fan_in), (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._adam_m = [np.zeros_like(w) for w in self.weights + self.biases]
        self._adam_v = [np.zeros_like(w) for w in self.weights + self.biases]
        self._adam_t = 0
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        a1 = np.tanh(x @ self.weights[0] + self.biases[0])
        a2 = np.tanh(a1 @ self.weights[1] + self.biases[1])
        out = a2 @ self.weights[2] + self.biases[2]
        self._cache = (x, a1, a2)
        return out

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        x, a1, a2 = self._cache
        grads_w = [None, None, None]
        grads_b = [None, None, None]
        grads_w[2] = a2.T @ dout
        grads_b[2] = dout.sum(axis=0)
        da2 = dout @ self.weights[2].T
        dz2 = da2 * (1.0 - a2 * a2)
        grads_w[1] = a1.T @ dz2
        grads_b[1] = dz2.sum(axis=0)
        da1 = dz2 @ self.weights[1].T
        dz1 = da1 * (1.0 - a1 * a1)
        grads_w[0] = x.T @ dz1
        grads_b[0] = dz1.sum(axis=0)
        return grads_w + grads_b

    def adam_step(self, grads: list[np.ndarray], lr: float,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self._adam_t += 1
        params = self.weights + self.biases
        for i, (p, g) in enumerate(zip(params, grads)):
            self._adam_m[i] = beta1 * self._adam_m[i] + (1 - beta1) * g
            self._adam_v[i] = beta2 * self._adam_v[i] + (1 - beta2) * g * g
            mhat = self._adam_m[i] / (1 - beta1 ** self._adam_t)
            vhat = self._adam_v[i] / (1 - beta2 ** self._adam_t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)


def _time_embedding(t: int, schedule: NoiseSchedule) -> np.ndarray:
    frac = t / schedule.steps
    return np.array([frac, math.sin(2 * math.pi * frac), math.cos(2 * math.pi * frac),
                     math.sqrt(1.0 - schedule.alpha_bar(t))])


def _species_features_of(species) -> np.ndarray:
    return np.array([[el.electronegativity / 4.0, el.covalent_radius / 2.5,
                      el.atomic_number / 100.0] for el in species])


_Q_DIM = 8
# sincos, gain-scaled sincos, metric, temb, q, flag, species
_COORD_IN = 6 + 6 + 6 + 4 + _Q_DIM + 1 + 3
_METRIC_IN = 6 + 4 + _Q_DIM + 1 + 3  # metric, temb, q, flag, mean species


class ReferenceDenoiser(Denoiser):
    """Shipped denoiser: shared per-atom coordinate head + metric head.

    The coordinate head predicts the injected noise directly; gain-scaled
    trigonometric inputs keep the late-chain score linearly reachable.
    The metric head predicts the clean metric tensor, which the closed
    form converts into a noise prediction, so the cell scale cannot drift
    along the reverse chain.
    """

    SCHEMA = f"reference-denoiser/2 coord={_COORD_IN}x48x48x3 metric={_METRIC_IN}x32x32x6"

    def __init__(self, rng: np.random.Generator, hidden: int = 48,
                 metric_hidden: int = 32):
        self.coord_net = _MLP([_COORD_IN, hidden, hidden, 3], rng)
        self.metric_net = _MLP([_METRIC_IN, metric_hidden, metric_hidden, 6], rng)
        self.loss_history: list[float] = []
        self._schedule: Optional[NoiseSchedule] = None

    # -- feature building ---------------------------------------------------

    def _inputs(self, scaled_metric: np.ndarray, coords: np.ndarray,
                species_feats: np.ndarray, t: int, q: Optional[np.ndarray],
                schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
        n = coords.shape[0]
        temb = _time_embedding(t, schedule)
        if q is None:
            qv = np.zeros(_Q_DIM)
            flag = 0.0
        else:
            qv = np.asarray(q, dtype=float).reshape(_Q_DIM)
            flag = 1.0
        sin = np.sin(2 * math.pi * coords)
        cos = np.cos(2 * math.pi * coords)
        gain = 1.0 / math.sqrt(1.0 - schedule.alpha_bar(t) + 0.01)
        sincos = np.concatenate([sin, cos, gain * sin, gain * cos], axis=1)
        shared = np.concatenate([scaled_metric, temb, qv, [flag]])
        coord_in = np.concatenate([sincos, np.tile(shared, (n, 1)), species_feats], axis=1)
        metric_in = np.concatenate([shared, species_feats.mean(axis=0)])
        return coord_in, metric_in

    def _eps_metric(self, scaled_metric: np.ndarray, g0_hat: np.ndarray, t: int,
                    schedule: NoiseSchedule) -> np.ndarray:
        # Convert the predicted clean (whitened) metric into noise.
        ab = schedule.alpha_bar(t)
        return (scaled_metric - math.sqrt(ab) * g0_hat) / math.sqrt(max(1.0 - ab, 1e-8))

    def predict(self, s, t, q):
        if self._schedule is None:
            raise RuntimeError("denoiser is untrained; call train_reference_denoiser")
        scaled = s.metric / metric_scale_for(s.species)
        coord_in, metric_in = self._inputs(
            scaled, s.frac_coords, _species_features_of(s.species),
            t, q, self._schedule)
        eps_x = self.coord_net.forward(coord_in)
        g0_hat = self.metric_net.forward(metric_in[None, :])[0]
        return self._eps_metric(scaled, g0_hat, t, self._schedule), eps_x

    # -- persistence ----------------------------------------------------------

    def save(self, path: str) -> None:
        arrays = {}
        for name, net in (("coord", self.coord_net), ("metric", self.metric_net)):
            for i, w in enumerate(net.weights):
                arrays[f"{name}_w{i}"] = w
            for i, b in enumerate(net.biases):
                arrays[f"{name}_b{i}"] = b
        arrays["schema_hash"] = np.frombuffer(
            hashlib.sha256(self.SCHEMA.encode()).digest(), dtype=np.uint8)
        arrays["betas"] = self._schedule.betas
        arrays["kind"] = np.array([self._schedule.kind])
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str) -> "ReferenceDenoiser":
        data = np.load(path, allow_pickle=False)
        expected = np.frombuffer(hashlib.sha256(cls.SCHEMA.encode()).digest(),
                                 dtype=np.uint8)
        if not np.array_equal(data["schema_hash"], expected):
            raise ValueError("denoiser blob schema hash mismatch")
        out = cls(np.random.default_rng(0))
        for name, net in (("coord", out.coord_net), ("metric", out.metric_net)):
            net.weights = [data[f"{name}_w{i}"] for i in range(3)]
            net.biases = [data[f"{name}_b{i}"] for i in range(3)]
        betas = data["betas"]
        out._schedule = NoiseSchedule(len(betas), betas, str(data["kind"][0]))
        return out


def train_reference_denoiser(dataset: Sequence[CrystalStructure],
                             schedule: NoiseSchedule,
                             rng: Optional[np.random.Generator] = None,
                             n_steps: int = 4000,
                             lr: float = 5e-3,
                             draws_per_step: int = 12,
                             conditional_fraction: float = 0.5) -> ReferenceDenoiser:
    """Fit the reference denoiser on the predict-the-noise objective.

    Descriptor conditioning is dropped at random during training so the
    same network serves both the conditional and unconditional branches.
    """
    if not dataset:
        raise EmptyDataset("cannot train a denoiser on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = ReferenceDenoiser(rng)
    model._schedule = schedule
    q_cache = [compute_descriptors(s).as_array() for s in dataset]
    spec_cache = [_species_features_of(s.species) for s in dataset]
    scale_cache = [metric_scale_for(s.species) for s in dataset]

    for step in range(n_steps):
        idx = int(rng.integers(len(dataset)))
        s0 = dataset[idx]
        mscale = scale_cache[idx]
        coord_ins, metric_ins, coord_tgts, metric_tgts = [], [], [], []
        for k in range(draws_per_step):
            # Extra low-noise draws: that regime carries most of the
            # learnable coordinate signal.
            if k % 2 == 0:
                t = int(rng.integers(1, schedule.steps + 1))
            else:
                t = int(rng.integers(1, max(2, schedule.steps // 4 + 1)))
            noisy_scaled, eps_m = forward_marginal(s0.metric / mscale, t, schedule, rng)
            noisy_scaled = project_metric_pd(noisy_scaled * mscale) / mscale
            noisy_coords, eps_x = forward_marginal(s0.frac_coords, t, schedule, rng)
            q = q_cache[idx] if rng.random() < conditional_fraction else None
            ci, mi = model._inputs(noisy_scaled, wrap_fractional(noisy_coords),
                                   spec_cache[idx], t, q, schedule)
            coord_ins.append(ci)
            metric_ins.append(mi)
            coord_tgts.append(eps_x)
            # The metric head regresses the clean whitened metric; the
            # noise prediction follows from it through the closed form.
            metric_tgts.append(s0.metric / mscale)
        coord_x = np.concatenate(coord_ins, axis=0)
        coord_y = np.concatenate(coord_tgts, axis=0)
        metric_x = np.stack(metric_ins, axis=0)
        metric_y = np.stack(metric_tgts, axis=0)

        pred_x = model.coord_net.forward(coord_x)
        pred_m = model.metric_net.forward(metric_x)
        loss = float(np.mean((pred_x - coord_y) ** 2) + np.mean((pred_m - metric_y) ** 2))
        model.loss_history.append(loss)

        step_lr = lr * (0.1 ** (step / max(1, n_steps)))  # decay one decade
        dx = 2.0 * (pred_x - coord_y) / pred_x.size
        dm = 2.0 * (pred_m - metric_y) / pred_m.size
        model.coord_net.adam_step(model.coord_net.backward(dx), step_lr)
        model.metric_net.adam_step(model.metric_net.backward(dm), step_lr)
    return model


class WrappedGaussianScoreDenoiser(Denoiser):
    """Analytic-score denoiser for a wrapped-Gaussian coordinate target.

    Used to verify the reverse chain: with the exact score of the target
    marginal, ancestral sampling must reproduce the target distribution.
    The metric channel follows the plain-Gaussian score toward a fixed
    target metric; metric_sigma is expressed in the whitened units the
    chain evolves.
    """

    def __init__(self, coord_mean: np.ndarray, coord_sigma: float,
                 metric_target: np.ndarray, schedule: NoiseSchedule,
                 metric_sigma: float = 0.05):
        self.coord_mean = np.asarray(coord_mean, dtype=float)
        self.coord_sigma = float(coord_sigma)
        self.metric_target = np.asarray(metric_target, dtype=float).reshape(6)
        self.metric_sigma = float(metric_sigma)
        self.schedule = schedule

    def predict(self, s, t, q):
        ab = self.schedule.alpha_bar(t)
        one_minus = 1.0 - ab
        # Coordinates: score of the wrapped normal marginal at step t.
        mean_t = math.sqrt(ab) * self.coord_mean
        var_t = ab * self.coord_sigma ** 2 + one_minus
        score = wrapped_normal_score(s.frac_coords, mean_t, var_t)
        eps_x = -math.sqrt(one_minus) * score
        # Metric: plain Gaussian score keeps the cell pinned to its target,
        # in the whitened units the chain evolves.
        mscale = metric_scale_for(s.species)
        mvar_t = ab * self.metric_sigma ** 2 + one_minus
        mscore = -(s.metric - math.sqrt(ab) * self.metric_target) / mscale / mvar_t
        eps_m = -math.sqrt(one_minus) * mscore
        return eps_m, eps_x


def wrapped_normal_score(x: np.ndarray, mean: np.ndarray, var: float,
                         reach: int = WRAPPED_IMAGE_REACH) -> np.ndarray:
    """d/dx log of the wrapped normal density, image sum truncated at
    |k| <= reach (error below 1e-12 for sigma < 0.5)."""
    x = np.asarray(x, dtype=float)
    delta = x - mean
    ks = np.arange(-reach, reach + 1, dtype=float)
    shifted = delta[..., None] + ks  # broadcast images on the last axis
    weights = np.exp(-shifted ** 2 / (2.0 * var))
    num = np.sum(-shifted / var * weights, axis=-1)
    den = np.sum(weights, axis=-1)
    return num / np.maximum(den, 1e-300)


def wrapped_normal_pdf(x: np.ndarray, mean: float, var: float,
                       reach: int = WRAPPED_IMAGE_REACH) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    ks = np.arange(-reach, reach + 1, dtype=float)
    shifted = x[..., None] - mean + ks
    return np.sum(np.exp(-shifted ** 2 / (2.0 * var)), axis=-1) / math.sqrt(2 * math.pi * var)


def random_feasible_structures(composition: Composition, n: int,
                               rng: np.random.Generator,
                               id_prefix: str = "seed",
                               jitter: float = 0.1,
                               vol_spread: float = 0.25,
                               max_attempts: int = 40) -> list[CrystalStructure]:
    """Random cells projected onto the generation-stage distance rule.

    Volume is sized from covalent radii so the rule is satisfiable, with
    a log-uniform spread so downstream regressors see a range of packing
    densities; used to bootstrap the reference denoiser and surrogate.
    """
    species = composition.expand_species()
    n_atoms = len(species)
    r_mean = float(np.mean([el.covalent_radius for el in species]))
    base_vol = n_atoms * 1.3 * (2.0 * r_mean) ** 3  # near-equilibrium packing
    out: list[CrystalStructure] = []
    made = 0
    while len(out) < n and made < n * max_attempts:
        made += 1
        vol = base_vol * math.exp(rng.uniform(-vol_spread, vol_spread))
        a = vol ** (1.0 / 3.0)
        diag = (a * (1.0 + jitter * rng.uniform(-1, 1, 3))) ** 2
        off = a * a * jitter * 0.3 * rng.uniform(-1, 1, 3)
        metric = project_metric_pd(np.concatenate([diag, off]),
                                   floor=MIN_METRIC_EIGENVALUE)
        coords = rng.random((n_atoms, 3))
        s = CrystalStructure(metric=metric, frac_coords=coords,
                             species=species, id=f"{id_prefix}-{len(out):05d}")
        s, ok = project_to_distance_rule(s, ALPHA_GENERATION, max_iters=200)
        if ok:
            out.append(s)
    if len(out) < n:
        raise RuntimeError(
            f"could only build {len(out)}/{n} feasible cells for "
            f"{composition.formula()}")
    return out
