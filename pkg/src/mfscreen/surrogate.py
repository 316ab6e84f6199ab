"""Multi-fidelity ensemble surrogate.

Five random-feature regressors (fixed randomized cosine feature map plus
a linear head fit by Adam) share one weighted multi-task loss across
fidelity rungs, with a fidelity one-hot in the feature vector so a single
head serves every rung. Ensemble aggregation follows the mean /
variance-decomposition formulas exactly; the divergence score is the gap
between the PBE-conditioned and top-rung-conditioned queries.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .chem import CrystalStructure, EnergyRecord, FidelityLevel, _images_for_metric
from .descriptors import compute_descriptors, composition_descriptors
from .stats import norm_cdf, norm_ppf

N_ENSEMBLE_MEMBERS = 5
ECE_WELL_CALIBRATED = 0.1


class ModelNotTrained(RuntimeError):
    pass


class DivergenceUndefined(RuntimeError):
    pass


class DivisionBySigmaZero(ZeroDivisionError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    """One training row: structure, its energy record, optional cached q."""

    structure: CrystalStructure
    record: EnergyRecord
    q: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SurrogateConfig:
    n_members: int = N_ENSEMBLE_MEMBERS
    n_features: int = 128
    epochs: int = 400
    lr: float = 0.05
    lr_end: float = 0.005
    force_weight: float = 0.0  # lambda on the force MSE block
    ridge: float = 1e-6
    holdout_fraction: float = 0.2
    seed: int = 0
    force_mode: bool = False  # smooth features only, enables force predictions
    loss_weights: Optional[dict] = None  # FidelityLevel -> weight override


@dataclass(frozen=True)
class PredictionBundle:
    e_mf: float
    sigma_mf: float
    e_pbe_pred: float
    divergence: float
    member_energies: tuple[float, ...]
    member_sigmas: tuple[float, ...]


def aggregate_ensemble(member_energies: Sequence[float],
                       member_sigmas: Sequence[float]) -> tuple[float, float]:
    """Ensemble mean and total uncertainty.

    sigma^2 = mean member variance + population variance of the means.
    """
    es = np.asarray(member_energies, dtype=float)
    ss = np.asarray(member_sigmas, dtype=float)
    e_mf = float(es.mean())
    sigma_mf = float(math.sqrt(np.mean(ss ** 2) + es.var()))
    return e_mf, sigma_mf


def divergence_metric(e_pbe: float, e_mf: float, sigma_mf: float,
                      kind: str = "abs") -> float:
    """Low-vs-high-fidelity disagreement: abs, rel, or signed flavor.

    The signed flavor is positive when the low rung sits above the
    refined estimate (underbinding)."""
    d_abs = abs(e_pbe - e_mf)
    if kind == "abs":
        return d_abs
    if kind == "rel":
        if sigma_mf <= 0:
            raise DivisionBySigmaZero("relative divergence needs sigma_mf > 0")
        return d_abs / sigma_mf
    if kind == "sgn":
        return math.copysign(d_abs, e_pbe - e_mf) if d_abs > 0 else 0.0
    raise ValueError(f"unknown divergence kind {kind!r}")


# ---------------------------------------------------------------------------
# Feature map.
# ---------------------------------------------------------------------------

_RBF_CENTERS = np.array([0.7, 0.85, 1.0, 1.2, 1.45, 1.8])
_RBF_WIDTH = 0.15

# Bell over the pair-distance ratio near the bonding minimum; its overlap
# with correlation-prone pairs carries the fidelity-gap geometry.
_BOND_WELL_CENTER = 1.0
_BOND_WELL_WIDTH = 0.2


def _min_image_pairs(s: CrystalStructure) -> list[tuple[int, int, np.ndarray, float]]:
    """(i, j, cartesian vector, distance) for each i<j pair at its nearest image."""
    gmat = s.metric_matrix()
    images = _images_for_metric(gmat)
    lat = s.lattice_matrix()
    coords = s.frac_coords
    out = []
    for i in range(s.n_atoms):
        for j in range(i + 1, s.n_atoms):
            v = coords[i] - coords[j] + images
            d2 = np.einsum("ki,ij,kj->k", v, gmat, v)
            k = int(np.argmin(d2))
            vec = v[k] @ lat
            out.append((i, j, vec, float(math.sqrt(max(d2[k], 1e-24)))))
    return out


class FeatureMap:
    """Structure/descriptor/fidelity featurization shared by all members.

    force_mode restricts the map to coordinate-independent statistics plus
    smooth pair features, so member energies stay differentiable and
    forces can be read off analytically.
    """

    def __init__(self, force_mode: bool = False):
        self.force_mode = force_mode

    def structure_features(self, s: CrystalStructure,
                           q: Optional[np.ndarray] = None) -> np.ndarray:
        if q is None:
            if self.force_mode:
                q = composition_descriptors(s.composition()).as_array()
            else:
                q = compute_descriptors(s).as_array()
        chi = np.array([el.electronegativity for el in s.species])
        zs = np.array([el.atomic_number for el in s.species])
        comp = np.array([
            chi.mean() / 4.0, chi.std(),
            zs.mean() / 100.0,
            float(np.mean([el.correlation_prone for el in s.species])),
            s.n_atoms / 20.0,
        ])
        radii = np.array([el.covalent_radius for el in s.species])
        flags = np.array([el.correlation_prone for el in s.species], dtype=float)
        pairs = _min_image_pairs(s)
        if pairs:
            ratios = np.array([d / (radii[i] + radii[j]) for i, j, _, d in pairs])
            pair_flag = np.array([max(flags[i], flags[j]) for i, j, _, _ in pairs])
        else:
            ratios = np.array([1.0])
            pair_flag = np.array([flags[0]])
        wells = np.exp(-(ratios - _BOND_WELL_CENTER) ** 2
                       / (2 * _BOND_WELL_WIDTH ** 2))
        geom = [float(ratios.mean()), math.log(s.volume() / s.n_atoms),
                float((wells * pair_flag).mean()), float(wells.mean())]
        if self.force_mode:
            rbf = np.exp(-(ratios[:, None] - _RBF_CENTERS) ** 2
                         / (2 * _RBF_WIDTH ** 2)).mean(axis=0)
            return np.concatenate([q, comp, geom, rbf])
        geom.append(float(ratios.min()))
        return np.concatenate([q, comp, geom])

    def with_level(self, feats: np.ndarray, level: FidelityLevel) -> np.ndarray:
        onehot = np.zeros(len(FidelityLevel))
        onehot[int(level)] = 1.0
        return np.concatenate([feats, onehot])

    def force_design(self, s: CrystalStructure,
                     q: Optional[np.ndarray] = None) -> np.ndarray:
        """d(features)/d(cartesian coords), shape (3n, F); force_mode only.

        Only the smooth pair features vary with coordinates; descriptor
        and composition channels are constant by construction here.
        """
        if not self.force_mode:
            raise RuntimeError("force_design requires force_mode feature map")
        base = self.structure_features(s, q)
        n = s.n_atoms
        nf = base.shape[0]
        design = np.zeros((3 * n, nf))
        radii = np.array([el.covalent_radius for el in s.species])
        flags = np.array([el.correlation_prone for el in s.species], dtype=float)
        pairs = _min_image_pairs(s)
        if not pairs:
            return design
        p = len(pairs)
        mean_ratio_col = 8 + 5  # after q (8) and composition stats (5)
        flagged_well_col = mean_ratio_col + 2  # after mean ratio, log volume
        well_col = flagged_well_col + 1
        rbf_col0 = well_col + 1
        for i, j, vec, d in pairs:
            rsum = radii[i] + radii[j]
            unit = vec / d
            dratio_dri = unit / rsum  # d(ratio)/d(cart_i); negated for atom j
            ratio = d / rsum

            def add(col, coeff):
                design[3 * i:3 * i + 3, col] += coeff * dratio_dri
                design[3 * j:3 * j + 3, col] -= coeff * dratio_dri

            add(mean_ratio_col, 1.0 / p)
            well = math.exp(-(ratio - _BOND_WELL_CENTER) ** 2
                            / (2 * _BOND_WELL_WIDTH ** 2))
            dwell = well * -(ratio - _BOND_WELL_CENTER) / _BOND_WELL_WIDTH ** 2 / p
            add(flagged_well_col, max(flags[i], flags[j]) * dwell)
            add(well_col, dwell)
            gauss = np.exp(-(ratio - _RBF_CENTERS) ** 2 / (2 * _RBF_WIDTH ** 2))
            dgauss = gauss * -(ratio - _RBF_CENTERS) / _RBF_WIDTH ** 2 / p
            for k in range(len(_RBF_CENTERS)):
                add(rbf_col0 + k, dgauss[k])
        return design


# ---------------------------------------------------------------------------
# Ensemble member.
# ---------------------------------------------------------------------------

class EnsembleMember:
    """Random cosine features with a chained-residual fidelity ladder.

    A base head fits the lowest rung (plentiful data); each higher rung
    gets a delta head fit on that rung's residuals against the rungs
    below, with the lower heads frozen. Predicting at level l sums the
    heads up to l, so sparse top-rung labels only need to describe the
    (smooth, small) fidelity gap. Sigma comes from held-out residuals.
    """

    def __init__(self, seed: int, n_features: int, feature_map: FeatureMap):
        self.seed = seed
        self.n_features = n_features
        self.feature_map = feature_map
        self.rng = np.random.default_rng(seed)
        self.w: Optional[np.ndarray] = None
        self.b: Optional[np.ndarray] = None
        self.heads: dict = {}  # FidelityLevel -> (theta, theta0)
        self.head_order: list = []
        self.feat_mean: Optional[np.ndarray] = None
        self.feat_scale: Optional[np.ndarray] = None
        self.sigma: float = 0.0
        self.bootstrap_indices: Optional[np.ndarray] = None
        self.loss_history: list[float] = []

    def _init_projection(self, dim: int) -> None:
        self.w = self.rng.normal(0.0, 1.0, (dim, self.n_features))
        self.b = self.rng.uniform(0.0, 2.0 * math.pi, self.n_features)

    @staticmethod
    def _with_level(struct_feats: np.ndarray, level: FidelityLevel) -> np.ndarray:
        onehot = np.zeros((struct_feats.shape[0], len(FidelityLevel)))
        onehot[:, int(level)] = 1.0
        return np.concatenate([struct_feats, onehot], axis=1)

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feat_mean) / self.feat_scale

    def _z(self, x: np.ndarray) -> np.ndarray:
        proj = self._standardize(x) @ self.w + self.b
        return math.sqrt(2.0 / self.n_features) * np.cos(proj)

    def _z_level(self, struct_feats: np.ndarray, level: FidelityLevel) -> np.ndarray:
        return self._z(self._with_level(struct_feats, level))

    def _force_design_z(self, x_full: np.ndarray, raw_rows: np.ndarray) -> np.ndarray:
        """Map feature-space force rows into z space via the chain rule."""
        proj = self._standardize(x_full) @ self.w + self.b
        sin_vec = -math.sqrt(2.0 / self.n_features) * np.sin(proj)
        return (raw_rows / self.feat_scale) @ self.w * sin_vec[None, :]

    def _fit_head(self, z: np.ndarray, y: np.ndarray, weight: float,
                  epochs: int, lr: float, lr_end: float, ridge: float,
                  init: Optional[tuple] = None,
                  g_force: Optional[np.ndarray] = None,
                  f_force: Optional[np.ndarray] = None,
                  force_weight: float = 0.0) -> tuple[np.ndarray, float]:
        theta = init[0].copy() if init is not None else np.zeros(self.n_features)
        theta0 = init[1] if init is not None else float(y.mean())
        if weight <= 0:
            # Zero task weight: the head stays at its (zero) target shift.
            return theta * 0.0, 0.0
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        m0 = v0 = 0.0
        n = max(1, y.size)
        for epoch in range(epochs):
            t = epoch / max(1, epochs - 1)
            step_lr = lr_end + 0.5 * (lr - lr_end) * (1 + math.cos(math.pi * t))
            resid = z @ theta + theta0 - y
            grad = weight * 2.0 * (z.T @ resid) / n + 2.0 * ridge * theta
            grad0 = weight * 2.0 * float(resid.sum()) / n
            loss = weight * float(np.mean(resid ** 2)) + ridge * theta @ theta
            if g_force is not None and force_weight > 0:
                fresid = g_force @ theta - f_force
                grad += force_weight * 2.0 * g_force.T @ fresid / f_force.size
                loss += force_weight * float(np.mean(fresid ** 2))
            self.loss_history.append(loss)
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            theta -= step_lr * (m / (1 - 0.9 ** (epoch + 1))) / (
                np.sqrt(v / (1 - 0.999 ** (epoch + 1))) + 1e-8)
            m0 = 0.9 * m0 + 0.1 * grad0
            v0 = 0.999 * v0 + 0.001 * grad0 * grad0
            theta0 -= step_lr * (m0 / (1 - 0.9 ** (epoch + 1))) / (
                math.sqrt(v0 / (1 - 0.999 ** (epoch + 1))) + 1e-8)
        return theta, theta0

    def fit(self, struct_feats: np.ndarray, y: np.ndarray, levels: np.ndarray,
            level_weights: dict, epochs: int, lr: float, lr_end: float,
            ridge: float, force_blocks: Optional[list] = None,
            force_weight: float = 0.0) -> None:
        present = sorted({FidelityLevel(int(l)) for l in levels})
        if self.w is None:
            x_all = self._with_level(struct_feats, present[0])
            self._init_projection(x_all.shape[1])
            self.feat_mean = x_all.mean(axis=0)
            self.feat_scale = np.where(x_all.std(axis=0) > 1e-9,
                                       x_all.std(axis=0), 1.0)
        self.head_order = present
        base = present[0]
        g_force = f_force = None
        if force_blocks and force_weight > 0:
            g_force = np.concatenate(
                [self._force_design_z(self.feature_map.with_level(xf, base), rows)
                 for xf, rows, _ in force_blocks])
            f_force = np.concatenate([tgt for _, _, tgt in force_blocks])

        # Each head sees its own level's one-hot; residual targets come
        # from evaluating the lower heads on the same structures.
        warm = self.heads if self.heads else {}
        z_by_level = {level: self._z_level(struct_feats, level)
                      for level in present}
        prediction = np.zeros_like(y)
        for depth, level in enumerate(present):
            mask = levels == int(level)
            target = y[mask] - prediction[mask]
            is_base = depth == 0
            head = self._fit_head(
                z_by_level[level][mask], target,
                weight=level_weights.get(level, 0.0),
                epochs=epochs, lr=lr, lr_end=lr_end,
                # Delta heads get a stiffer pull toward zero shift.
                ridge=ridge if is_base else max(ridge, 1e-4),
                init=warm.get(level),
                g_force=g_force if is_base else None,
                f_force=f_force if is_base else None,
                force_weight=force_weight if is_base else 0.0,
            )
            self.heads[level] = head
            prediction = prediction + z_by_level[level] @ head[0] + head[1]
        # Levels above the highest present reuse the top head sum.

    def predict_struct(self, struct_feats: np.ndarray,
                       level: FidelityLevel) -> np.ndarray:
        if not self.heads:
            raise ModelNotTrained("member has no fitted heads")
        out = np.zeros(struct_feats.shape[0])
        for head_level in self.head_order:
            if head_level > level:
                break
            theta, theta0 = self.heads[head_level]
            out = out + self._z_level(struct_feats, head_level) @ theta + theta0
        return out

    def predict_forces(self, s: CrystalStructure,
                       level: FidelityLevel,
                       q: Optional[np.ndarray] = None) -> np.ndarray:
        """Analytic -grad of the member's total energy; force_mode only."""
        feats = self.feature_map.structure_features(s, q)
        design = self.feature_map.force_design(s, q)  # (3n, F)
        design_full = np.concatenate(
            [design, np.zeros((design.shape[0], len(FidelityLevel)))], axis=1)
        de_dcart = np.zeros(design_full.shape[0])
        for head_level in self.head_order:
            if head_level > level:
                break
            x = self.feature_map.with_level(feats, head_level)
            dz_dcart = self._force_design_z(x, design_full)
            de_dcart = de_dcart + dz_dcart @ self.heads[head_level][0]
        return (-s.n_atoms * de_dcart).reshape(s.n_atoms, 3)


# ---------------------------------------------------------------------------
# The multi-fidelity model.
# ---------------------------------------------------------------------------

class MultiFidelityModel:
    def __init__(self, config: SurrogateConfig):
        self.config = config
        self.feature_map = FeatureMap(config.force_mode)
        self.members = [
            EnsembleMember(config.seed * 1000 + k, config.n_features, self.feature_map)
            for k in range(config.n_members)
        ]
        self.trained_levels: tuple[FidelityLevel, ...] = ()
        self._trained = False
        self._feat_cache: dict[str, np.ndarray] = {}

    # -- featurization ------------------------------------------------------

    def _features_for(self, example: LabeledExample) -> np.ndarray:
        sid = example.structure.id
        if sid not in self._feat_cache:
            self._feat_cache[sid] = self.feature_map.structure_features(
                example.structure, example.q)
        return self._feat_cache[sid]

    def _loss_weight(self, level: FidelityLevel) -> float:
        if self.config.loss_weights is not None:
            return float(self.config.loss_weights.get(level, 0.0))
        return level.loss_weight

    # -- training -----------------------------------------------------------

    def fit(self, examples: Sequence[LabeledExample],
            epochs: Optional[int] = None, lr: Optional[float] = None) -> "MultiFidelityModel":
        if not examples:
            raise EmptyInput("no training examples")
        levels = tuple(sorted({ex.record.fidelity for ex in examples}))
        self.trained_levels = levels
        if len(levels) < 2:
            warnings.warn(
                "single-fidelity dataset: model trains in degraded mode and "
                "divergence queries will fail", stacklevel=2)
        x = np.stack([self._features_for(ex) for ex in examples])
        y = np.array([ex.record.energy_per_atom for ex in examples])
        level_arr = np.array([int(ex.record.fidelity) for ex in examples])
        level_weights = {lvl: self._loss_weight(lvl) for lvl in levels}
        if sum(level_weights.values()) <= 0:
            raise ValueError("all loss weights are zero for the given dataset")

        epochs = epochs if epochs is not None else self.config.epochs
        lr = lr if lr is not None else self.config.lr
        rng = np.random.default_rng(self.config.seed)
        n = len(examples)
        # Hold out from the most plentiful fidelity only, so sparse
        # top-rung labels are never lost to the residual estimate.
        counts = {lvl: sum(1 for ex in examples if ex.record.fidelity == lvl)
                  for lvl in levels}
        rich = max(counts, key=lambda lvl: counts[lvl])
        rich_idx = np.array([i for i, ex in enumerate(examples)
                             if ex.record.fidelity == rich])
        n_hold = (max(1, int(round(self.config.holdout_fraction * len(rich_idx))))
                  if n >= 5 and len(rich_idx) >= 3 else 0)
        perm = rng.permutation(rich_idx)
        hold_idx = perm[:n_hold]
        others = np.array([i for i in range(n) if i not in set(hold_idx.tolist())],
                          dtype=int)
        train_idx = others if n_hold else np.arange(n)

        force_level = self._force_level(examples) if self.config.force_weight > 0 else None

        for member in self.members:
            boot = rng.choice(train_idx, size=len(train_idx), replace=True)
            member.bootstrap_indices = boot
            blocks = self._force_blocks(examples, boot, force_level)
            member.fit(x[boot], y[boot], level_arr[boot],
                       level_weights=level_weights,
                       epochs=epochs, lr=lr, lr_end=self.config.lr_end,
                       ridge=self.config.ridge,
                       force_blocks=blocks,
                       force_weight=self.config.force_weight)
            eval_idx = hold_idx if n_hold else train_idx
            resid = np.array([
                member.predict_struct(x[i:i + 1],
                                      FidelityLevel(int(level_arr[i])))[0]
                - y[i] for i in eval_idx])
            member.sigma = float(max(np.sqrt(np.mean(resid ** 2)), 1e-4))
        self._trained = True
        return self

    def _force_level(self, examples: Sequence[LabeledExample]) -> Optional[FidelityLevel]:
        # Force labels come from the highest fidelity that has them.
        with_forces = [ex.record.fidelity for ex in examples
                       if ex.record.forces is not None]
        return max(with_forces) if with_forces else None

    def _force_blocks(self, examples, boot, force_level):
        """Per-structure (x, d(features)/d(cart) * -n_atoms, force targets)."""
        if (force_level is None or not self.config.force_mode
                or self.config.force_weight <= 0):
            return None
        blocks = []
        for idx in sorted(set(int(i) for i in boot)):
            ex = examples[idx]
            if ex.record.fidelity != force_level or ex.record.forces is None:
                continue
            s = ex.structure
            design = self.feature_map.force_design(s, ex.q)
            design_full = np.concatenate(
                [design, np.zeros((design.shape[0], len(FidelityLevel)))], axis=1)
            blocks.append((self._features_for(ex), (-s.n_atoms) * design_full,
                           np.asarray(ex.record.forces).ravel()))
        return blocks or None

    def fine_tune(self, examples: Sequence[LabeledExample],
                  lr_scale: float = 0.1) -> "MultiFidelityModel":
        """Continued descent from current weights at a reduced rate."""
        if not self._trained:
            raise ModelNotTrained("cannot fine-tune before the initial fit")
        return self.fit(examples, epochs=max(40, self.config.epochs // 4),
                        lr=self.config.lr * lr_scale)

    # -- prediction -----------------------------------------------------------

    def _predict_level_members(self, s: CrystalStructure,
                               q: Optional[np.ndarray],
                               level: FidelityLevel) -> np.ndarray:
        if not self._trained:
            raise ModelNotTrained("model has not been fit")
        feats = self.feature_map.structure_features(s, q)[None, :]
        return np.array([m.predict_struct(feats, level)[0] for m in self.members])

    def predict_energy(self, s: CrystalStructure, q: Optional[np.ndarray],
                       level: FidelityLevel) -> tuple[float, float]:
        """(ensemble mean, sigma) at one fidelity conditioning."""
        es = self._predict_level_members(s, q, level)
        return aggregate_ensemble(es, [m.sigma for m in self.members])

    def predict(self, s: CrystalStructure,
                q: Optional[np.ndarray] = None,
                divergence_kind: str = "abs") -> PredictionBundle:
        if not self._trained:
            raise ModelNotTrained("model has not been fit")
        if len(self.trained_levels) < 2:
            raise DivergenceUndefined(
                "model was trained on a single fidelity; divergence is undefined")
        es_cc = self._predict_level_members(s, q, FidelityLevel.CCSDT)
        es_pbe = self._predict_level_members(s, q, FidelityLevel.PBE)
        sigmas = [m.sigma for m in self.members]
        e_mf, sigma_mf = aggregate_ensemble(es_cc, sigmas)
        e_pbe = float(es_pbe.mean())
        d = divergence_metric(e_pbe, e_mf, sigma_mf, divergence_kind)
        return PredictionBundle(
            e_mf=e_mf, sigma_mf=sigma_mf, e_pbe_pred=e_pbe, divergence=d,
            member_energies=tuple(float(e) for e in es_cc),
            member_sigmas=tuple(float(s_) for s_ in sigmas),
        )


def train(examples: Sequence[LabeledExample],
          config: Optional[SurrogateConfig] = None) -> MultiFidelityModel:
    """Fit the 5-member multi-fidelity ensemble on labeled examples."""
    model = MultiFidelityModel(config or SurrogateConfig())
    return model.fit(examples)


# ---------------------------------------------------------------------------
# Calibration.
# ---------------------------------------------------------------------------

def expected_calibration_error(predictions: Sequence[tuple[float, float, float]],
                               bins: int = 10) -> float:
    """Coverage-based ECE for Gaussian predictive intervals.

    Each (e_pred, sigma, e_true) triple yields a z-score; nominal coverage
    levels sit at the bin midpoints, and the gaps |empirical - nominal|
    are averaged with weights given by how many samples' achieved coverage
    falls in each bin.
    """
    rows = list(predictions)
    if not rows:
        raise EmptyInput("no predictions to calibrate")
    if len(rows) < bins:
        raise EmptyInput(f"need at least {bins} samples for {bins} bins")
    preds = np.array([r[0] for r in rows])
    sigmas = np.array([r[1] for r in rows])
    trues = np.array([r[2] for r in rows])
    if np.any(sigmas <= 0):
        raise ValueError("all sigmas must be positive")
    z = np.abs(preds - trues) / sigmas
    achieved = 2.0 * np.vectorize(norm_cdf)(z) - 1.0

    nominal = (np.arange(bins) + 0.5) / bins
    thresholds = np.array([norm_ppf((1.0 + p) / 2.0) for p in nominal])
    empirical = np.array([(z <= thr).mean() for thr in thresholds])

    bin_of = np.minimum((achieved * bins).astype(int), bins - 1)
    counts = np.bincount(bin_of, minlength=bins).astype(float)
    weights = counts / counts.sum()
    return float(np.sum(weights * np.abs(empirical - nominal)))


# ---------------------------------------------------------------------------
# Pipeline error-propagation diagnostic.
# ---------------------------------------------------------------------------

def error_propagation_report(sigma_ccsdt: float, sigma_dft: float,
                             sigma_mf: float, j_mf: float,
                             j_diff: float = 1.0) -> dict:
    """Final-variance decomposition through the prediction pipeline."""
    var = sigma_ccsdt ** 2 + (j_mf * sigma_dft) ** 2 + (j_diff * sigma_mf) ** 2
    return {
        "sigma_final": math.sqrt(var),
        "sigma_ccsdt": sigma_ccsdt,
        "j_mf": j_mf,
        "sigma_dft": sigma_dft,
        "j_diff": j_diff,
        "sigma_mf": sigma_mf,
    }


def estimate_label_sensitivity(examples: Sequence[LabeledExample],
                               config: SurrogateConfig,
                               probe: CrystalStructure,
                               shift: float = 0.05) -> float:
    """Numerical Jacobian of the refined energy w.r.t. a uniform shift of
    the PBE training labels."""
    base = train(examples, config).predict_energy(probe, None, FidelityLevel.CCSDT)[0]
    shifted_examples = [
        LabeledExample(ex.structure,
                       replace(ex.record,
                               energy_per_atom=ex.record.energy_per_atom + shift)
                       if ex.record.fidelity == FidelityLevel.PBE else ex.record,
                       ex.q)
        for ex in examples
    ]
    shifted = train(shifted_examples, config).predict_energy(
        probe, None, FidelityLevel.CCSDT)[0]
    return (shifted - base) / shift
