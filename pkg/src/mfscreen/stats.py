"""Statistical evaluation toolkit: screening metrics, bootstrap CIs,
Welch tests, multiple-comparison corrections, effect sizes, and power.

Distribution functions are implemented in-repo (erf-based normal CDF and
a continued-fraction incomplete beta for the t CDF) so results do not
depend on an external stats stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import constraints
from .chem import CrystalStructure, reduce_composition


class Undefined(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class DegenerateTest(ValueError):
    pass


class InvalidPValue(ValueError):
    pass


class InvalidParameters(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class MetricSample:
    name: str
    values: tuple[float, ...]
    units: str = ""

    def __post_init__(self):
        if not self.values or not all(math.isfinite(v) for v in self.values):
            raise ValueError(f"metric {self.name!r} needs nonempty finite values")


# ---------------------------------------------------------------------------
# Distribution functions.
# ---------------------------------------------------------------------------

def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_ppf(p: float) -> float:
    """Inverse standard normal CDF (bisection start, Newton polish)."""
    if not 0.0 < p < 1.0:
        raise InvalidParameters(f"quantile probability must be in (0,1), got {p}")
    lo, hi = -40.0, 40.0
    x = 0.0
    for _ in range(80):
        x = 0.5 * (lo + hi)
        if norm_cdf(x) < p:
            lo = x
        else:
            hi = x
    for _ in range(4):
        err = norm_cdf(x) - p
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf <= 0:
            break
        x -= err / pdf
    return x


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz's continued fraction for the incomplete beta function.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(x: float, dof: float) -> float:
    if dof <= 0:
        raise InvalidParameters(f"dof must be positive, got {dof}")
    ib = _reg_inc_beta(dof / 2.0, 0.5, dof / (dof + x * x))
    return 1.0 - 0.5 * ib if x >= 0 else 0.5 * ib


# ---------------------------------------------------------------------------
# Screening metrics.
# ---------------------------------------------------------------------------

def hit_rate(proposals: Sequence[str], validated_stable: set, top_n: int) -> float:
    """Percent of the top-n ranked proposals that validated stable."""
    if not proposals:
        raise Undefined("hit rate of an empty proposal list")
    if top_n > len(proposals) or top_n < 1:
        raise InvalidParameters(f"top_n={top_n} out of range for {len(proposals)} proposals")
    hits = sum(1 for pid in proposals[:top_n] if pid in validated_stable)
    return 100.0 * hits / top_n


LATTICE_MATCH_RTOL = 0.01
COORD_MATCH_TOL = 0.05  # fractional, under translation


def _coords_match_under_translation(a: CrystalStructure, b: CrystalStructure) -> bool:
    if a.n_atoms != b.n_atoms:
        return False
    sym_a = [el.symbol for el in a.species]
    sym_b = [el.symbol for el in b.species]
    anchors = [j for j, sym in enumerate(sym_b) if sym == sym_a[0]]
    for anchor in anchors:
        shift = b.frac_coords[anchor] - a.frac_coords[0]
        used: set[int] = set()
        ok = True
        for i in range(a.n_atoms):
            target = a.frac_coords[i] + shift
            best_j, best_d = -1, math.inf
            for j in range(b.n_atoms):
                if j in used or sym_b[j] != sym_a[i]:
                    continue
                delta = b.frac_coords[j] - target
                delta -= np.round(delta)
                d = float(np.linalg.norm(delta))
                if d < best_d:
                    best_j, best_d = j, d
            if best_j < 0 or best_d > COORD_MATCH_TOL:
                ok = False
                break
            used.add(best_j)
        if ok:
            return True
    return False


def structures_match(a: CrystalStructure, b: CrystalStructure) -> bool:
    """Identity under the documented tolerance: same reduced composition,
    lattice parameters within 1%, coordinates within 0.05 fractional under
    a rigid translation."""
    ca = reduce_composition(a.composition())
    cb = reduce_composition(b.composition())
    if ca.formula() != cb.formula():
        return False
    pa = a.lattice_parameters()
    pb = b.lattice_parameters()
    for va, vb in zip(pa, pb):
        if abs(va - vb) > LATTICE_MATCH_RTOL * max(abs(va), abs(vb), 1e-9):
            return False
    return _coords_match_under_translation(a, b)


def validity_uniqueness_novelty(generated: Sequence[CrystalStructure],
                                training_set: Sequence[CrystalStructure],
                                ) -> tuple[float, float, float]:
    """(validity %, uniqueness %, novelty %) for a generated batch."""
    if not generated:
        raise EmptyInput("no generated structures")
    n = len(generated)
    n_valid = sum(1 for s in generated
                  if constraints.validate(s, "validation").overall_pass)

    distinct: list[CrystalStructure] = []
    for s in generated:
        if not any(structures_match(s, u) for u in distinct):
            distinct.append(s)
    uniqueness = 100.0 * len(distinct) / n

    novel = sum(1 for s in distinct
                if not any(structures_match(s, t) for t in training_set))
    novelty = 100.0 * novel / len(distinct)
    return 100.0 * n_valid / n, uniqueness, novelty


# ---------------------------------------------------------------------------
# Inference.
# ---------------------------------------------------------------------------

def bootstrap_ci(values: Sequence[float], resamples: int = 1000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    vals = np.asarray(values, dtype=float)
    if vals.size < 2:
        raise InsufficientData("bootstrap needs at least 2 values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(resamples, vals.size))
    means = vals[idx].mean(axis=1)
    lo = float(np.quantile(means, (1.0 - level) / 2.0))
    hi = float(np.quantile(means, 1.0 - (1.0 - level) / 2.0))
    return lo, hi


def welch_t_test(a: Sequence[float], b: Sequence[float],
                 tail: str = "two") -> tuple[float, float, float]:
    """Welch's unequal-variance t test; returns (t, dof, p).

    One-tailed p tests mean(a) > mean(b).
    """
    if tail not in ("one", "two"):
        raise InvalidParameters(f"tail must be 'one' or 'two', got {tail!r}")
    xa = np.asarray(a, dtype=float)
    xb = np.asarray(b, dtype=float)
    if xa.size < 2 or xb.size < 2:
        raise InsufficientData("both samples need at least 2 values")
    va = xa.var(ddof=1) / xa.size
    vb = xb.var(ddof=1) / xb.size
    if va + vb == 0:
        raise DegenerateTest("both samples have zero variance")
    t = float((xa.mean() - xb.mean()) / math.sqrt(va + vb))
    dof = float((va + vb) ** 2 / (
        va ** 2 / (xa.size - 1) + vb ** 2 / (xb.size - 1)))
    if tail == "one":
        p = 1.0 - t_cdf(t, dof)
    else:
        p = 2.0 * (1.0 - t_cdf(abs(t), dof))
    return t, dof, min(1.0, max(0.0, p))


def multiple_comparison_adjust(pvalues: Sequence[float],
                               method: str = "benjamini_hochberg") -> list[float]:
    """Adjusted p-values: step-up FDR control or Bonferroni."""
    ps = list(pvalues)
    if any(not 0.0 <= p <= 1.0 for p in ps):
        raise InvalidPValue(f"p-values must lie in [0, 1]: {ps}")
    m = len(ps)
    if method == "bonferroni":
        return [min(1.0, m * p) for p in ps]
    if method != "benjamini_hochberg":
        raise InvalidParameters(f"unknown method {method!r}")
    order = sorted(range(m), key=lambda i: ps[i])
    adjusted = [0.0] * m
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, m * ps[i] / rank)
        adjusted[i] = min(1.0, running)
    return adjusted


def power_sample_size(sigma: float, delta: float, alpha: float = 0.05,
                      power: float = 0.9) -> int:
    """Per-group n for a two-sample comparison, ceiling-rounded."""
    if sigma <= 0 or delta <= 0:
        raise InvalidParameters("sigma and delta must be positive")
    if not (0 < alpha < 1 and 0 < power < 1):
        raise InvalidParameters("alpha and power must lie in (0, 1)")
    z_alpha = norm_ppf(1.0 - alpha / 2.0)
    z_power = norm_ppf(power)
    n = 2.0 * ((z_alpha + z_power) * sigma / delta) ** 2
    return int(math.ceil(n - 1e-12))


def effect_sizes_and_cv(a: Sequence[float], b: Sequence[float]
                        ) -> tuple[float, float, float, float]:
    """(Cohen's d pooled, Glass's delta with b as control, CV_a %, CV_b %)."""
    xa = np.asarray(a, dtype=float)
    xb = np.asarray(b, dtype=float)
    if xa.size < 2 or xb.size < 2:
        raise InsufficientData("both samples need at least 2 values")
    sa = xa.std(ddof=1)
    sb = xb.std(ddof=1)
    pooled = math.sqrt(((xa.size - 1) * sa ** 2 + (xb.size - 1) * sb ** 2)
                       / (xa.size + xb.size - 2))
    diff = xa.mean() - xb.mean()
    d = diff / pooled if pooled > 0 else 0.0
    glass = diff / sb if sb > 0 else 0.0
    if xa.mean() == 0 or xb.mean() == 0:
        raise Undefined("CV undefined for zero mean")
    cv_a = 100.0 * sa / abs(xa.mean())
    cv_b = 100.0 * sb / abs(xb.mean())
    return float(d), float(glass), float(cv_a), float(cv_b)


def metric_report_lines(samples: Iterable[MetricSample], seed: int = 0) -> list[str]:
    """Delimited metric report: metric, mean, CI bounds, per-seed values."""
    lines = ["metric\tmean\tci_lo\tci_hi\tvalues"]
    for sample in samples:
        vals = np.asarray(sample.values)
        if vals.size >= 2:
            lo, hi = bootstrap_ci(sample.values, seed=seed)
        else:
            lo = hi = float(vals[0])
        joined = ",".join(repr(float(v)) for v in sample.values)
        lines.append(f"{sample.name}\t{vals.mean()!r}\t{lo!r}\t{hi!r}\t{joined}")
    return lines
