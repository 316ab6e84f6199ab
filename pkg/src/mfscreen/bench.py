"""Performance harness: hull scaling, incremental-vs-rebuild, cache hits,
and the campaign phase profile.

Absolute timings are environment-specific and only reported; the asserted
quantities are complexity-class slopes and relative speedups. Benchmarks
observe, they never change numerical results.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .hull import HullCache, HullState, LowerHull2D, PhaseEntry
from .chem import Composition


@dataclass
class BenchCase:
    name: str
    sizes: tuple[int, ...]
    repetitions: int = 5
    warmup: int = 1
    medians: list = field(default_factory=list)
    p95s: list = field(default_factory=list)


MIN_TIMED_SECONDS = 5e-3  # inflate repetitions below the timer floor


def time_callable(fn: Callable[[], object], repetitions: int = 5,
                  warmup: int = 1) -> tuple[float, float]:
    """(median, p95) seconds; auto-batches when a call is too fast to time."""
    for _ in range(warmup):
        fn()
    batch = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(batch):
            fn()
        if time.perf_counter() - t0 >= MIN_TIMED_SECONDS:
            break
        batch *= 4
        if batch > 4096:
            break
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(batch):
            fn()
        samples.append((time.perf_counter() - t0) / batch)
    return float(np.median(samples)), float(np.quantile(samples, 0.95))


def _random_points(m: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    pts = rng.random((m, 2))
    return [(float(x), float(y)) for x, y in pts]


@dataclass
class HullScalingResult:
    sizes: tuple[int, ...]
    build_medians: list
    slope: float
    incremental_median: float
    rebuild_median: float
    cache_cold_median: float
    cache_hit_median: float

    @property
    def incremental_speedup(self) -> float:
        return self.rebuild_median / self.incremental_median

    @property
    def cache_speedup(self) -> float:
        return self.cache_cold_median / self.cache_hit_median


def run_hull_scaling(sizes: Sequence[int] = (100, 300, 1000, 3000, 10000),
                     seed: int = 0) -> HullScalingResult:
    """Log-log slope of 2-D lower-hull construction plus the incremental
    and cache comparisons at m = 1000."""
    rng = np.random.default_rng(seed)
    medians = []
    for m in sizes:
        pts = _random_points(m, rng)
        med, _ = time_callable(lambda: LowerHull2D(pts), repetitions=5)
        medians.append(med)
    logs = np.log(np.array(sizes, dtype=float))
    logt = np.log(np.array(medians))
    slope = float(np.polyfit(logs, logt, 1)[0])

    pts = _random_points(1000, rng)
    chain = LowerHull2D(pts)
    probes = _random_points(64, rng)
    probe_iter = iter(range(10 ** 9))

    def incremental():
        p = probes[next(probe_iter) % len(probes)]
        chain.insert(*p)

    inc_med, _ = time_callable(incremental, repetitions=5)

    def rebuild():
        p = probes[next(probe_iter) % len(probes)]
        LowerHull2D(pts + [p])

    reb_med, _ = time_callable(rebuild, repetitions=5)

    # Subsystem cache: a cold lookup builds the state, a hit returns it.
    phases = _synthetic_binary_phases(400, rng)
    elements = ("Cl", "Na")

    def cold():
        HullCache().lookup(elements, phases)

    cold_med, _ = time_callable(cold, repetitions=5)
    cache = HullCache()
    cache.lookup(elements, phases)

    def hit():
        cache.lookup(elements, phases)

    hit_med, _ = time_callable(hit, repetitions=5)

    return HullScalingResult(tuple(sizes), medians, slope,
                             inc_med, reb_med, cold_med, hit_med)


def _synthetic_binary_phases(m: int, rng: np.random.Generator) -> list[PhaseEntry]:
    phases = [
        PhaseEntry(Composition.parse("Na"), 0.0, "ref-Na"),
        PhaseEntry(Composition.parse("Cl"), 0.0, "ref-Cl"),
    ]
    for k in range(m - 2):
        a = int(rng.integers(1, 9))
        b = int(rng.integers(1, 9))
        phases.append(PhaseEntry(
            Composition.from_symbols({"Na": a, "Cl": b}),
            float(rng.normal(-0.5, 0.4)), f"p{k:05d}"))
    return phases


def hull_scaling_report_lines(result: HullScalingResult) -> list[str]:
    lines = [f"# host={platform.node()} machine={platform.machine()}",
             "quantity\tvalue"]
    for m, med in zip(result.sizes, result.build_medians):
        lines.append(f"build_median_s[m={m}]\t{med:.3e}")
    lines.append(f"loglog_slope\t{result.slope:.3f}")
    lines.append(f"incremental_median_s\t{result.incremental_median:.3e}")
    lines.append(f"rebuild_median_s\t{result.rebuild_median:.3e}")
    lines.append(f"incremental_speedup\t{result.incremental_speedup:.1f}")
    lines.append(f"cache_cold_median_s\t{result.cache_cold_median:.3e}")
    lines.append(f"cache_hit_median_s\t{result.cache_hit_median:.3e}")
    lines.append(f"cache_speedup\t{result.cache_speedup:.1f}")
    return lines


def run_pipeline_profile(config=None) -> tuple[list[str], dict]:
    """Wall time per campaign phase plus an oracle-call cross-check.

    Returns (report lines, totals); the ledger's call counts must equal
    the history's, which the caller can assert as a conservation check.
    """
    from .campaign import Campaign, CampaignConfig

    if config is None:
        config = CampaignConfig(
            compositions=["NaCl", "MgO", "FeO"],
            n_cycles_max=2, samples_per_cycle=24,
            stability_threshold=1.2, budget_total=1200.0,
            diffusion_steps=30, denoiser_train_steps=400,
            denoiser_refresh_steps=150, surrogate_epochs=200,
            surrogate_features=96, seed_structures_per_comp=4,
            db_pbe_explore=6, generated_pbe_per_comp=4,
            projection_iters=8, kmeans_k=8, seed=0,
        )
    campaign = Campaign(config)
    state = campaign.run()
    total = sum(campaign.phase_times.values())
    lines = ["phase\tseconds\tpercent"]
    for phase in ("generation", "constraints", "prediction", "selection",
                  "validation", "retraining"):
        secs = campaign.phase_times.get(phase, 0.0)
        pct = 100.0 * secs / total if total > 0 else 0.0
        lines.append(f"{phase}\t{secs:.3f}\t{pct:.1f}")
    ledger_calls = campaign.budget.calls.get("CCSDT", 0)
    history_calls = state.total_ccsdt_calls
    totals = {
        "ledger_ccsdt_calls": ledger_calls,
        "history_ccsdt_calls": history_calls,
        "total_seconds": total,
        "phase_times": dict(campaign.phase_times),
    }
    lines.append(f"ccsdt_calls_ledger\t{ledger_calls}\t")
    lines.append(f"ccsdt_calls_history\t{history_calls}\t")
    return lines, totals
