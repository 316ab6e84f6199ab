"""Command-line surface: campaigns, ablations, record ingestion, reports.

Configuration is a single INI-style file; every tuned default (diffusion
steps, conditioning strength, cluster count, hybrid weights, patience) is
a named key. Exit codes: 0 success, 1 I/O, 2 config, 3 runtime-invariant
violation.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ABLATION_VARIANTS = ("full", "no_conditioning", "pbe_only_validator",
                     "random_selection", "no_qc_no_mf", "ladder_direct")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"config field [{field}]: {message}")
        self.field = field


def _get(parser, section, key, cast, default=None, field=None):
    field = field or f"{section}.{key}"
    if not parser.has_option(section, key):
        if default is not None:
            return default
        raise ConfigError(field, "missing required key")
    raw = parser.get(section, key)
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes")
        return cast(raw)
    except Exception as err:
        raise ConfigError(field, f"cannot parse {raw!r}: {err}") from err


def _get_list(parser, section, key, default=None, field=None):
    field = field or f"{section}.{key}"
    if not parser.has_option(section, key):
        if default is not None:
            return default
        raise ConfigError(field, "missing required key")
    return [tok.strip() for tok in parser.get(section, key).split(",") if tok.strip()]


def load_campaign_config(path: Path):
    from .campaign import CampaignConfig

    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    if not parser.has_section("campaign"):
        raise ConfigError("campaign", "missing [campaign] section")
    for section in ("generator", "surrogate", "oracle"):
        if not parser.has_section(section):
            parser.add_section(section)

    kwargs = dict(
        compositions=_get_list(parser, "campaign", "compositions"),
        n_cycles_max=_get(parser, "campaign", "n_cycles_max", int, 10),
        samples_per_cycle=_get(parser, "campaign", "samples_per_cycle", int, 1000),
        stability_threshold=_get(parser, "campaign", "stability_threshold", float, 0.1),
        kmeans_k=_get(parser, "campaign", "kmeans_k", int, 50),
        weight_divergence=_get(parser, "campaign", "weight_divergence", float, 0.7),
        weight_diversity=_get(parser, "campaign", "weight_diversity", float, 0.3),
        top_k_cap=_get(parser, "campaign", "top_k_cap", int, 20),
        top_k_fraction=_get(parser, "campaign", "top_k_fraction", float, 0.1),
        stopping=_get(parser, "campaign", "stopping", str, "no_stable_patience"),
        patience=_get(parser, "campaign", "patience", int, 3),
        budget_total=_get(parser, "campaign", "budget_total", float),
        seed=_get(parser, "campaign", "seed", int, 0),
        selection=_get(parser, "campaign", "selection", str, "hybrid"),
        validator=_get(parser, "campaign", "validator", str, "multi_fidelity"),
        fidelity_ladder=tuple(_get_list(parser, "campaign", "fidelity_ladder",
                                        ["PBE", "SCAN", "HSE06", "CCSDT"])),
        conditioning_strength=_get(parser, "generator", "conditioning_strength",
                                   float, 0.3),
        diffusion_steps=_get(parser, "generator", "diffusion_steps", int, 1000),
        schedule_kind=_get(parser, "generator", "schedule_kind", str, "cosine"),
        projection_iters=_get(parser, "generator", "projection_iters", int, 50),
        generator_refresh_cycles=_get(parser, "generator",
                                      "generator_refresh_cycles", int, 5),
        seed_structures_per_comp=_get(parser, "generator",
                                      "seed_structures_per_comp", int, 6),
        denoiser_train_steps=_get(parser, "generator", "denoiser_train_steps",
                                  int, 1500),
        denoiser_refresh_steps=_get(parser, "generator", "denoiser_refresh_steps",
                                    int, 400),
        surrogate_epochs=_get(parser, "surrogate", "epochs", int, 400),
        surrogate_features=_get(parser, "surrogate", "features", int, 128),
        landscape_seed=_get(parser, "oracle", "landscape_seed", int, 0),
        landscape_gamma=_get(parser, "oracle", "landscape_gamma", float, 0.8),
        db_pbe_explore=_get(parser, "oracle", "db_pbe_explore", int, 24),
        generated_pbe_per_comp=_get(parser, "oracle", "generated_pbe_per_comp",
                                    int, 8),
    )
    try:
        config = CampaignConfig(**kwargs)
    except ValueError as err:
        raise ConfigError("campaign", str(err)) from err
    ablate = None
    if parser.has_section("ablate"):
        ablate = {
            "variants": _get_list(parser, "ablate", "variants", ["full"]),
            "seeds": [int(s) for s in _get_list(parser, "ablate", "seeds", ["1"])],
        }
    return config, ablate


def _campaign_artifacts(campaign, out_dir: Path, core_hash: str) -> None:
    from . import persist
    from .campaign import CycleStats, efficiency_score
    from .stats import MetricSample, metric_report_lines

    state = campaign.state
    persist.write_artifact(
        out_dir / "history.tsv", "history", core_hash,
        [CycleStats.HEADER] + [h.to_line() for h in state.history])

    lines = ["structure_id\tformula\tcycle\tenergy_ccsdt\tformation_energy"
             "\te_hull\tclassification\trecord"]
    from .chem import structure_to_record
    for v in state.validated:
        lines.append("\t".join([
            v.structure.id, v.structure.composition().formula(), str(v.cycle),
            repr(v.energy_ccsdt), repr(v.formation_energy), repr(v.e_hull),
            v.classification, structure_to_record(v.structure)]))
    persist.write_artifact(out_dir / "validated.tsv", "validated", core_hash, lines)

    hull_lines = ["phase_id\tformula\tformation_energy"]
    hull_lines += [p.to_line() for p in campaign.hull_state.phases]
    persist.write_artifact(out_dir / "hull_summary.tsv", "hull", core_hash, hull_lines)

    n_disc = len(state.discoveries)
    calls = state.total_ccsdt_calls
    eff = efficiency_score(state) if calls else 0.0
    metric_lines = [
        f"cycles\t{state.cycle}",
        f"stop_reason\t{state.stop_reason}",
        f"budget_total\t{campaign.budget.total!r}",
        f"budget_spent\t{campaign.budget.spent!r}",
        f"partial\t{'1' if state.stop_reason == 'budget_exhausted' else '0'}",
        f"ccsdt_calls\t{calls}",
        f"discoveries\t{n_disc}",
        f"efficiency\t{eff!r}",
    ]
    for name, count in sorted(campaign.budget.calls.items()):
        metric_lines.append(f"calls_{name}\t{count}")
    persist.write_artifact(out_dir / "metrics.tsv", "metrics", core_hash, metric_lines)

    # Plot data: hull-distance histogram and the discovery curve.
    import numpy as np
    ehs = [v.e_hull for v in state.validated]
    hist_lines = ["bin_lo\tbin_hi\tcount"]
    if ehs:
        counts, edges = np.histogram(ehs, bins=12)
        for k in range(len(counts)):
            hist_lines.append(f"{edges[k]!r}\t{edges[k + 1]!r}\t{counts[k]}")
    persist.write_artifact(out_dir / "plot_hull_hist.tsv", "plot-hull-hist",
                           core_hash, hist_lines)
    curve_lines = ["cycle\tccsdt_calls_cum\tdiscoveries_cum"]
    calls_cum = disc_cum = 0
    for h in state.history:
        calls_cum += h.ccsdt_calls
        disc_cum += h.stable_found
        curve_lines.append(f"{h.cycle}\t{calls_cum}\t{disc_cum}")
    persist.write_artifact(out_dir / "plot_discovery_curve.tsv",
                           "plot-discovery-curve", core_hash, curve_lines)


def cmd_campaign(args) -> int:
    from . import persist
    from .campaign import Campaign

    try:
        config, _ = load_campaign_config(Path(args.config))
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        config.seed = args.seed
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = persist.build_manifest(config, [config.seed])
    persist.write_manifest(out_dir / "manifest.json", manifest)
    core_hash = manifest["core_hash"]

    try:
        if args.resume:
            payload = persist.load_checkpoint(Path(args.resume))
            campaign = persist.restore_campaign(payload)
        else:
            campaign = Campaign(config)
            campaign.initialize()
        while True:
            from .campaign import check_stopping
            stop, reason = check_stopping(campaign.state, campaign.config,
                                          campaign.budget)
            if stop:
                campaign.state.stop_reason = reason
                break
            campaign.run_cycle()
            persist.save_checkpoint(out_dir / "checkpoint.json", campaign, core_hash)
    except Exception as err:
        print(f"error: campaign failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME

    persist.save_checkpoint(out_dir / "checkpoint.json", campaign, core_hash)
    _campaign_artifacts(campaign, out_dir, core_hash)
    n = len(campaign.state.discoveries)
    print(f"campaign done: {campaign.state.cycle} cycles, {n} discoveries, "
          f"stop={campaign.state.stop_reason}, artifacts in {out_dir}")
    return EXIT_OK


VARIANT_OVERRIDES = {
    "full": {},
    "no_conditioning": {"conditioning_strength": 0.0},
    "pbe_only_validator": {"validator": "pbe_only"},
    "random_selection": {"selection": "random"},
    "no_qc_no_mf": {"conditioning_strength": 0.0, "validator": "pbe_only"},
    "ladder_direct": {"fidelity_ladder": ("PBE", "CCSDT")},
}


def run_ablation(config, variants: list[str], seeds: list[int]) -> dict:
    """Run each variant on shared seeds; returns efficiency samples."""
    import dataclasses

    from .campaign import Campaign, efficiency_score

    results: dict[str, list[float]] = {}
    for variant in variants:
        overrides = VARIANT_OVERRIDES[variant]
        effs = []
        for seed in seeds:
            vconf = dataclasses.replace(config, seed=seed, **overrides)
            campaign = Campaign(vconf)
            state = campaign.run()
            effs.append(efficiency_score(state) if state.total_ccsdt_calls else 0.0)
        results[variant] = effs
    return results


def ablation_report_lines(results: dict, seeds: list[int]) -> list[str]:
    import numpy as np

    from .stats import bootstrap_ci, multiple_comparison_adjust, welch_t_test

    lines = ["variant\tmean_efficiency\tci_lo\tci_hi\tp_vs_full\tp_adj\tvalues"]
    names = list(results)
    pvals = {}
    for name in names:
        if name == "full" or "full" not in results:
            continue
        a, b = results["full"], results[name]
        try:
            _, _, p = welch_t_test(a, b, tail="one")
        except Exception:
            p = 1.0
        pvals[name] = p
    adjusted = {}
    if pvals:
        adj = multiple_comparison_adjust(list(pvals.values()), "benjamini_hochberg")
        adjusted = dict(zip(pvals, adj))
    for name in names:
        vals = results[name]
        if len(vals) >= 2:
            lo, hi = bootstrap_ci(vals)
        else:
            lo = hi = vals[0]
        p = pvals.get(name, "")
        pa = adjusted.get(name, "")
        joined = ",".join(repr(v) for v in vals)
        lines.append(f"{name}\t{np.mean(vals)!r}\t{lo!r}\t{hi!r}"
                     f"\t{p!r}\t{pa!r}\t{joined}")
    return lines


def cmd_ablate(args) -> int:
    from . import persist

    try:
        config, ablate = load_campaign_config(Path(args.config))
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if ablate is None:
        print("error: config field [ablate]: missing [ablate] section",
              file=sys.stderr)
        return EXIT_CONFIG
    unknown = [v for v in ablate["variants"] if v not in ABLATION_VARIANTS]
    if unknown:
        print(f"error: config field [ablate.variants]: unknown variants {unknown}; "
              f"known: {list(ABLATION_VARIANTS)}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = persist.build_manifest(config, ablate["seeds"])
    persist.write_manifest(out_dir / "manifest.json", manifest)

    try:
        results = run_ablation(config, ablate["variants"], ablate["seeds"])
    except Exception as err:
        print(f"error: ablation failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    lines = ablation_report_lines(results, ablate["seeds"])
    persist.write_artifact(out_dir / "ablation.tsv", "ablation",
                           manifest["core_hash"], lines)
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .oracles import ingest_and_deduplicate

    path = Path(args.records)
    if not path.exists():
        print(f"error: records file not found: {path}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with path.open() as fh:
        curated, rejections, stats = ingest_and_deduplicate(fh)
    header = ("entry_id\tformula\ta\tb\tc\tenergy_per_atom\texperimental"
              "\tprovenance")
    (out_dir / "curated.tsv").write_text(
        "\n".join([header] + [c.to_line() for c in curated]) + "\n")
    (out_dir / "rejections.log").write_text(
        "\n".join(f"line {n}: {reason}" for n, reason in rejections) + "\n")
    for key in sorted(stats):
        print(f"{key}\t{stats[key]}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import persist
    from .chem import FidelityLevel

    path = Path(args.state)
    if not path.exists():
        print(f"error: checkpoint not found: {path}", file=sys.stderr)
        return EXIT_IO
    try:
        payload = persist.load_checkpoint(path)
    except persist.CorruptCheckpoint as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    manifest_path = path.parent / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if payload.get("core_hash") != manifest.get("core_hash"):
            print(f"error: checkpoint core {payload.get('core_hash')} does not "
                  f"match manifest core {manifest.get('core_hash')}",
                  file=sys.stderr)
            return EXIT_IO

    st = payload["state"]
    budget = payload["budget"]
    validated = st["validated"]
    discoveries = [v for v in validated
                   if v["classification"] in ("stable", "metastable")]
    calls = budget["calls"]
    print(f"cycles run:        {st['cycle']}")
    print(f"stop reason:       {st['stop_reason']}")
    print(f"budget:            {budget['spent']:.1f} / {budget['total']:.1f} CPU-h")
    print(f"validated:         {len(validated)}")
    print(f"discoveries:       {len(discoveries)}")
    if calls.get("CCSDT"):
        print(f"efficiency score:  {len(discoveries) / calls['CCSDT']:.3f}")
    print("cost breakdown:")
    total = 0.0
    for name in sorted(calls):
        cost = FidelityLevel[name].oracle_cost * calls[name]
        total += cost
        print(f"  {name:8s} {calls[name]:6d} calls  {cost:10.1f} CPU-h")
    print(f"  {'total':8s} {'':6s}        {total:10.1f} CPU-h")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import bench

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = bench.run_hull_scaling()
    report = bench.hull_scaling_report_lines(lines)
    (out_dir / "bench_hull.tsv").write_text("\n".join(report) + "\n")
    for line in report:
        print(line)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfscreen",
        description="divergence-driven multi-fidelity crystal screening")
    parser.add_argument("--workers", type=int, default=1,
                        help="bound the numeric thread pool for this process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("campaign", help="run an active-learning campaign")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("ablate", help="run ablation variants on shared seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ingest", help="ingest and deduplicate raw records")
    p.add_argument("--records", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("report", help="summarize a campaign checkpoint")
    p.add_argument("--state", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="hull scaling and cache benchmarks")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    if args.workers and args.workers > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.workers))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
