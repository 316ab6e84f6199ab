"""Diagnostic: pool composition, divergence separation, and hit
probabilities for one campaign setup. Development aid for tuning the
reference landscape configuration."""

import argparse
import warnings

import numpy as np

from mfscreen import constraints
from mfscreen.campaign import Campaign, CampaignConfig
from mfscreen.chem import FidelityLevel
from mfscreen.descriptors import compute_descriptors, composition_descriptors
from mfscreen.generator import ConditioningContext, sample as dsample
from mfscreen.hull import PhaseEntry


def reference_config(seed: int, selection: str = "hybrid") -> CampaignConfig:
    return CampaignConfig(
        compositions=['SiC', 'BP', 'GaAs', 'AlP', 'MgS', 'NaCl', 'KCl',
                      'CaO', 'MgO', 'LiF', 'NaF', 'FeO', 'CuO', 'NiO'],
        n_cycles_max=4, samples_per_cycle=84,
        stability_threshold=0.6,
        budget_total=4000.0, diffusion_steps=40,
        denoiser_train_steps=1000, denoiser_refresh_steps=300,
        surrogate_epochs=700, surrogate_features=224,
        seed_structures_per_comp=6, db_pbe_explore=14, generated_pbe_per_comp=6,
        projection_iters=10, kmeans_k=12, seed=seed, selection=selection,
    )


def diagnose(seed: int) -> None:
    config = reference_config(seed)
    camp = Campaign(config)
    camp.initialize()
    rng = camp._rng(100, 1)
    rows = []
    for comp in camp.compositions:
        flagged = any(el.correlation_prone for el in comp.elements)
        ctx = ConditioningContext(
            q=composition_descriptors(comp).as_array(), strength=0.3)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            batch = dsample(6, comp, ctx, camp.denoiser, camp.schedule, rng,
                            id_prefix=f'dbg-{comp.formula()}',
                            projection_iters=10)
        feas = [s for s in batch.structures
                if constraints.validate(s, 'generation').overall_pass]
        probe = PhaseEntry(comp, 0.0, 'probe')
        offset = -camp.hull_state.energy_above_hull(probe).e_hull
        for s in feas:
            q = compute_descriptors(s).as_array()
            e_mf, sig, e_pbe, div = camp._predict(s, q)
            ehp = camp.formation_energy(comp, e_mf) - offset
            tc = camp.landscape.energy_and_forces(s, FidelityLevel.CCSDT)[0]
            teh = camp.formation_energy(comp, tc) - offset
            rows.append(dict(comp=comp.formula(), flagged=flagged, div=div,
                             ehp=ehp, teh=teh, err=e_mf - tc))
    fl = [r for r in rows if r['flagged']]
    un = [r for r in rows if not r['flagged']]
    pool = [r for r in rows if r['ehp'] < config.stability_threshold]
    pf = [r for r in pool if r['flagged']]
    pu = [r for r in pool if not r['flagged']]
    hitf = [r for r in pf if r['teh'] <= 0.05]
    hitu = [r for r in pu if r['teh'] <= 0.05]
    print(f'seed {seed}:')
    print(f'  flagged rows {len(fl)} err mean {np.mean([r["err"] for r in fl]):+.2f} '
          f'D mean {np.mean([r["div"] for r in fl]):.2f}')
    print(f'  unflag rows {len(un)} err mean {np.mean([r["err"] for r in un]):+.2f} '
          f'D mean {np.mean([r["div"] for r in un]):.2f}')
    print(f'  pool: {len(pool)} = flagged {len(pf)} (hits {len(hitf)}) '
          f'+ unflagged {len(pu)} (hits {len(hitu)})')
    teh_f = [r['teh'] for r in fl]
    print(f'  flagged true e_hull: mean {np.mean(teh_f):+.2f} min {np.min(teh_f):+.2f} '
          f'hits_all {sum(1 for t in teh_f if t <= 0.05)}/{len(teh_f)}')
    if pool:
        order = sorted(pool, key=lambda r: -r['div'])
        top = order[:6]
        print(f'  D-top6: {[(r["comp"], round(r["div"],2), round(r["teh"],2)) for r in top]}')


if __name__ == '__main__':
    ap = argparse.ArgumentParser()
    ap.add_argument('--seeds', type=int, nargs='+', default=[1, 2, 3])
    args = ap.parse_args()
    for seed in args.seeds:
        diagnose(seed)
