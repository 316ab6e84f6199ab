"""Run manifests, campaign checkpoints, and versioned artifact files.

Every artifact is a delimited text file carrying a magic header with a
schema tag and the manifest core hash, so reports can refuse mismatched
state/artifact pairs. The core hash covers config, seeds, and data-file
versions but not wall-clock timestamps, which keeps fixed-seed artifact
bytes reproducible across runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .chem import FidelityLevel, structure_from_record, structure_to_record
from .elements import ELEMENT_TABLE_HASH
from .campaign import (
    Campaign,
    CampaignConfig,
    CampaignState,
    CycleStats,
    ValidatedCandidate,
)
from .constraints import BVS_TABLE_VERSION
from .descriptors import SCALING_VERSION
from .hull import HullState, PhaseEntry
from .oracles import OracleBudget, SyntheticLandscape
from .surrogate import LabeledExample
from .chem import EnergyRecord

MAGIC = "mfscreen"
CHECKPOINT_SCHEMA = "campaign-checkpoint/1"


class CorruptCheckpoint(ValueError):
    pass


class ManifestMismatch(ValueError):
    pass


def code_version_hash() -> str:
    """Hash over the package's source files, for the manifest."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.glob("*.py")) + sorted((root / "data").glob("*.tsv")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def build_manifest(config: CampaignConfig, seeds: list[int]) -> dict:
    core = {
        "config": dataclasses.asdict(config),
        "seeds": list(seeds),
        "code_version": code_version_hash(),
        "data_versions": {
            "elements": ELEMENT_TABLE_HASH[:16],
            "bvs": BVS_TABLE_VERSION,
            "descriptor_scaling": SCALING_VERSION,
        },
    }
    core_hash = hashlib.sha256(
        json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]
    manifest = dict(core)
    manifest["core_hash"] = core_hash
    manifest["created_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return manifest


def write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def artifact_header(kind: str, core_hash: str) -> str:
    return f"# {MAGIC}/{kind}/1 core={core_hash}"


def write_artifact(path: Path, kind: str, core_hash: str,
                   lines: list[str]) -> None:
    body = "\n".join([artifact_header(kind, core_hash)] + lines)
    path.write_text(body + "\n")


def read_artifact(path: Path, expected_core: Optional[str] = None) -> list[str]:
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(f"# {MAGIC}/"):
        raise CorruptCheckpoint(f"{path} lacks the artifact magic header")
    if expected_core is not None:
        tag = lines[0].rsplit("core=", 1)[-1]
        if tag != expected_core:
            raise ManifestMismatch(
                f"{path} was written under core {tag}, expected {expected_core}")
    return lines[1:]


# ---------------------------------------------------------------------------
# Campaign checkpointing.
# ---------------------------------------------------------------------------

def _record_to_dict(rec: EnergyRecord) -> dict:
    return {
        "structure_id": rec.structure_id,
        "fidelity": rec.fidelity.name,
        "energy_per_atom": rec.energy_per_atom,
        "forces": None if rec.forces is None else
                  [float(x) for x in np.asarray(rec.forces).ravel()],
        "provenance": rec.provenance,
    }


def _record_from_dict(d: dict) -> EnergyRecord:
    forces = d["forces"]
    return EnergyRecord(
        structure_id=d["structure_id"],
        fidelity=FidelityLevel[d["fidelity"]],
        energy_per_atom=d["energy_per_atom"],
        forces=None if forces is None else np.array(forces).reshape(-1, 3),
        provenance=d["provenance"],
    )


def checkpoint_dict(campaign: Campaign) -> dict:
    state = campaign.state
    return {
        "schema": CHECKPOINT_SCHEMA,
        "config": dataclasses.asdict(campaign.config),
        "budget": {
            "total": campaign.budget.total,
            "spent": campaign.budget.spent,
            "calls": dict(campaign.budget.calls),
        },
        "element_refs": campaign.element_refs,
        "element_refs_pbe": campaign.element_refs_pbe,
        "hull_phases": [p.to_line() for p in campaign.hull_state.phases],
        "hull_elements": list(campaign.hull_state.elements),
        "state": {
            "cycle": state.cycle,
            "consecutive_no_stable": state.consecutive_no_stable,
            "stop_reason": state.stop_reason,
            "history": [dataclasses.asdict(h) for h in state.history],
            "validated": [{
                "structure": structure_to_record(v.structure),
                "energy_ccsdt": v.energy_ccsdt,
                "formation_energy": v.formation_energy,
                "e_hull": v.e_hull,
                "classification": v.classification,
                "cycle": v.cycle,
            } for v in state.validated],
        },
        "seed_structures": [structure_to_record(s) for s in campaign.seed_structures],
        "examples": [{
            "structure": structure_to_record(ex.structure),
            "record": _record_to_dict(ex.record),
            "q": None if ex.q is None else [float(x) for x in ex.q],
        } for ex in campaign._base_examples],
    }


def save_checkpoint(path: Path, campaign: Campaign, core_hash: str) -> None:
    payload = checkpoint_dict(campaign)
    payload["core_hash"] = core_hash
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path: Path) -> dict:
    try:
        payload = json.loads(path.read_text())
    except Exception as err:
        raise CorruptCheckpoint(f"unreadable checkpoint {path}: {err}") from err
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise CorruptCheckpoint(
            f"checkpoint schema {payload.get('schema')!r} does not match "
            f"{CHECKPOINT_SCHEMA!r}")
    return payload


def restore_campaign(payload: dict,
                     landscape: Optional[SyntheticLandscape] = None) -> Campaign:
    """Rebuild a campaign from a checkpoint, retraining the models from
    the stored examples (training is deterministic given the config)."""
    config = CampaignConfig(**payload["config"])
    campaign = Campaign(config, landscape)
    campaign.budget = OracleBudget(
        total=payload["budget"]["total"],
        spent=payload["budget"]["spent"],
        calls=dict(payload["budget"]["calls"]),
    )
    campaign.element_refs = dict(payload["element_refs"])
    campaign.element_refs_pbe = dict(payload["element_refs_pbe"])
    campaign.hull_state = HullState(
        payload["hull_elements"],
        [PhaseEntry.from_line(line) for line in payload["hull_phases"]])
    campaign.seed_structures = [structure_from_record(r)
                                for r in payload["seed_structures"]]
    campaign._base_examples = [
        LabeledExample(
            structure_from_record(ex["structure"]),
            _record_from_dict(ex["record"]),
            None if ex["q"] is None else np.array(ex["q"]),
        ) for ex in payload["examples"]]
    campaign.hf_examples = [ex for ex in campaign._base_examples
                            if ex.record.fidelity == FidelityLevel.CCSDT]

    st = payload["state"]
    state = CampaignState(
        cycle=st["cycle"],
        consecutive_no_stable=st["consecutive_no_stable"],
        stop_reason=st["stop_reason"],
        history=[CycleStats(**h) for h in st["history"]],
        validated=[ValidatedCandidate(
            structure=structure_from_record(v["structure"]),
            energy_ccsdt=v["energy_ccsdt"],
            formation_energy=v["formation_energy"],
            e_hull=v["e_hull"],
            classification=v["classification"],
            cycle=v["cycle"],
        ) for v in st["validated"]],
    )
    campaign.state = state

    from .generator import train_reference_denoiser
    campaign.denoiser = train_reference_denoiser(
        campaign.seed_structures, campaign.schedule, campaign._rng(2),
        n_steps=config.denoiser_train_steps)
    campaign.surrogate = campaign._train_surrogate(campaign._base_examples)
    campaign._initialized = True
    return campaign
