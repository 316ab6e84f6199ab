"""Fast structure descriptors used to condition generation and featurize
the surrogate: an 8-vector of electronic-structure stand-ins built from
geometry and composition statistics.

These are deterministic, permutation-invariant summary statistics, cheap
enough to evaluate at every denoising step. They are NOT physical DOS /
localization / response quantities; they only preserve the interface so a
real electronic-structure model can be dropped in later. Standardization
constants are frozen in a versioned data file so conditioning cannot
drift as datasets grow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._data import read_data_text
from .chem import (
    Composition,
    CrystalStructure,
    EmptyComposition,
    _images_for_metric,
)

SCALING_VERSION = "v1"

# Neighbors for descriptor purposes: within 1.25x the atom's own nearest
# neighbor distance. Scale-free, so uniform rescaling of the cell leaves
# the coordination statistics unchanged.
NEIGHBOR_SHELL_SCALE = 1.25

DESCRIPTOR_NAMES = (
    "dos_mean", "dos_std", "dos_skew", "dos_kurt",
    "elf_mean", "elf_var",
    "resp_volume", "resp_coordination",
)


@dataclass(frozen=True)
class DescriptorVector:
    dos_moments: tuple[float, float, float, float]
    elf_features: tuple[float, float]
    response: tuple[float, float]

    def as_array(self) -> np.ndarray:
        return np.array(self.dos_moments + self.elf_features + self.response)

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("descriptor vector has non-finite components")


def _load_scaling() -> tuple[np.ndarray, np.ndarray]:
    raw = read_data_text(f"descriptor_scaling_{SCALING_VERSION}.tsv")
    means, scales = {}, {}
    for line in raw.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, mean, scale = line.split("\t")
        means[name] = float(mean)
        scales[name] = float(scale)
    return (np.array([means[n] for n in DESCRIPTOR_NAMES]),
            np.array([scales[n] for n in DESCRIPTOR_NAMES]))


_SCALE_MEAN, _SCALE_STD = _load_scaling()


def _standardize(raw: np.ndarray) -> DescriptorVector:
    z = (raw - _SCALE_MEAN) / _SCALE_STD
    return DescriptorVector(tuple(z[:4]), tuple(z[4:6]), tuple(z[6:8]))


def _weighted_moments(values: np.ndarray, weights: np.ndarray) -> tuple[float, float, float, float]:
    w = weights / weights.sum()
    mean = float(np.dot(w, values))
    var = float(np.dot(w, (values - mean) ** 2))
    std = math.sqrt(var)
    if std < 1e-12:
        return mean, 0.0, 0.0, 0.0
    zs = (values - mean) / std
    skew = float(np.dot(w, zs ** 3))
    kurt = float(np.dot(w, zs ** 4))
    return mean, std, skew, kurt


def _per_atom_shells(s: CrystalStructure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(nearest distance, shell count, nearest-neighbor radius) per atom."""
    gmat = s.metric_matrix()
    images = _images_for_metric(gmat)
    coords = s.frac_coords
    n = coords.shape[0]
    radii = np.array([el.covalent_radius for el in s.species])
    d_min = np.empty(n)
    counts = np.empty(n)
    nn_radius = np.empty(n)
    for i in range(n):
        dists = []
        partners = []
        for j in range(n):
            v = coords[i] - coords[j] + images
            d2 = np.einsum("ki,ij,kj->k", v, gmat, v)
            if i == j:
                d2 = d2[d2 > 1e-18]
            d = np.sqrt(d2)
            dists.append(d)
            partners.append(np.full(d.shape, j))
        dall = np.concatenate(dists)
        pall = np.concatenate(partners)
        k = int(np.argmin(dall))
        d_min[i] = dall[k]
        nn_radius[i] = radii[int(pall[k])]
        counts[i] = int(np.sum(dall <= NEIGHBOR_SHELL_SCALE * dall[k]))
    return d_min, counts, nn_radius


def compute_descriptors(s: CrystalStructure) -> DescriptorVector:
    """Structure descriptor 8-vector, standardized."""
    d_min, counts, nn_radius = _per_atom_shells(s)
    radii = np.array([el.covalent_radius for el in s.species])
    chi = np.array([el.electronegativity for el in s.species])
    weights = np.where(chi > 0, chi, 1.0)

    dos = _weighted_moments(counts.astype(float), weights)

    ratios = d_min / (radii + nn_radius)
    elf = (float(ratios.mean()), float(ratios.var()))

    vol_per_atom = s.volume() / s.n_atoms
    mean_cn = float(counts.mean())
    response = (math.log(vol_per_atom), mean_cn / (1.0 + mean_cn))

    return _standardize(np.array(dos + elf + response))


# Composition-only proxy constants, fit once against the structure corpus
# used to freeze the standardization table.
_COMP_CN_BASE = 2.2
_COMP_CN_RADIUS_SLOPE = 0.8
_COMP_RATIO_MEAN = 0.81
_COMP_RATIO_VAR = 0.0014
_COMP_PACKING = 1.3  # matches the seed-cell volume rule


def composition_descriptors(c: Composition) -> DescriptorVector:
    """Structure-free descriptor estimate from composition statistics.

    Tracks compute_descriptors in expectation over sampled structures of
    the composition (calibration tested), so it can stand in as a
    conditioning target before any structure exists.
    """
    if not c.entries:
        raise EmptyComposition("empty composition")
    species = c.expand_species()
    radii = np.array([el.covalent_radius for el in species])
    chi = np.array([el.electronegativity for el in species])
    weights = np.where(chi > 0, chi, 1.0)

    r_mean = radii.mean()
    values = _COMP_CN_BASE + _COMP_CN_RADIUS_SLOPE * (radii - r_mean)
    mean, std, _, _ = _weighted_moments(values, weights)
    # Nearest-neighbor shells are close to uniform in sampled cells: the
    # proxy pins skew at the degenerate-shell convention and lets size
    # contrast feed a mild tail weight.
    dos = (mean, std, 0.0, 0.7 * std)

    if len(c.entries) > 1:
        elf_var = _COMP_RATIO_VAR + 0.08 * float(radii.var())
    else:
        elf_var = 0.0
    elf = (_COMP_RATIO_MEAN, elf_var)

    vol_per_atom = _COMP_PACKING * (2.0 * r_mean) ** 3
    mean_cn = _COMP_CN_BASE
    response = (math.log(vol_per_atom), mean_cn / (1.0 + mean_cn))

    return _standardize(np.array(dos + elf + response))
