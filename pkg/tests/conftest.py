import numpy as np
import pytest

from mfscreen.chem import Composition, CrystalStructure, cubic_metric
from mfscreen.elements import Element, get_element


@pytest.fixture
def rocksalt():
    """Conventional NaCl cell: 4 Na + 4 Cl, fully constraint-compliant."""
    a = 5.64
    na_sites = [[0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0.5]]
    cl_sites = [[0.5, 0, 0], [0, 0.5, 0], [0, 0, 0.5], [0.5, 0.5, 0.5]]
    species = (get_element("Na"),) * 4 + (get_element("Cl"),) * 4
    return CrystalStructure(
        metric=cubic_metric(a),
        frac_coords=np.array(na_sites + cl_sites, dtype=float),
        species=species,
        id="rocksalt-nacl",
    )


def synthetic_element(symbol="Aa", z=200, radius=1.0, states=(1,),
                      block="s", chi=1.5):
    """Element with symbolic parameters, so no shipped value is load-bearing."""
    return Element(
        symbol=symbol, atomic_number=z, covalent_radius=radius,
        allowed_oxidation_states=tuple(states), block_flag=block,
        allowed=True, electronegativity=chi,
    )


@pytest.fixture
def pair_cell():
    """Two synthetic atoms (radius 1.0) in a roomy cubic cell, at distance d."""
    def build(distance, a=8.0, radius=1.0):
        cation = synthetic_element("Aa", 201, radius, (2,), "s", 1.0)
        anion = synthetic_element("Bb", 202, radius, (-2,), "p", 3.0)
        return CrystalStructure(
            metric=cubic_metric(a),
            frac_coords=np.array([[0.0, 0.0, 0.0], [distance / a, 0.0, 0.0]]),
            species=(cation, anion),
            id=f"pair-{distance}",
        )
    return build
