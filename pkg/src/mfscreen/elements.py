"""Element table: symbols, radii, oxidation states, block flags, whitelist.

The shipped table lives in ``data/elements_v1.tsv`` (delimited text:
symbol, Z, radius, states, block, allowed, electronegativity). Exactly 63
elements carry ``allowed=True``; the rest are present for parsing raw
records but are excluded from the search space.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ._data import read_data_bytes

ELEMENT_TABLE_VERSION = "v1"


class UnknownElement(KeyError):
    pass


@dataclass(frozen=True)
class Element:
    symbol: str
    atomic_number: int
    covalent_radius: float  # Angstrom
    allowed_oxidation_states: tuple[int, ...]
    block_flag: str  # one of s, p, d, f; d/f marks correlation-prone species
    allowed: bool
    electronegativity: float = 0.0

    def __post_init__(self):
        if self.covalent_radius <= 0:
            raise ValueError(f"covalent_radius must be > 0, got {self.covalent_radius}")
        if self.block_flag not in ("s", "p", "d", "f"):
            raise ValueError(f"block_flag must be one of s/p/d/f, got {self.block_flag!r}")
        if self.allowed and not self.allowed_oxidation_states:
            raise ValueError(f"allowed element {self.symbol} needs oxidation states")

    @property
    def correlation_prone(self) -> bool:
        return self.block_flag in ("d", "f")

    def __repr__(self):
        return f"Element({self.symbol})"


def _load_table() -> tuple[dict[str, Element], str]:
    raw = read_data_bytes(f"elements_{ELEMENT_TABLE_VERSION}.tsv")
    table: dict[str, Element] = {}
    for line in raw.decode().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sym, z, radius, states, block, allowed, chi = line.split("\t")
        table[sym] = Element(
            symbol=sym,
            atomic_number=int(z),
            covalent_radius=float(radius),
            allowed_oxidation_states=tuple(int(s) for s in states.split(",")),
            block_flag=block,
            allowed=allowed == "1",
            electronegativity=float(chi),
        )
    return table, hashlib.sha256(raw).hexdigest()


ELEMENTS, ELEMENT_TABLE_HASH = _load_table()

_BY_Z = {el.atomic_number: el for el in ELEMENTS.values()}

ALLOWED_ELEMENTS = tuple(
    sorted((el for el in ELEMENTS.values() if el.allowed), key=lambda e: e.atomic_number)
)


def get_element(symbol: str) -> Element:
    try:
        return ELEMENTS[symbol]
    except KeyError:
        raise UnknownElement(f"unknown element symbol: {symbol!r}") from None


def element_by_z(z: int) -> Element:
    try:
        return _BY_Z[z]
    except KeyError:
        raise UnknownElement(f"unknown atomic number: {z}") from None
