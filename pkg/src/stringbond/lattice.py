"""2D square lattices: sites, nearest-neighbor bonds, plaquettes.

Sites are indexed row-major with site 0 at coordinate (0, 0): the site at
column x, row y has index ``y * Lx + x``.  All file formats and patterns
share this convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Bond:
    """Unordered nearest-neighbor pair, tagged with orientation and the
    plaquettes it borders."""

    a: int
    b: int
    orientation: str  # 'h' or 'v'
    plaquettes: tuple[int, ...] = ()


@dataclass(frozen=True)
class Lattice:
    Lx: int
    Ly: int
    boundary: str  # 'open' or 'periodic'
    d: int
    bonds: tuple[Bond, ...] = field(repr=False)
    plaquette_list: tuple[tuple[int, int, int, int], ...] = field(repr=False)

    @property
    def n_sites(self) -> int:
        return self.Lx * self.Ly

    def site(self, x: int, y: int) -> int:
        return (y % self.Ly) * self.Lx + (x % self.Lx)

    def coords(self, site: int) -> tuple[int, int]:
        return site % self.Lx, site // self.Lx


def build_lattice(Lx: int, Ly: int, boundary: str = "open", d: int = 2) -> Lattice:
    """Build a 2D square lattice with unique nearest-neighbor bonds.

    Periodic boundaries wrap a dimension only if its length is at least 3;
    a dimension of length 1 never wraps (this admits 1D rings as 1xN
    periodic lattices).  Length 2 with wrapping would duplicate the bond
    between the same site pair and is rejected.
    """
    if Lx < 1 or Ly < 1 or d < 1:
        raise ValueError("Lx, Ly and d must be positive")
    if boundary not in ("open", "periodic"):
        raise ValueError(f"unknown boundary {boundary!r}")
    if boundary == "periodic":
        for name, L in (("Lx", Lx), ("Ly", Ly)):
            if L == 2:
                raise ValueError(
                    f"periodic boundary with {name}=2 would double-count bonds; "
                    "use length 1 or >= 3"
                )
        if max(Lx, Ly) < 3:
            raise ValueError("periodic boundary requires at least one dimension >= 3")

    def site(x: int, y: int) -> int:
        return (y % Ly) * Lx + (x % Lx)

    wrap_x = boundary == "periodic" and Lx >= 3
    wrap_y = boundary == "periodic" and Ly >= 3

    plaqs: list[tuple[int, int, int, int]] = []
    if Lx >= 2 and Ly >= 2:
        nx = Lx if wrap_x else Lx - 1
        ny = Ly if wrap_y else Ly - 1
        for y in range(ny):
            for x in range(nx):
                # cyclic order: site, right, right-down, down
                plaqs.append((site(x, y), site(x + 1, y), site(x + 1, y + 1), site(x, y + 1)))

    # map each unordered plaquette edge to the plaquettes it borders
    edge_plaqs: dict[tuple[int, int], list[int]] = {}
    for p, cyc in enumerate(plaqs):
        for i in range(4):
            a, b = cyc[i], cyc[(i + 1) % 4]
            edge_plaqs.setdefault((min(a, b), max(a, b)), []).append(p)

    bonds: list[Bond] = []
    for y in range(Ly):
        for x in range(Lx):
            if Lx >= 2 and (x + 1 < Lx or wrap_x):
                a, b = site(x, y), site(x + 1, y)
                key = (min(a, b), max(a, b))
                bonds.append(Bond(a, b, "h", tuple(edge_plaqs.get(key, ()))))
            if Ly >= 2 and (y + 1 < Ly or wrap_y):
                a, b = site(x, y), site(x, y + 1)
                key = (min(a, b), max(a, b))
                bonds.append(Bond(a, b, "v", tuple(edge_plaqs.get(key, ()))))

    seen = set()
    for bd in bonds:
        key = (min(bd.a, bd.b), max(bd.a, bd.b))
        if key in seen:
            raise AssertionError(f"duplicate bond {key}")
        seen.add(key)

    return Lattice(Lx, Ly, boundary, d, tuple(bonds), tuple(plaqs))


def plaquettes(lattice: Lattice) -> list[tuple[int, int, int, int]]:
    """Elementary 4-site cycles in fixed cyclic order (site, right, right-down, down)."""
    return list(lattice.plaquette_list)
