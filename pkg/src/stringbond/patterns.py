"""String layouts: the ordered site subsets carrying matrix-product factors.

A pattern is a collection of strings; every lattice site must belong to at
least one string, otherwise its spin would carry no variational weight.
Closed strings contract with a trace, open strings with boundary vectors.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .lattice import Lattice, plaquettes


class PatternError(ValueError):
    pass


@dataclass(frozen=True)
class String:
    sites: tuple[int, ...]
    closed: bool

    def __post_init__(self):
        if len(self.sites) < 1:
            raise PatternError("string must contain at least one site")
        if len(set(self.sites)) != len(self.sites):
            dup = [s for s in self.sites if self.sites.count(s) > 1][0]
            raise PatternError(f"site {dup} repeats within a string")

    def __len__(self) -> int:
        return len(self.sites)


@dataclass(frozen=True)
class StringPattern:
    strings: tuple[String, ...]
    n_sites: int

    def __post_init__(self):
        for st in self.strings:
            for s in st.sites:
                if not 0 <= s < self.n_sites:
                    raise PatternError(f"site {s} out of range for {self.n_sites} sites")
        covered = {s for st in self.strings for s in st.sites}
        missing = sorted(set(range(self.n_sites)) - covered)
        if missing:
            raise PatternError(f"site {missing[0]} is not covered by any string")

    @property
    def incidence(self) -> dict[int, list[tuple[int, int]]]:
        """site -> list of (string id, position within string)."""
        inc: dict[int, list[tuple[int, int]]] = {s: [] for s in range(self.n_sites)}
        for sid, st in enumerate(self.strings):
            for pos, site in enumerate(st.sites):
                inc[site].append((sid, pos))
        return inc

    def combine(self, other: "StringPattern") -> "StringPattern":
        if self.n_sites != other.n_sites:
            raise PatternError("patterns cover different site counts")
        return StringPattern(self.strings + other.strings, self.n_sites)

    def to_descriptor(self) -> str:
        lines = []
        for st in self.strings:
            tag = "closed" if st.closed else "open"
            lines.append(f"{tag}: " + " ".join(str(s) for s in st.sites))
        return "\n".join(lines) + "\n"


def lines_pattern(lattice: Lattice) -> StringPattern:
    """One string per row and one per column; closed on periodic lattices.

    Rows or columns of length 1 are dropped (their factor would be a
    configuration-selected scalar already provided by the transverse
    strings), except on a 1x1 lattice where the lone site keeps one string.
    """
    closed = lattice.boundary == "periodic"
    strings: list[String] = []
    if lattice.Lx >= 2:
        for y in range(lattice.Ly):
            strings.append(String(tuple(lattice.site(x, y) for x in range(lattice.Lx)), closed))
    if lattice.Ly >= 2:
        for x in range(lattice.Lx):
            strings.append(String(tuple(lattice.site(x, y) for y in range(lattice.Ly)), closed))
    if not strings:
        strings.append(String((0,), False))
    return StringPattern(tuple(strings), lattice.n_sites)


def loops_pattern(lattice: Lattice) -> StringPattern:
    """One closed 4-site string per plaquette, in plaquette cyclic order."""
    plaqs = plaquettes(lattice)
    if not plaqs:
        raise PatternError("lattice has no plaquettes")
    return StringPattern(tuple(String(p, True) for p in plaqs), lattice.n_sites)


def snake_pattern(lattice: Lattice) -> StringPattern:
    """A single open string visiting all sites boustrophedon."""
    order: list[int] = []
    for y in range(lattice.Ly):
        xs = range(lattice.Lx) if y % 2 == 0 else range(lattice.Lx - 1, -1, -1)
        order.extend(lattice.site(x, y) for x in xs)
    return StringPattern((String(tuple(order), False),), lattice.n_sites)


def single_site_pattern(lattice: Lattice) -> StringPattern:
    """N length-1 strings; with D=1 this is a product state."""
    return StringPattern(
        tuple(String((s,), False) for s in range(lattice.n_sites)), lattice.n_sites
    )


_GENERATORS = {
    "lines": lines_pattern,
    "loops": loops_pattern,
    "snake": snake_pattern,
    "single_site": single_site_pattern,
}


def pattern_from_names(lattice: Lattice, names: list[str] | str) -> StringPattern:
    """Combine named generators, e.g. ['lines', 'loops']."""
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    if not names:
        raise PatternError("no pattern names given")
    pattern = None
    for name in names:
        try:
            gen = _GENERATORS[name]
        except KeyError:
            raise PatternError(f"unknown pattern {name!r}; known: {sorted(_GENERATORS)}")
        p = gen(lattice)
        pattern = p if pattern is None else pattern.combine(p)
    return pattern


def parse_pattern(text: str, n_sites: int) -> StringPattern:
    """Parse a descriptor: one string per line, `closed|open: i0 i1 ...`.

    Lines starting with `#` and blank lines are ignored.  Raises
    PatternError naming the offending site for duplicates, out-of-range
    indices, or uncovered sites.
    """
    strings: list[String] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise PatternError(f"line {lineno}: expected 'closed|open: sites...'")
        tag, _, rest = line.partition(":")
        tag = tag.strip().lower()
        if tag not in ("closed", "open"):
            raise PatternError(f"line {lineno}: topology must be 'closed' or 'open', got {tag!r}")
        try:
            sites = tuple(int(tok) for tok in rest.split())
        except ValueError:
            raise PatternError(f"line {lineno}: non-integer site index")
        strings.append(String(sites, tag == "closed"))
    if not strings:
        raise PatternError("descriptor contains no strings")
    return StringPattern(tuple(strings), n_sites)


def load_pattern(path: str | Path, n_sites: int) -> StringPattern:
    return parse_pattern(Path(path).read_text(), n_sites)
