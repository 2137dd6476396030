"""Local Hamiltonians as sums of diagonal-times-flip terms.

Every term is a sum of branches (flip_mask, coefficient table): the mask
selects which support sites a branch flips and the table gives the matrix
element as a function of the local configuration *before* the flip.  The
local energy h_n = <n|H|psi>/<n|psi> then reduces to amplitude ratios:

    h_n = sum_terms sum_branches table[n|support] * ratio(n -> n_flipped)

which the string caches evaluate in O(D^2) per touched string.  Spin-1/2
(d = 2) only; levels 0/1 map to z = +1/-1 in the sampling basis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import Lattice
from .state import BatchCache, StringBondState, ZeroAmplitudeError

_MAX_SUPPORT = 4


@dataclass(frozen=True, eq=False)
class LocalTerm:
    """One local operator: ordered support sites and (flip_mask, table) branches.

    table has shape (d,) * len(support), indexed by the local configuration;
    flip_mask bit i flips support[i].
    """

    support: tuple[int, ...]
    branches: tuple[tuple[int, np.ndarray], ...]

    def __post_init__(self):
        k = len(self.support)
        if not 1 <= k <= _MAX_SUPPORT:
            raise ValueError(f"support must have 1..{_MAX_SUPPORT} sites, got {k}")
        if len(set(self.support)) != k:
            raise ValueError("support sites must be distinct")
        for mask, table in self.branches:
            if not 0 <= mask < 2 ** k:
                raise ValueError(f"flip mask {mask} out of range for {k} sites")
            if table.shape != (2,) * k:
                raise ValueError(f"coefficient table must cover all local configurations")


@dataclass(eq=False)
class LocalHamiltonian:
    lattice: Lattice
    terms: tuple[LocalTerm, ...]
    site_terms: dict[int, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        if self.lattice.d != 2:
            raise ValueError("local Hamiltonians support d = 2 only")
        self.site_terms = {s: [] for s in range(self.lattice.n_sites)}
        for i, term in enumerate(self.terms):
            for s in term.support:
                if not 0 <= s < self.lattice.n_sites:
                    raise ValueError(f"term site {s} outside lattice")
                self.site_terms[s].append(i)


def _z(levels: np.ndarray) -> np.ndarray:
    return 1 - 2 * levels.astype(float)


def build_tfi(lattice: Lattice, J: float, h: float) -> LocalHamiltonian:
    """H = -J sum_<ij> Z_i Z_j - h sum_i X_i in the Z product basis.

    Bond terms are diagonal; the transverse field is a pure single-site
    flip with constant coefficient -h (omitted entirely when h = 0).
    """
    terms: list[LocalTerm] = []
    zz = np.empty((2, 2))
    for na in range(2):
        for nb in range(2):
            zz[na, nb] = -J * (1 - 2 * na) * (1 - 2 * nb)
    for bond in lattice.bonds:
        terms.append(LocalTerm((bond.a, bond.b), ((0, zz.copy()),)))
    if h != 0.0:
        for site in range(lattice.n_sites):
            terms.append(LocalTerm((site,), ((1, np.full(2, -h)),)))
    return LocalHamiltonian(lattice, tuple(terms))


def default_frustration(lattice: Lattice) -> dict[tuple[int, int], int]:
    """Default sign gauge: vertical bonds in every second column carry -1.

    Every plaquette then borders exactly one negative bond.
    """
    signs: dict[tuple[int, int], int] = {}
    for bond in lattice.bonds:
        x, _ = lattice.coords(bond.a)
        neg = bond.orientation == "v" and x % 2 == 1
        signs[_bond_key(bond.a, bond.b)] = -1 if neg else 1
    return signs


def _bond_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def validate_frustration(lattice: Lattice, signs: dict[tuple[int, int], int]) -> None:
    """Every plaquette must border an odd number of negative bonds."""
    for p, cyc in enumerate(lattice.plaquette_list):
        prod = 1
        for i in range(4):
            key = _bond_key(cyc[i], cyc[(i + 1) % 4])
            if key not in signs:
                raise ValueError(f"no sign given for bond {key}")
            prod *= signs[key]
        if prod >= 0:
            raise ValueError(
                f"plaquette {p} {cyc} has an even number of negative bonds; "
                "the model must be fully frustrated"
            )


def build_frustrated_xx(lattice: Lattice, J: float, h: float,
                        frustration: dict[tuple[int, int], int] | None = None,
                        ) -> LocalHamiltonian:
    """H = sum_<ij> J_ij (X_i X_j + Y_i Y_j) - h sum_i Z_i with J_ij = +-J.

    In the Z basis the exchange flips both bond sites with coefficient
    2 J_ij on antiparallel local configurations (zero on parallel ones);
    the field is diagonal.  The sign pattern must make every plaquette
    frustrated (odd number of negative bonds); the default gauge negates
    vertical bonds in every second column.
    """
    signs = default_frustration(lattice) if frustration is None else dict(frustration)
    validate_frustration(lattice, signs)
    terms: list[LocalTerm] = []
    for bond in lattice.bonds:
        Jij = J * signs[_bond_key(bond.a, bond.b)]
        table = np.zeros((2, 2))
        table[0, 1] = table[1, 0] = 2.0 * Jij
        terms.append(LocalTerm((bond.a, bond.b), ((0b11, table),)))
    if h != 0.0:
        for site in range(lattice.n_sites):
            table = np.array([-h, h], dtype=float)  # -h * z with z = 1 - 2n
            terms.append(LocalTerm((site,), ((0, table),)))
    return LocalHamiltonian(lattice, tuple(terms))


_PAULI_ALIASES = {"x": "X", "z": "Z", "xx": "XX", "zz": "ZZ", "y": "Y"}


def observable_term(name: str, sites: tuple[int, ...] | list[int]) -> LocalTerm:
    """A product of Paulis (letters of `name`, one per site) in flip form.

    Accepts e.g. ("Z", (i,)), ("XX", (i, j)), ("ZZZZ", plaquette sites).
    """
    sites = tuple(int(s) for s in sites)
    letters = _PAULI_ALIASES.get(name, name).upper()
    if len(letters) != len(sites) or not letters or any(c not in "IXYZ" for c in letters):
        raise ValueError(f"unknown observable {name!r} for {len(sites)} site(s)")
    k = len(sites)
    mask = 0
    for i, c in enumerate(letters):
        if c in "XY":
            mask |= 1 << i
    table = np.ones((2,) * k, dtype=complex)
    grids = np.indices((2,) * k)
    for i, c in enumerate(letters):
        n_i = grids[i]
        if c == "Z":
            table = table * (1 - 2 * n_i)
        elif c == "Y":
            table = table * (1j * (2 * n_i - 1))
    return LocalTerm(sites, ((mask, table),))


def local_energies(H: LocalHamiltonian, cache: BatchCache) -> np.ndarray:
    """h_n = <n|H|psi>/<n|psi> for every cached configuration, (B,) complex.

    Rows at zero amplitude produce non-finite values; callers filtering on
    p(n) > 0 must mask them out.
    """
    B = cache.B
    configs = cache.configs
    out = np.zeros(B, dtype=complex)
    for term in H.terms:
        local = configs[:, term.support]
        for mask, table in term.branches:
            coeff = table[tuple(local.T)]
            if mask == 0:
                out += coeff
                continue
            flip_sites = tuple(term.support[i] for i in range(len(term.support))
                               if mask >> i & 1)
            new_levels = 1 - configs[:, flip_sites]
            ratios = cache.multi_ratios(flip_sites, new_levels)
            out += coeff * ratios
    return out


def local_energy(H: LocalHamiltonian, state: StringBondState, cache: BatchCache) -> complex:
    """Single-configuration local energy; requires a nonzero amplitude."""
    if cache.B != 1:
        raise ValueError("local_energy() operates on a single-configuration cache")
    if cache.global_log()[0] == -math.inf:
        raise ZeroAmplitudeError("local energy undefined at zero amplitude")
    return complex(local_energies(H, cache)[0])
