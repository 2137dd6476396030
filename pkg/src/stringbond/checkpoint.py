"""Versioned text checkpoints for string-bond states.

Layout:
    SBSv1 Lx Ly boundary d D seed
    <pattern descriptor, one string per line>
    matrices
    <one line per (string, position, level): row-major complex tokens>

Values are written with repr so a write/read/write cycle is byte-identical
and every double round-trips exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .lattice import build_lattice
from .patterns import parse_pattern
from .state import StringBondState


class CheckpointError(ValueError):
    pass


def _fmt(z: complex) -> str:
    re = repr(float(z.real))
    im = repr(float(z.imag))
    sign = "" if im.startswith("-") else "+"
    return f"{re}{sign}{im}j"


def save_checkpoint(state: StringBondState, path: str | Path, seed: int = 0) -> None:
    lat = state.lattice
    lines = [f"SBSv1 {lat.Lx} {lat.Ly} {lat.boundary} {lat.d} {state.D} {seed}"]
    lines.append(state.pattern.to_descriptor().rstrip("\n"))
    lines.append("matrices")
    for s, st in enumerate(state.pattern.strings):
        for t in range(len(st.sites)):
            for k in range(state.d):
                row = state.mats[s][t][k].ravel()
                lines.append(" ".join(_fmt(z) for z in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[StringBondState, dict]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("SBSv1 "):
        head = lines[0].split()[0] if lines and lines[0].split() else "<empty>"
        raise CheckpointError(f"unsupported checkpoint version {head!r}; expected SBSv1")
    fields = lines[0].split()
    if len(fields) != 7:
        raise CheckpointError("malformed checkpoint header")
    _, Lx, Ly, boundary, d, D, seed = fields
    Lx, Ly, d, D, seed = int(Lx), int(Ly), int(d), int(D), int(seed)
    try:
        split = lines.index("matrices")
    except ValueError:
        raise CheckpointError("checkpoint has no 'matrices' section")
    lattice = build_lattice(Lx, Ly, boundary, d)
    pattern = parse_pattern("\n".join(lines[1:split]), lattice.n_sites)
    mat_lines = [ln for ln in lines[split + 1:] if ln.strip()]
    expected = sum(len(st.sites) * d for st in pattern.strings)
    if len(mat_lines) != expected:
        raise CheckpointError(
            f"expected {expected} matrix lines, found {len(mat_lines)}"
        )
    mats: list[list[np.ndarray]] = []
    pos = 0
    for st in pattern.strings:
        row = []
        for t in range(len(st.sites)):
            r, c = StringBondState.slot_shape(len(st.sites), st.closed, t, D)
            levels = []
            for _ in range(d):
                toks = mat_lines[pos].split()
                pos += 1
                if len(toks) != r * c:
                    raise CheckpointError(
                        f"matrix line {pos} has {len(toks)} entries, expected {r * c}"
                    )
                levels.append(np.array([complex(tok) for tok in toks]).reshape(r, c))
            row.append(np.stack(levels))
        mats.append(row)
    state = StringBondState(lattice, pattern, D, mats, check_nonzero=False)
    return state, {"seed": seed}
