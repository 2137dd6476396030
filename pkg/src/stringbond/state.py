"""String-bond wavefunction core.

The amplitude of a configuration n factorizes over strings into traces of
matrix products, one matrix per string position selected by the local spin
level.  Closed strings contract with a trace; open strings carry a 1xD
boundary tensor at their first position and a Dx1 tensor at their last.

Amplitudes are tracked in log-magnitude/phase form so that products over
many strings cannot overflow, and exact zeros remain representable
(log-magnitude -inf).

A cache bound to a configuration stores, per string and position t, the
prefix product L_t = A_0 ... A_{t-1}, the suffix product R_t = A_{t+1} ...
A_{L-1}, and the environment E_t = R_t @ L_t.  Replacing the matrix at one
position then costs O(D^2): tr(L A' R) = tr(A' E).  Prefix/suffix factors
are renormalized per position with separate log scales; ratios cancel the
scales exactly.   All cache arrays carry a leading batch axis so that many
Markov chains (or an enumeration of configurations) share one set of
vectorized operations; the single-chain operations are the B = 1 case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .lattice import Lattice
from .patterns import StringPattern, loops_pattern


class LogAmplitude(NamedTuple):
    """Complex value as (log-magnitude, phase); log_mag = -inf encodes 0."""

    log_mag: float
    phase: float

    def to_complex(self) -> complex:
        if self.log_mag == -math.inf:
            return 0j
        return complex(np.exp(self.log_mag + 1j * self.phase))


class ZeroAmplitudeError(ValueError):
    """Raised when an operation requires a nonzero amplitude."""


@dataclass(frozen=True, eq=False)
class StringGroup:
    """Strings of equal length and topology, cached and updated together."""

    ids: np.ndarray        # global string ids, (n_g,)
    length: int
    closed: bool
    sites: np.ndarray      # (n_g, length)
    slot_base: np.ndarray  # first slot id of each string, (n_g,)


def _normalize_rows(P: np.ndarray, acc: np.ndarray) -> np.ndarray:
    """Divide each batch row of P by its max-abs entry, accumulating logs."""
    m = np.abs(P).max(axis=(1, 2))
    nz = m > 0
    scale = np.where(nz, m, 1.0)
    P /= scale[:, None, None]
    acc += np.where(nz, np.log(scale), 0.0)
    return P


class StringBondState:
    """All variational matrices of a string-bond wavefunction.

    mats[s][t] has shape (d, rows, cols): rows=cols=D inside closed strings,
    (1, D) at the first and (D, 1) at the last position of open strings.
    """

    def __init__(self, lattice: Lattice, pattern: StringPattern, D: int,
                 mats: list[list[np.ndarray]], real: bool = False,
                 check_nonzero: bool = True):
        if D < 1:
            raise ValueError("bond dimension must be positive")
        self.lattice = lattice
        self.pattern = pattern
        self.D = D
        self.d = lattice.d
        self.real = real
        self.mats = mats
        self._check_shapes()
        self._build_tables()
        self._sync_pad()
        self._flip_plans: dict[tuple[int, ...], _FlipPlan] = {}
        if check_nonzero:
            probe = np.zeros(lattice.n_sites, dtype=np.int8)
            a0 = self.amplitude(probe)
            rng = np.random.default_rng(0)
            a1 = self.amplitude(rng.integers(0, self.d, lattice.n_sites))
            if a0.log_mag == -math.inf and a1.log_mag == -math.inf:
                raise ValueError("state has zero amplitude on both probe configurations")

    # -- construction -----------------------------------------------------

    @staticmethod
    def slot_shape(string_len: int, closed: bool, t: int, D: int) -> tuple[int, int]:
        if closed:
            return D, D
        rows = 1 if t == 0 else D
        cols = 1 if t == string_len - 1 else D
        return rows, cols

    def _check_shapes(self):
        for s, st in enumerate(self.pattern.strings):
            if len(self.mats[s]) != len(st.sites):
                raise ValueError(f"string {s}: expected {len(st.sites)} site tensors")
            for t in range(len(st.sites)):
                r, c = self.slot_shape(len(st.sites), st.closed, t, self.D)
                if self.mats[s][t].shape != (self.d, r, c):
                    raise ValueError(
                        f"string {s} position {t}: expected shape {(self.d, r, c)}, "
                        f"got {self.mats[s][t].shape}"
                    )

    def _build_tables(self):
        pattern, N = self.pattern, self.lattice.n_sites
        self.n_strings = len(pattern.strings)
        self.slots: list[tuple[int, int]] = []
        starts = [0]
        for st in pattern.strings:
            self.slots.extend((len(starts) - 1, t) for t in range(len(st.sites)))
            starts.append(len(self.slots))
        self.slot_start = np.asarray(starts)
        self.n_slots = len(self.slots)
        self.slot_site = np.asarray(
            [pattern.strings[s].sites[t] for s, t in self.slots], dtype=np.int64
        )
        self.shapes = [
            (self.d,) + self.slot_shape(len(pattern.strings[s].sites),
                                        pattern.strings[s].closed, t, self.D)
            for s, t in self.slots
        ]
        self.string_sites = [np.asarray(st.sites, dtype=np.int64) for st in pattern.strings]
        site_slots: list[list[int]] = [[] for _ in range(N)]
        for slot, (s, t) in enumerate(self.slots):
            site_slots[pattern.strings[s].sites[t]].append(slot)
        self.site_slots = [np.asarray(v, dtype=np.int64) for v in site_slots]
        K = max(len(v) for v in site_slots)
        self.site_slot_table = np.zeros((N, K), dtype=np.int64)
        self.site_slot_mask = np.zeros((N, K), dtype=bool)
        for x, v in enumerate(site_slots):
            self.site_slot_table[x, : len(v)] = v
            self.site_slot_mask[x, : len(v)] = True
        self.site_in_string = np.zeros((self.n_strings, N), dtype=bool)
        for s, st in enumerate(pattern.strings):
            self.site_in_string[s, list(st.sites)] = True

        # Strings of equal (length, topology) are maintained together by the
        # caches: one batched scan updates all touched (row, string) pairs.
        by_key: dict[tuple[int, bool], list[int]] = {}
        for s, st in enumerate(pattern.strings):
            by_key.setdefault((len(st.sites), st.closed), []).append(s)
        self.groups: list[StringGroup] = []
        self.string_group = np.zeros(self.n_strings, dtype=np.int64)
        self.string_local = np.zeros(self.n_strings, dtype=np.int64)
        for (L, closed), ids in sorted(by_key.items()):
            g = len(self.groups)
            ids_arr = np.asarray(ids, dtype=np.int64)
            for j, s in enumerate(ids):
                self.string_group[s] = g
                self.string_local[s] = j
            self.groups.append(StringGroup(
                ids=ids_arr,
                length=L,
                closed=closed,
                sites=np.stack([self.string_sites[s] for s in ids]),
                slot_base=self.slot_start[ids_arr],
            ))
        # per-group (site -> member strings) tables for vectorized updates
        self.site_gmember: list[tuple[np.ndarray, np.ndarray]] = []
        for g, grp in enumerate(self.groups):
            members: list[list[int]] = [[] for _ in range(N)]
            for j, s in enumerate(grp.ids):
                for site in self.pattern.strings[s].sites:
                    members[site].append(j)
            Kg = max(1, max(len(v) for v in members))
            tbl = np.zeros((N, Kg), dtype=np.int64)
            msk = np.zeros((N, Kg), dtype=bool)
            for x, v in enumerate(members):
                tbl[x, : len(v)] = v
                msk[x, : len(v)] = True
            self.site_gmember.append((tbl, msk))

    def _sync_pad(self):
        """Refresh zero-padded (n_slots, d, D, D) copies used by gathers."""
        D = self.D
        self.param_pad = np.zeros((self.n_slots, self.d, D, D), dtype=complex)
        for slot, (s, t) in enumerate(self.slots):
            _, r, c = self.shapes[slot]
            self.param_pad[slot, :, :r, :c] = self.mats[s][t]
        self.group_mats = [
            [np.stack([self.mats[s][t] for s in grp.ids]) for t in range(grp.length)]
            for grp in self.groups
        ]

    @classmethod
    def random(cls, lattice: Lattice, pattern: StringPattern, D: int,
               seed: int | np.random.Generator = 0, noise: float = 0.1,
               real: bool = False) -> "StringBondState":
        """Identity-like matrices plus noise: starts near the uniform
        superposition so sampling is ergodic from the first step."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dtype = float if real else complex
        mats: list[list[np.ndarray]] = []
        for st in pattern.strings:
            row = []
            for t in range(len(st.sites)):
                r, c = cls.slot_shape(len(st.sites), st.closed, t, D)
                base = np.eye(r, c) if r == c else np.ones((r, c))
                g = rng.standard_normal((lattice.d, r, c))
                if not real:
                    g = (g + 1j * rng.standard_normal((lattice.d, r, c))) / np.sqrt(2)
                row.append((base[None, :, :] + noise * g).astype(complex))
            mats.append(row)
        return cls(lattice, pattern, D, mats, real=real)

    def copy(self) -> "StringBondState":
        mats = [[m.copy() for m in row] for row in self.mats]
        return StringBondState(self.lattice, self.pattern, self.D, mats,
                               real=self.real, check_nonzero=False)

    # -- amplitudes --------------------------------------------------------

    def string_trace(self, s: int, config: np.ndarray) -> LogAmplitude:
        """Trace of string s's matrix product for one configuration."""
        st = self.pattern.strings[s]
        V = np.eye(self.D, dtype=complex) if st.closed else np.ones((1, 1), dtype=complex)
        acc = 0.0
        for t, site in enumerate(st.sites):
            V = V @ self.mats[s][t][int(config[site])]
            m = np.abs(V).max()
            if m == 0.0:
                return LogAmplitude(-math.inf, 0.0)
            V /= m
            acc += math.log(m)
        tr = np.trace(V)
        if tr == 0:
            return LogAmplitude(-math.inf, 0.0)
        return LogAmplitude(acc + math.log(abs(tr)), float(np.angle(tr)))

    def amplitude(self, config: np.ndarray) -> LogAmplitude:
        """<n|psi> as a log-domain complex; exact zero is log_mag = -inf."""
        config = np.asarray(config)
        log, phase = 0.0, 0.0
        for s in range(self.n_strings):
            la = self.string_trace(s, config)
            if la.log_mag == -math.inf:
                return LogAmplitude(-math.inf, 0.0)
            log += la.log_mag
            phase += la.phase
        return LogAmplitude(log, phase)

    def make_cache(self, configs: np.ndarray) -> "BatchCache":
        return BatchCache(self, configs)

    # -- parameter vector view ----------------------------------------------

    @property
    def n_parameters(self) -> int:
        n = sum(d * r * c for d, r, c in self.shapes)
        return n if self.real else 2 * n

    def flatten(self) -> np.ndarray:
        """All matrix entries as one real vector (re, im interleaved)."""
        parts = []
        for slot, (s, t) in enumerate(self.slots):
            flat = self.mats[s][t].ravel()
            if self.real:
                parts.append(flat.real)
            else:
                inter = np.empty(2 * flat.size)
                inter[0::2] = flat.real
                inter[1::2] = flat.imag
                parts.append(inter)
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_parameters,):
            raise ValueError(f"expected vector of length {self.n_parameters}")
        pos = 0
        for slot, (s, t) in enumerate(self.slots):
            shape = self.shapes[slot]
            n = int(np.prod(shape))
            if self.real:
                self.mats[s][t] = vec[pos:pos + n].reshape(shape).astype(complex)
                pos += n
            else:
                chunk = vec[pos:pos + 2 * n]
                self.mats[s][t] = (chunk[0::2] + 1j * chunk[1::2]).reshape(shape)
                pos += 2 * n
        self._sync_pad()

    def flip_plan(self, sites: tuple[int, ...]) -> "_FlipPlan":
        plan = self._flip_plans.get(sites)
        if plan is None:
            plan = _FlipPlan(self, sites)
            self._flip_plans[sites] = plan
        return plan


class _FlipPlan:
    """Static grouping of a simultaneous multi-site flip by string.

    Strings containing exactly one flipped site use the O(D^2) environment
    contraction; strings containing several recompute the partial product
    between the first and last affected position.
    """

    def __init__(self, state: StringBondState, sites: tuple[int, ...]):
        site_pos = {x: i for i, x in enumerate(sites)}
        per_string: dict[int, list[tuple[int, int]]] = {}
        for i, x in enumerate(sites):
            for slot in state.site_slots[x]:
                s, t = state.slots[slot]
                per_string.setdefault(s, []).append((t, i))
        single_slots: list[int] = []
        single_idx: list[int] = []
        self.groups: list[tuple[int, int, list[tuple[int, int, int]]]] = []
        for s, hits in sorted(per_string.items()):
            if len(hits) == 1:
                t, i = hits[0]
                single_slots.append(state.slot_start[s] + t)
                single_idx.append(i)
            else:
                t1 = min(t for t, _ in hits)
                tk = max(t for t, _ in hits)
                steps = []
                for t in range(t1, tk + 1):
                    site = int(state.string_sites[s][t])
                    steps.append((t, site, site_pos.get(site, -1)))
                self.groups.append((s, tk, steps))
        self.single_slots = np.asarray(single_slots, dtype=np.int64)
        self.single_idx = np.asarray(single_idx, dtype=np.int64)


class BatchCache:
    """Prefix/suffix/environment caches for a batch of configurations.

    The batch axis indexes independent configurations (Markov chains or an
    enumeration chunk).  Strings of one group share slab storage and are
    refreshed by a single vectorized scan over all touched (row, string)
    pairs.  Scans run on raw products; rows whose factors leave the double
    range fall back to a per-position renormalized scan whose log scales
    land in (lp, ls).  Absolute per-string values live in (slog, sphase).
    """

    def __init__(self, state: StringBondState, configs: np.ndarray):
        configs = np.atleast_2d(np.asarray(configs))
        if configs.shape[1] != state.lattice.n_sites:
            raise ValueError("configuration length does not match lattice")
        self.state = state
        self.B = configs.shape[0]
        self.configs = configs.astype(np.int8).copy()
        S, D = state.n_strings, state.D
        self.pref: list[np.ndarray] = []
        self.suff: list[np.ndarray] = []
        self.lp: list[np.ndarray] = []
        self.ls: list[np.ndarray] = []
        for grp in state.groups:
            n_g, L = len(grp.ids), grp.length
            pr, pc = (D, D) if grp.closed else (1, D)
            sr, sc = (D, D) if grp.closed else (D, 1)
            self.pref.append(np.zeros((self.B, n_g, L, pr, pc), dtype=complex))
            self.suff.append(np.zeros((self.B, n_g, L, sr, sc), dtype=complex))
            self.lp.append(np.zeros((self.B, n_g, L)))
            self.ls.append(np.zeros((self.B, n_g, L)))
        self.env_pad = np.zeros((self.B, state.n_slots, D, D), dtype=complex)
        self.den = np.zeros((self.B, state.n_slots), dtype=complex)
        self.slog = np.zeros((self.B, S))
        self.sphase = np.zeros((self.B, S))
        self._rows_col = np.arange(self.B)[:, None]
        self.rebuild()

    # -- (re)construction ----------------------------------------------------

    def rebuild(self, rows: np.ndarray | None = None) -> None:
        base_rows = np.arange(self.B) if rows is None else np.asarray(rows)
        for g, grp in enumerate(self.state.groups):
            n_g = len(grp.ids)
            pair_rows = np.repeat(base_rows, n_g)
            pair_strs = np.tile(np.arange(n_g), base_rows.size)
            self._rebuild_pairs(g, pair_rows, pair_strs)

    def rebuild_string(self, s: int, rows: np.ndarray | None = None) -> None:
        base_rows = np.arange(self.B) if rows is None else np.asarray(rows)
        if base_rows.size == 0:
            return
        g = int(self.state.string_group[s])
        j = int(self.state.string_local[s])
        self._rebuild_pairs(g, base_rows, np.full(base_rows.size, j))

    def _scan_pairs(self, g: int, rows: np.ndarray, strs: np.ndarray,
                    normalize: bool):
        """Prefix/suffix/env/den scan for (row, string) pairs of one group."""
        state = self.state
        grp = state.groups[g]
        L, D = grp.length, state.D
        P_count = rows.size
        lv = self.configs[rows[:, None], grp.sites[strs]]  # (P, L)
        mats = [state.group_mats[g][t][strs, lv[:, t]] for t in range(L)]

        if grp.closed:
            P = np.broadcast_to(np.eye(D, dtype=complex), (P_count, D, D)).copy()
            Sx = P.copy()
        else:
            P = np.ones((P_count, 1, 1), dtype=complex)
            Sx = P.copy()
        lp = np.zeros((P_count, L))
        ls = np.zeros((P_count, L))
        lp_acc = np.zeros(P_count)
        ls_acc = np.zeros(P_count)
        pref_raw = []
        for t in range(L):
            pref_raw.append(P)
            if normalize:
                lp[:, t] = lp_acc
            if t < L - 1:
                P = P @ mats[t]
                if normalize:
                    P = _normalize_rows(P, lp_acc)
        suff_raw: list[np.ndarray | None] = [None] * L
        for t in range(L - 1, -1, -1):
            suff_raw[t] = Sx
            if normalize:
                ls[:, t] = ls_acc
            if t > 0:
                Sx = mats[t] @ Sx
                if normalize:
                    Sx = _normalize_rows(Sx, ls_acc)
        env = [suff_raw[t] @ pref_raw[t] for t in range(L)]
        den = np.stack([np.einsum("bij,bji->b", mats[t], env[t]) for t in range(L)],
                       axis=1)
        return pref_raw, suff_raw, env, den, lp, ls

    def _rebuild_pairs(self, g: int, rows: np.ndarray, strs: np.ndarray) -> None:
        if rows.size == 0:
            return
        state = self.state
        grp = state.groups[g]
        L, D = grp.length, state.D
        pref_raw, suff_raw, env, den, lp, ls = self._scan_pairs(g, rows, strs, False)
        bad = ~(np.isfinite(den).all(axis=1)
                & np.all([np.isfinite(e).all(axis=(1, 2)) for e in env], axis=0))
        if bad.any():
            idx = np.nonzero(bad)[0]
            p2, s2, e2, d2, lp2, ls2 = self._scan_pairs(g, rows[idx], strs[idx], True)
            for t in range(L):
                pref_raw[t][idx] = p2[t]
                suff_raw[t][idx] = s2[t]
                env[t][idx] = e2[t]
            den[idx] = d2
            lp[idx] = lp2
            ls[idx] = ls2
        # uniform slab padding: open-string endpoints embed in (1,D)/(D,1)
        if not grp.closed:
            p0 = np.zeros((rows.size, 1, D), dtype=complex)
            p0[:, :, :1] = pref_raw[0]
            pref_raw[0] = p0
            sL = np.zeros((rows.size, D, 1), dtype=complex)
            sL[:, :1, :] = suff_raw[L - 1]
            suff_raw[L - 1] = sL
        env_pad = np.zeros((rows.size, L, D, D), dtype=complex)
        for t in range(L):
            c, r = env[t].shape[1], env[t].shape[2]
            env_pad[:, t, :c, :r] = env[t]
        slot_cols = grp.slot_base[strs][:, None] + np.arange(L)
        self.pref[g][rows, strs] = np.stack(pref_raw, axis=1)
        self.suff[g][rows, strs] = np.stack(suff_raw, axis=1)
        self.lp[g][rows, strs] = lp
        self.ls[g][rows, strs] = ls
        self.env_pad[rows[:, None], slot_cols] = env_pad
        self.den[rows[:, None], slot_cols] = den
        d0 = den[:, 0]
        mag = np.abs(d0)
        with np.errstate(divide="ignore"):
            slog = np.where(mag > 0, np.log(np.where(mag > 0, mag, 1.0)), -np.inf)
        gids = grp.ids[strs]
        self.slog[rows, gids] = slog + lp[:, 0] + ls[:, 0]
        self.sphase[rows, gids] = np.angle(d0)

    # -- per-string views ------------------------------------------------------

    def prefix_of(self, s: int, t: int) -> np.ndarray:
        """L_t = A_0 ... A_{t-1} for string s, true (unpadded) shape."""
        state = self.state
        g, j = int(state.string_group[s]), int(state.string_local[s])
        out = self.pref[g][:, j, t]
        if not state.groups[g].closed and t == 0:
            return out[:, :, :1]
        return out

    def suffix_of(self, s: int, t: int) -> np.ndarray:
        state = self.state
        g, j = int(state.string_group[s]), int(state.string_local[s])
        grp = state.groups[g]
        out = self.suff[g][:, j, t]
        if not grp.closed and t == grp.length - 1:
            return out[:, :1, :]
        return out

    def scales_of(self, s: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        g, j = int(self.state.string_group[s]), int(self.state.string_local[s])
        return self.lp[g][:, j, t], self.ls[g][:, j, t]

    # -- queries ---------------------------------------------------------------

    def global_log(self) -> np.ndarray:
        return self.slog.sum(axis=1)

    def global_phase(self) -> np.ndarray:
        return self.sphase.sum(axis=1)

    def log_amplitude(self, row: int = 0) -> LogAmplitude:
        return LogAmplitude(float(self.global_log()[row]), float(self.global_phase()[row]))

    def flip_ratios_site(self, x: int, new_levels: np.ndarray) -> np.ndarray:
        """Amplitude ratios for setting site x to new_levels (one per row)."""
        state = self.state
        slots = state.site_slots[x]
        env = self.env_pad[:, slots]
        Anew = state.param_pad[slots[None, :], np.asarray(new_levels)[:, None]]
        num = np.einsum("bkij,bkji->bk", Anew, env)
        den = self.den[:, slots]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.prod(num / den, axis=1)
        return out

    def flip_ratios_mixed(self, xs: np.ndarray, new_levels: np.ndarray) -> np.ndarray:
        """Per-row flip site xs[b] to new_levels[b]; used by batched chains."""
        state = self.state
        slot_ids = state.site_slot_table[xs]
        mask = state.site_slot_mask[xs]
        env = self.env_pad[self._rows_col, slot_ids]
        Anew = state.param_pad[slot_ids, np.asarray(new_levels)[:, None]]
        num = np.einsum("bkij,bkji->bk", Anew, env)
        den = self.den[self._rows_col, slot_ids]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(mask, num / np.where(mask, den, 1.0), 1.0)
        return np.prod(r, axis=1)

    def multi_ratios(self, sites: tuple[int, ...], new_levels: np.ndarray) -> np.ndarray:
        """Ratios for setting sites to new_levels (B, len(sites)) jointly.

        Strings hit once use cached environments; strings hit several times
        recompute the product over the affected span, so simultaneous flips
        within one string are exact.
        """
        state = self.state
        plan = state.flip_plan(tuple(sites))
        new_levels = np.asarray(new_levels)
        out = np.ones(self.B, dtype=complex)
        if plan.single_slots.size:
            slots = plan.single_slots
            lv = new_levels[:, plan.single_idx]
            env = self.env_pad[:, slots]
            Anew = state.param_pad[slots[None, :], lv]
            num = np.einsum("bkij,bkji->bk", Anew, env)
            den = self.den[:, slots]
            with np.errstate(divide="ignore", invalid="ignore"):
                out = out * np.prod(num / den, axis=1)
        for s, tk, steps in plan.groups:
            t1 = steps[0][0]
            Pn = self.prefix_of(s, t1)
            Pd = Pn
            for t, site, sub in steps:
                cur = self.configs[:, site]
                Ad = state.mats[s][t][cur]
                An = state.mats[s][t][new_levels[:, sub]] if sub >= 0 else Ad
                Pn = Pn @ An
                Pd = Pd @ Ad
            Sfx = self.suffix_of(s, tk)
            num = np.einsum("bij,bji->b", Pn, Sfx)
            den = np.einsum("bij,bji->b", Pd, Sfx)
            with np.errstate(divide="ignore", invalid="ignore"):
                out = out * num / den
        return out

    def apply_flips(self, rows: np.ndarray, xs: np.ndarray, new_levels: np.ndarray) -> None:
        """Commit accepted per-row flips and refresh the incident strings."""
        state = self.state
        self.configs[rows, xs] = new_levels
        for g in range(len(state.groups)):
            tbl, msk = state.site_gmember[g]
            loc = tbl[xs]          # (n_acc, Kg)
            m = msk[xs]
            if not m.any():
                continue
            pair_rows = np.repeat(rows, loc.shape[1])[m.ravel()]
            pair_strs = loc.ravel()[m.ravel()]
            self._rebuild_pairs(g, pair_rows, pair_strs)

    def b_tensor(self, slot: int) -> np.ndarray:
        """Linear-functional vectors for the site tensor at slot, (B, d, r, c).

        Component (k, i, j) is [k = n_x] E[j, i] / tr(A E); contracting with
        any replacement tensor gives the amplitude ratio psi_A / psi_A0.
        Rows with zero string trace yield non-finite entries; callers must
        exclude zero-amplitude rows.
        """
        state = self.state
        d, r, c = state.shapes[slot]
        E = self.env_pad[:, slot, :c, :r]
        lv = self.configs[:, state.slot_site[slot]]
        out = np.zeros((self.B, d, r, c), dtype=complex)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[np.arange(self.B), lv] = E.transpose(0, 2, 1) / self.den[:, slot][:, None, None]
        return out

    def audit(self) -> float:
        """Max relative error between recombined L_t A_t R_t and the stored
        per-string value, over all strings, positions and rows.

        Compared in log space so the check is scale-robust; rows whose
        string trace is exactly zero must recombine to zero as well.
        """
        state = self.state
        worst = 0.0
        for s in range(state.n_strings):
            L = len(state.pattern.strings[s].sites)
            ref_log = self.slog[:, s]
            zero = np.isneginf(ref_log)
            for t in range(L):
                site = state.string_sites[s][t]
                A = state.mats[s][t][self.configs[:, site]]
                V = self.prefix_of(s, t) @ A @ self.suffix_of(s, t)
                tr = np.einsum("bii->b", V)
                lp_t, ls_t = self.scales_of(s, t)
                with np.errstate(divide="ignore"):
                    tr_log = np.log(np.abs(tr)) + lp_t + ls_t
                if zero.any():
                    worst = max(worst, float(np.where(np.isneginf(tr_log[zero]), 0.0, 1.0).max()))
                ok = ~zero
                if ok.any():
                    dlog = tr_log[ok] - ref_log[ok]
                    dph = np.angle(tr[ok]) - self.sphase[ok, s]
                    rel = np.abs(np.exp(dlog + 1j * dph) - 1.0)
                    worst = max(worst, float(rel.max()))
        return worst


# -- single-configuration operations ------------------------------------------


def ratio(state: StringBondState, cache: BatchCache, x: int,
          new_level: int | None = None) -> complex:
    """<n'|psi>/<n|psi> with site x set to new_level (flip when d=2).

    Requires a nonzero current amplitude; raises ZeroAmplitudeError
    otherwise (the caller must then recompute from scratch).
    """
    if cache.B != 1:
        raise ValueError("ratio() operates on a single-configuration cache")
    if cache.global_log()[0] == -math.inf:
        raise ZeroAmplitudeError("ratio undefined at a zero-amplitude configuration")
    if new_level is None:
        if state.d != 2:
            raise ValueError("new_level is required when d != 2")
        new_level = 1 - int(cache.configs[0, x])
    return complex(cache.flip_ratios_site(x, np.asarray([new_level]))[0])


def apply_flip(state: StringBondState, cache: BatchCache, x: int, new_level: int) -> None:
    """Commit a flip at site x, updating only the strings incident to x."""
    if cache.B != 1:
        raise ValueError("apply_flip() operates on a single-configuration cache")
    if int(cache.configs[0, x]) == int(new_level):
        return
    cache.apply_flips(np.asarray([0]), np.asarray([x]), np.asarray([new_level]))


def b_vector(state: StringBondState, cache: BatchCache, x: int, s: int) -> np.ndarray:
    """The vector b_n with <b_n|A> = <n|psi_A>/<n|psi_A0> for the site
    tensor at (string s, site x); shape (d, rows, cols)."""
    if cache.B != 1:
        raise ValueError("b_vector() operates on a single-configuration cache")
    if cache.global_log()[0] == -math.inf:
        raise ZeroAmplitudeError("b vector undefined at a zero-amplitude configuration")
    positions = [t for t, site in enumerate(state.pattern.strings[s].sites) if site == x]
    if not positions:
        raise ValueError(f"site {x} is not on string {s}")
    slot = state.slot_start[s] + positions[0]
    return cache.b_tensor(slot)[0]


def rescale_strings(state: StringBondState,
                    reference_configs: np.ndarray | None = None) -> np.ndarray:
    """Rescale each string's matrices so its typical trace magnitude is O(1).

    The physical state changes only by a global scalar: energies, sampling
    probabilities and amplitude ratios are invariant.  Returns the log of
    the factor applied to each string's overall trace.
    """
    N, d = state.lattice.n_sites, state.d
    if reference_configs is None:
        probes = [np.zeros(N, dtype=np.int8), np.full(N, d - 1, dtype=np.int8),
                  (np.arange(N) % d).astype(np.int8)]
        reference_configs = np.stack(probes)
    else:
        reference_configs = np.atleast_2d(reference_configs)
    applied = np.zeros(state.n_strings)
    for s in range(state.n_strings):
        logs = [state.string_trace(s, cfg).log_mag for cfg in reference_configs]
        logs = [v for v in logs if v != -math.inf]
        if not logs:
            continue
        target = float(np.median(logs))
        L = len(state.pattern.strings[s].sites)
        factor = np.exp(-target / L)
        for t in range(L):
            state.mats[s][t] = state.mats[s][t] * factor
        applied[s] = -target
    state._sync_pad()
    return applied


def parity_loop_state(lattice: Lattice) -> StringBondState:
    """Plaquette-loop pattern with identity / Pauli-X matrices: amplitude is
    2^(#plaquettes) when every plaquette holds an even number of 1s, else 0
    (the D=2 loop realization of the toric-code parity state)."""
    if lattice.d != 2:
        raise ValueError("parity loop state requires d = 2")
    pattern = loops_pattern(lattice)
    eye = np.eye(2, dtype=complex)
    pauli_x = np.array([[0, 1], [1, 0]], dtype=complex)
    mats = [[np.stack([eye, pauli_x]) for _ in st.sites] for st in pattern.strings]
    return StringBondState(lattice, pattern, 2, mats)
