"""Brute-force reference implementations for desk-scale verification.

Everything here is written independently of the cached engine paths: dense
amplitudes come from plain matrix products without prefix/suffix caches or
rescaling, and expectation values act on the dense vector directly.  These
are the oracles the sampled and enumerated estimators are tested against.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np
import scipy.sparse.linalg as spla

from .hamiltonian import LocalHamiltonian
from .state import StringBondState

_MAX_DENSE = 2 ** 20


@dataclass
class DenseState:
    """Explicit wavefunction: one complex amplitude per configuration."""

    amplitudes: np.ndarray
    norm2: float


def all_configs(n_sites: int, d: int = 2) -> np.ndarray:
    """All d^N configurations in lexicographic order (site 0 most significant)."""
    if d ** n_sites > _MAX_DENSE:
        raise ValueError(f"{d}^{n_sites} configurations exceed the dense limit")
    idx = np.arange(d ** n_sites)
    cfg = np.empty((idx.size, n_sites), dtype=np.int8)
    for i in range(n_sites):
        cfg[:, i] = (idx // d ** (n_sites - 1 - i)) % d
    return cfg


def config_index(config: np.ndarray, d: int = 2) -> int:
    idx = 0
    for level in np.asarray(config):
        idx = idx * d + int(level)
    return idx


def _naive_amplitude(state: StringBondState, config: np.ndarray) -> complex:
    """Plain per-string matrix products; no caches, no log-domain tricks."""
    amp = 1.0 + 0j
    for s, st in enumerate(state.pattern.strings):
        mats = [state.mats[s][t][int(config[site])] for t, site in enumerate(st.sites)]
        prod = reduce(np.dot, mats)
        amp *= np.trace(prod)
    return complex(amp)


def dense_wavefunction(state: StringBondState) -> DenseState:
    """Evaluate <n|psi> for every configuration in lexicographic order."""
    N, d = state.lattice.n_sites, state.d
    configs = all_configs(N, d)
    amps = np.empty(configs.shape[0], dtype=complex)
    for i, cfg in enumerate(configs):
        amps[i] = _naive_amplitude(state, cfg)
    norm2 = float(np.vdot(amps, amps).real)
    if norm2 <= 0.0:
        raise ValueError("dense wavefunction has zero norm")
    return DenseState(amps, norm2)


def apply_hamiltonian(H: LocalHamiltonian, vec: np.ndarray) -> np.ndarray:
    """H @ vec through term-wise branch application on the dense vector."""
    N = H.lattice.n_sites
    n = vec.shape[0]
    idx = np.arange(n)
    out = np.zeros(n, dtype=np.promote_types(vec.dtype, complex))
    site_bit = [1 << (N - 1 - i) for i in range(N)]
    for term in H.terms:
        levels = tuple((idx >> (N - 1 - s)) & 1 for s in term.support)
        for mask, table in term.branches:
            coeff = table[levels]
            xor = 0
            for i, s in enumerate(term.support):
                if mask >> i & 1:
                    xor |= site_bit[s]
            out += coeff * vec[idx ^ xor]
    return out


def dense_hamiltonian(H: LocalHamiltonian) -> np.ndarray:
    n = 2 ** H.lattice.n_sites
    if n > 2 ** 14:
        raise ValueError("dense Hamiltonian matrix too large; use apply_hamiltonian")
    mat = np.zeros((n, n), dtype=complex)
    eye = np.eye(n, dtype=complex)
    for j in range(n):
        mat[:, j] = apply_hamiltonian(H, eye[:, j])
    return mat


def dense_expectation(state: StringBondState | DenseState, H: LocalHamiltonian) -> float:
    """Rayleigh quotient <psi|H|psi>/<psi|psi> on the dense vector."""
    dense = state if isinstance(state, DenseState) else dense_wavefunction(state)
    v = dense.amplitudes
    return float(np.vdot(v, apply_hamiltonian(H, v)).real / dense.norm2)


def exact_ground_energy(H: LocalHamiltonian, tol: float = 1e-8) -> float:
    """Smallest eigenvalue of H; dense for small systems, Lanczos above.

    The iterative path verifies the residual ||Hv - Ev|| <= tol and raises
    on non-convergence, reporting the residual achieved.
    """
    N = H.lattice.n_sites
    n = 2 ** N
    if n > _MAX_DENSE:
        raise ValueError(f"2^{N} states exceed the solver limit")
    if n <= 2 ** 10:
        return float(np.linalg.eigvalsh(dense_hamiltonian(H))[0])
    op = spla.LinearOperator((n, n), matvec=lambda v: apply_hamiltonian(H, v),
                             dtype=complex)
    v0 = np.random.default_rng(0).standard_normal(n)
    vals, vecs = spla.eigsh(op, k=1, which="SA", v0=v0, maxiter=5000,
                            ncv=min(n, 64), tol=1e-12)
    energy, vec = float(vals[0]), vecs[:, 0]
    residual = float(np.linalg.norm(apply_hamiltonian(H, vec) - energy * vec))
    if residual > tol * max(1.0, abs(energy)):
        raise RuntimeError(
            f"Lanczos did not converge: residual {residual:.3e} exceeds {tol:.1e}"
        )
    return energy


def fd_gradient(state: StringBondState, H: LocalHamiltonian, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of the dense Rayleigh quotient over every
    real parameter coordinate; same packing as StringBondState.flatten().

    Runs in extended precision so the difference quotient is not limited by
    double-rounding cancellation.  The dense vector under a single-slot
    change is recomputed from plain per-string scans (amplitudes are linear
    in each slot tensor), independent of the engine's caches.
    """
    ext = np.clongdouble
    N, d = state.lattice.n_sites, state.d
    configs = all_configs(N, d)
    n_cfg = configs.shape[0]
    mats_ext = [[m.astype(ext) for m in row] for row in state.mats]

    def scan_string(s: int) -> np.ndarray:
        st = state.pattern.strings[s]
        cfg = configs[:, state.string_sites[s]]
        D = state.D
        if st.closed:
            P = np.broadcast_to(np.eye(D, dtype=ext), (n_cfg, D, D)).copy()
        else:
            P = np.ones((n_cfg, 1, 1), dtype=ext)
        for t in range(len(st.sites)):
            P = P @ mats_ext[s][t][cfg[:, t]]
        return np.einsum("mii->m", P)

    traces = np.stack([scan_string(s) for s in range(state.n_strings)])
    S = state.n_strings
    cum_left = np.ones((S + 1, n_cfg), dtype=ext)
    for s in range(S):
        cum_left[s + 1] = cum_left[s] * traces[s]
    cum_right = np.ones((S + 1, n_cfg), dtype=ext)
    for s in range(S - 1, -1, -1):
        cum_right[s] = cum_right[s + 1] * traces[s]

    def slot_env(s: int, t: int) -> np.ndarray:
        st = state.pattern.strings[s]
        cfg = configs[:, state.string_sites[s]]
        L = len(st.sites)
        D = state.D
        if st.closed:
            P = np.broadcast_to(np.eye(D, dtype=ext), (n_cfg, D, D)).copy()
            Sx = P.copy()
        else:
            P = np.ones((n_cfg, 1, 1), dtype=ext)
            Sx = np.ones((n_cfg, 1, 1), dtype=ext)
        for u in range(t):
            P = P @ mats_ext[s][u][cfg[:, u]]
        for u in range(L - 1, t, -1):
            Sx = mats_ext[s][u][cfg[:, u]] @ Sx
        return Sx @ P

    grad_parts = []
    for slot, (s, t) in enumerate(state.slots):
        env = slot_env(s, t)
        other = cum_left[s] * cum_right[s + 1]
        site = int(state.slot_site[slot])
        lv = configs[:, site]
        A = mats_ext[s][t]
        shape = state.shapes[slot]

        def energy(A_mod: np.ndarray) -> np.longdouble:
            amps = other * np.einsum("mij,mji->m", A_mod[lv], env)
            Hv = apply_hamiltonian(H, amps)
            return (np.vdot(amps, Hv) / np.vdot(amps, amps)).real

        g = np.empty(int(np.prod(shape)) * (1 if state.real else 2))
        pos = 0
        for index in np.ndindex(*shape):
            for part in ((1.0,) if state.real else (1.0, 1.0j)):
                Ap = A.copy()
                Ap[index] += eps * part
                Am = A.copy()
                Am[index] -= eps * part
                g[pos] = float((energy(Ap) - energy(Am)) / (2.0 * eps))
                pos += 1
        grad_parts.append(g)
    return np.concatenate(grad_parts)


def tfi_chain_ground_energy(n_sites: int, J: float, h: float) -> float:
    """Ground energy of the periodic transverse-field Ising chain from the
    free-fermion spectrum (even-parity sector momenta)."""
    ks = (2.0 * np.pi / n_sites) * (np.arange(n_sites) + 0.5)
    eps = 2.0 * np.sqrt(J * J + h * h - 2.0 * J * h * np.cos(ks))
    return float(-0.5 * np.sum(eps))
