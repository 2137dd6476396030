"""Energy minimization by sampled gradient descent.

The gradient of the Rayleigh quotient with respect to one site tensor,
with real and imaginary parts treated as independent real coordinates, is

    G = 2 sum_n p(n) conj(b_n) (h_n - <h>)

and because h_n does not depend on which site is optimized, a single batch
yields the gradients of every site tensor simultaneously; all tensors are
updated together.  Backtracking halves the step and grows the sample size
when the energy estimate worsens beyond its error bar; bond dimension
grows at scheduled milestones by embedding the matrices into a larger
block padded with small noise.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .hamiltonian import LocalHamiltonian
from .sampler import (BatchedChains, SampleBatch, collect_batch, _pooled_estimate)
from .state import StringBondState, rescale_strings


@dataclass
class GradientEstimate:
    """Per-slot gradient tensors with the statistics that produced them."""

    slots: list[np.ndarray]
    h_mean: complex
    m: int

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.abs(g) ** 2)) for g in self.slots))

    def to_real_vector(self, state: StringBondState) -> np.ndarray:
        """Pack as real coordinates matching StringBondState.flatten()."""
        parts = []
        for g in self.slots:
            flat = g.ravel()
            if state.real:
                parts.append(flat.real)
            else:
                inter = np.empty(2 * flat.size)
                inter[0::2] = flat.real
                inter[1::2] = flat.imag
                parts.append(inter)
        return np.concatenate(parts)


def sampled_gradient(state: StringBondState, H: LocalHamiltonian,
                     batch: SampleBatch) -> GradientEstimate:
    """Gradient for every slot from one batch's accumulated b sums."""
    if batch.m == 0 or batch.b_sum_pad is None:
        raise ValueError("batch carries no gradient ingredients")
    W = batch.weight_sum
    G_pad = 2.0 * (batch.bh_sum_pad / W - batch.h_mean * (batch.b_sum_pad / W))
    slots = []
    for slot in range(state.n_slots):
        d, r, c = state.shapes[slot]
        g = G_pad[slot, :, :r, :c].copy()
        if state.real:
            g = g.real.astype(complex)
        slots.append(g)
    return GradientEstimate(slots, batch.h_mean, batch.m)


def step(state: StringBondState, gradient: GradientEstimate, eta: float,
         normalize: bool = False, rescale: bool = True) -> StringBondState:
    """Move all site tensors along the negative gradient by eta.

    With normalize=True the parameter displacement has 2-norm exactly eta.
    Raises ValueError on a non-finite update (callers halve the step).
    """
    if eta == 0.0:
        return state
    scale = eta
    if normalize:
        g_norm = gradient.norm()
        if g_norm == 0.0:
            return state
        scale = eta / g_norm
    new = state.copy()
    for slot, (s, t) in enumerate(state.slots):
        upd = state.mats[s][t] - scale * gradient.slots[slot]
        if not np.all(np.isfinite(upd.view(float))):
            raise ValueError("non-finite parameter update")
        new.mats[s][t] = upd
    new._sync_pad()
    if rescale:
        rescale_strings(new)
    return new


def grow_bond_dimension(state: StringBondState, D_new: int, noise: float = 1e-3,
                        seed: int = 0) -> StringBondState:
    """Embed every matrix in the top-left block of a D_new-sized matrix.

    Zero padding preserves closed-string traces exactly; the small noise
    breaks the zero-gradient invariant subspace the padding would create.
    """
    if D_new <= state.D:
        raise ValueError("D_new must exceed the current bond dimension")
    rng = np.random.default_rng(seed)
    mats: list[list[np.ndarray]] = []
    for s, st in enumerate(state.pattern.strings):
        row = []
        for t in range(len(st.sites)):
            old = state.mats[s][t]
            r_new, c_new = StringBondState.slot_shape(len(st.sites), st.closed, t, D_new)
            g = rng.standard_normal((state.d, r_new, c_new))
            if not state.real:
                g = (g + 1j * rng.standard_normal((state.d, r_new, c_new))) / np.sqrt(2)
            block = noise * g.astype(complex)
            block[:, : old.shape[1], : old.shape[2]] = old
            row.append(block)
        mats.append(row)
    return StringBondState(state.lattice, state.pattern, D_new, mats,
                           real=state.real, check_nonzero=False)


def local_eigensolve_update(X: np.ndarray, Y: np.ndarray,
                            shape: tuple[int, int, int]) -> np.ndarray:
    """Smallest generalized eigenvector of (Hermitized X, regularized Y).

    Exact X, Y give the exact single-tensor minimizer; sampled ones are
    fragile because kernel errors in Y distort the minimum, which is why
    gradient descent is the default path.
    """
    dim = X.shape[0]
    Xh = 0.5 * (X + X.conj().T)
    Yh = 0.5 * (Y + Y.conj().T)
    lam = 1e-8 * float(np.trace(Yh).real) / dim
    Yr = Yh + lam * np.eye(dim)
    try:
        _, vecs = scipy.linalg.eigh(Xh, Yr)
    except scipy.linalg.LinAlgError as exc:
        raise RuntimeError(f"Y numerically singular beyond regularization: {exc}")
    return vecs[:, 0].reshape(shape)


@dataclass
class OptimizerConfig:
    eta0: float = 0.1
    normalize_gradient: bool = True
    m_start: int = 2000
    m_growth: float = 2.0
    m_cap: int = 10000
    m_schedule: tuple[tuple[int, int], ...] = ()   # (iteration, M)
    d_schedule: tuple[tuple[int, int], ...] = ()   # (iteration, D)
    grow_noise: float = 1e-3
    max_iter: int = 1000
    window: int = 20
    tol: float = 1e-4            # relative windowed energy change
    backtrack_factor: float = 0.5
    eta_min: float = 1e-6
    n_chains: int = 100
    burn_in: int | None = None   # sweeps before the first iteration
    equilibration: int = 1       # sweeps after each parameter update
    thinning: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if min(self.eta0, self.m_start, self.m_growth, self.max_iter,
               self.window, self.tol, self.n_chains) <= 0:
            raise ValueError("optimizer config values must be positive")
        for sched in (self.m_schedule, self.d_schedule):
            vals = [v for _, v in sched]
            iters = [i for i, _ in sched]
            if sorted(iters) != list(iters) or sorted(vals) != list(vals):
                raise ValueError("schedules must be monotone non-decreasing")


@dataclass
class TrajectoryPoint:
    iteration: int
    energy: float
    stderr: float
    acceptance: float
    eta: float
    m: int
    D: int
    wallclock_s: float


@dataclass
class OptimizeResult:
    state: StringBondState
    trajectory: list[TrajectoryPoint]
    converged: bool


def optimize(state: StringBondState, H: LocalHamiltonian, config: OptimizerConfig,
             callback=None, resume: dict | None = None) -> OptimizeResult:
    """Sample -> gradient -> simultaneous all-site step, iterated.

    Chains persist between iterations (a short equilibration follows every
    parameter update); each iteration reseeds the walker from
    (seed, iteration) so a run checkpointed with its chain configurations
    resumes exactly.  The convergence test (windowed energy change below
    tol) is armed only after the last scheduled D milestone.
    """
    state = state.copy()
    rescale_strings(state)
    rng = np.random.default_rng(config.seed)
    walker = BatchedChains(state, config.n_chains, rng)
    eta = config.eta0
    M = config.m_start
    start_iter = 0
    if resume is None:
        walker.sweep(config.burn_in if config.burn_in is not None
                     else 10 * state.lattice.n_sites)
    else:
        start_iter = int(resume["iteration"])
        eta = float(resume["eta"])
        M = int(resume["m"])
        for it, D_new in config.d_schedule:
            if it <= start_iter and D_new > state.D:
                state = grow_bond_dimension(state, D_new, config.grow_noise,
                                            seed=config.seed + it)
        cfgs = np.asarray(resume["configs"], dtype=np.int8)
        if cfgs.shape[0] != config.n_chains:
            raise ValueError("resume chain count does not match the configuration")
        walker.rebind(state)
        walker.cache = state.make_cache(cfgs)

    d_pending = {it: D for it, D in config.d_schedule}
    m_pending = {it: m for it, m in config.m_schedule}
    trajectory: list[TrajectoryPoint] = []
    energies: list[tuple[float, float]] = []
    converged = False
    t0 = time.perf_counter()

    for it in range(start_iter, config.max_iter):
        walker.rng = np.random.default_rng(np.random.SeedSequence([config.seed, it]))
        if it in d_pending and d_pending[it] > state.D:
            state = grow_bond_dimension(state, d_pending[it], config.grow_noise,
                                        seed=config.seed + it)
            rescale_strings(state)
            walker.rebind(state)
            _repair_dead_chains(walker)
        if it in m_pending:
            M = max(M, m_pending[it])
        rounds = -(-M // config.n_chains)
        walker.sweep(config.equilibration)
        batch, _ = collect_batch(walker, H, rounds, config.thinning, want_b_sums=True)
        grad = sampled_gradient(state, H, batch)
        est = _pooled_estimate(batch.h_series)
        energy, err = float(est.mean.real), est.stderr
        trajectory.append(TrajectoryPoint(it, energy, err, batch.acceptance, eta,
                                          batch.m, state.D,
                                          time.perf_counter() - t0))
        energies.append((energy, err))
        if callback is not None:
            callback(it, state, walker, trajectory[-1])

        if len(energies) > config.window:
            e_past, err_past = energies[-1 - config.window]
            worsening = energy - e_past
            if worsening > 2.0 * math.hypot(err, err_past):
                eta = max(eta * config.backtrack_factor, config.eta_min)
                M = min(int(M * config.m_growth), config.m_cap)
            final_d_done = all(it >= k for k in d_pending)
            if final_d_done and abs(energy - e_past) < config.tol * max(1.0, abs(energy)):
                converged = True
                break

        try:
            state = step(state, grad, eta, normalize=config.normalize_gradient)
        except ValueError:
            eta = max(eta * config.backtrack_factor, config.eta_min)
            continue
        walker.rebind(state)
        _repair_dead_chains(walker)

    return OptimizeResult(state, trajectory, converged)


def _repair_dead_chains(walker: BatchedChains, max_tries: int = 100) -> None:
    """Resample configurations for chains a parameter update left at zero
    amplitude (possible only for fine-tuned states, but cheap to guard)."""
    glog = walker.cache.global_log()
    dead = np.nonzero(np.isneginf(glog))[0]
    if dead.size == 0:
        return
    from .sampler import _find_start_configs
    fresh = _find_start_configs(walker.state, dead.size, walker.rng, max_tries)
    walker.cache.configs[dead] = fresh
    walker.cache.rebuild(dead)
