"""Metropolis sampling of p(n) = |<n|psi>|^2 and estimators built on it.

Single-flip proposals with acceptance min(1, |ratio|^2) satisfy detailed
balance; zero-amplitude proposals are rejected with probability one and a
chain never starts at (or can reach) a zero-amplitude configuration.

Error bars come from a binning analysis per chain (the reported standard
error is the plateau of the bin-level error), and independent chains are
pooled by inverse-variance weighting.  Everything is reproducible from
(seed, chain count): random draws are ordered (site, level, uniform) per
proposal, one vector draw per step across chains.

For systems with d^N manageable, `enumerate_estimates` sums over all
configurations exactly and serves as the oracle for every sampled
quantity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import LocalHamiltonian, LocalTerm, observable_term
from .state import BatchCache, StringBondState

_MAX_ENUM = 2 ** 20


class SamplingError(RuntimeError):
    pass


@dataclass
class EstimateWithError:
    """Sampled expectation with a binning error bar."""

    mean: complex
    stderr: float
    bin_count: int
    autocorr: float
    n_samples: int

    @property
    def value(self) -> float:
        return float(self.mean.real)


def binning_analysis(series: np.ndarray, min_bins: int = 8) -> tuple[float, int, float]:
    """(stderr, bins at the deepest level, autocorrelation time estimate).

    Blocks the series by repeated pairwise averaging; the reported error is
    the largest bin-level error (the plateau, up to noise).  The
    autocorrelation time follows from the ratio of plateau to naive error.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 2:
        return 0.0, n, 0.0
    errs = []
    b = x
    while b.size >= 2:
        errs.append(float(np.std(b, ddof=1) / np.sqrt(b.size)))
        if b.size < 2 * min_bins:
            break
        if b.size % 2:
            b = b[1:]
        b = 0.5 * (b[0::2] + b[1::2])
    stderr = max(errs)
    tau = 0.5 * ((errs[-1] / errs[0]) ** 2 - 1.0) if errs[0] > 0 else 0.0
    return stderr, b.size, max(tau, 0.0)


def pool_chains(means: np.ndarray, errs: np.ndarray, taus: np.ndarray,
                bins: np.ndarray, n_samples: int) -> EstimateWithError:
    """Inverse-variance pooling of per-chain estimates.

    Chains with exactly zero error (constant series) borrow the smallest
    positive error so weights stay finite; if every chain is constant the
    estimator has zero variance.
    """
    means = np.asarray(means)
    errs = np.asarray(errs, dtype=float)
    if np.all(errs == 0.0):
        return EstimateWithError(complex(means.mean()), 0.0, int(bins.sum()),
                                 float(taus.max(initial=0.0)), n_samples)
    floor = errs[errs > 0].min()
    safe = np.maximum(errs, floor)
    w = 1.0 / safe ** 2
    mean = complex((w * means).sum() / w.sum())
    stderr = float(1.0 / np.sqrt(w.sum()))
    return EstimateWithError(mean, stderr, int(bins.sum()),
                             float(taus.max(initial=0.0)), n_samples)


# -- chains -------------------------------------------------------------------


def _find_start_configs(state: StringBondState, n_chains: int,
                        rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    N, d = state.lattice.n_sites, state.d
    configs = np.zeros((n_chains, N), dtype=np.int8)
    for c in range(n_chains):
        ok = False
        for _ in range(max_tries):
            cand = rng.integers(0, d, N).astype(np.int8)
            if state.amplitude(cand).log_mag != -math.inf:
                configs[c] = cand
                ok = True
                break
        if not ok:
            zeros = np.zeros(N, dtype=np.int8)
            if state.amplitude(zeros).log_mag == -math.inf:
                raise SamplingError(
                    "no nonzero-amplitude starting configuration found "
                    f"after {max_tries} tries"
                )
            configs[c] = zeros
    return configs


@dataclass
class ChainState:
    """One Markov chain: cached configuration, private RNG, statistics."""

    cache: BatchCache
    rng: np.random.Generator
    n_proposed: int = 0
    n_accepted: int = 0

    @property
    def config(self) -> np.ndarray:
        return self.cache.configs[0]

    @property
    def acceptance(self) -> float:
        return self.n_accepted / self.n_proposed if self.n_proposed else 0.0


def init_chain(state: StringBondState, seed: int | np.random.Generator,
               max_tries: int = 100) -> ChainState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    configs = _find_start_configs(state, 1, rng, max_tries)
    return ChainState(state.make_cache(configs), rng)


def metropolis_step(chain: ChainState, state: StringBondState) -> bool:
    """One uniform single-site proposal; returns True when accepted."""
    N, d = state.lattice.n_sites, state.d
    x = int(chain.rng.integers(N))
    cur = int(chain.cache.configs[0, x])
    if d == 2:
        new = 1 - cur
    else:
        new = (cur + 1 + int(chain.rng.integers(d - 1))) % d
    r = chain.cache.flip_ratios_site(x, np.asarray([new]))[0]
    chain.n_proposed += 1
    if chain.rng.random() < abs(r) ** 2:
        chain.cache.apply_flips(np.asarray([0]), np.asarray([x]), np.asarray([new]))
        chain.n_accepted += 1
        return True
    return False


class BatchedChains:
    """Many chains advanced in lockstep with vectorized proposals.

    One generator drives all chains: per proposal step it draws the site
    vector, the level vector (d > 2) and the uniform vector, so trajectories
    are a deterministic function of (seed, chain count).
    """

    def __init__(self, state: StringBondState, n_chains: int,
                 rng: np.random.Generator, max_tries: int = 100):
        self.state = state
        self.n_chains = n_chains
        self.rng = rng
        configs = _find_start_configs(state, n_chains, rng, max_tries)
        self.cache = state.make_cache(configs)
        self.n_proposed = 0
        self.n_accepted = 0
        self._rows = np.arange(n_chains)

    @property
    def acceptance(self) -> float:
        return self.n_accepted / self.n_proposed if self.n_proposed else 0.0

    def reset_counters(self) -> None:
        self.n_proposed = 0
        self.n_accepted = 0

    def rebind(self, state: StringBondState) -> None:
        """Re-attach the chains to updated parameters, keeping configurations."""
        self.state = state
        self.cache = state.make_cache(self.cache.configs)

    def step(self) -> None:
        state, cache = self.state, self.cache
        N, d, C = state.lattice.n_sites, state.d, self.n_chains
        x = self.rng.integers(0, N, C)
        cur = cache.configs[self._rows, x]
        if d == 2:
            new = (1 - cur).astype(np.int8)
        else:
            new = ((cur + 1 + self.rng.integers(0, d - 1, C)) % d).astype(np.int8)
        r = cache.flip_ratios_mixed(x, new)
        u = self.rng.random(C)
        acc = u < np.abs(r) ** 2
        rows = np.nonzero(acc)[0]
        if rows.size:
            cache.apply_flips(rows, x[rows], new[rows])
        self.n_proposed += C
        self.n_accepted += int(rows.size)

    def sweep(self, n_sweeps: int = 1) -> None:
        for _ in range(n_sweeps * self.state.lattice.n_sites):
            self.step()


# -- observables ---------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    name: str
    kind: str  # 'term', 'mean_x', 'mean_z', 'mean_z_sq'
    term: LocalTerm | None = None


def observable_from_spec(spec: str, lattice) -> Observable:
    """Parse 'm_x', 'm_z', 'm_z2', or 'LETTERS:i,j,...' (e.g. 'ZZ:0,1')."""
    spec = spec.strip()
    if spec == "m_x":
        return Observable(spec, "mean_x")
    if spec == "m_z":
        return Observable(spec, "mean_z")
    if spec == "m_z2":
        return Observable(spec, "mean_z_sq")
    if ":" in spec:
        letters, _, rest = spec.partition(":")
        sites = tuple(int(tok) for tok in rest.replace(",", " ").split())
        return Observable(spec, "term", observable_term(letters, sites))
    raise ValueError(f"cannot parse observable {spec!r}")


def term_values(term: LocalTerm, cache: BatchCache) -> np.ndarray:
    """f_n = <n|O|psi>/<n|psi> for a single term, per cached configuration."""
    configs = cache.configs
    out = np.zeros(cache.B, dtype=complex)
    local = configs[:, term.support]
    for mask, table in term.branches:
        coeff = table[tuple(local.T)]
        if mask == 0:
            out += coeff
            continue
        flip_sites = tuple(term.support[i] for i in range(len(term.support))
                           if mask >> i & 1)
        new_levels = 1 - configs[:, flip_sites]
        out += coeff * cache.multi_ratios(flip_sites, new_levels)
    return out


def observable_values(obs: Observable, cache: BatchCache) -> np.ndarray:
    if obs.kind == "term":
        return term_values(obs.term, cache)
    configs = cache.configs
    N = configs.shape[1]
    if obs.kind == "mean_z":
        return (1.0 - 2.0 * configs.mean(axis=1)).astype(complex)
    if obs.kind == "mean_z_sq":
        return ((1.0 - 2.0 * configs.mean(axis=1)) ** 2).astype(complex)
    if obs.kind == "mean_x":
        out = np.zeros(cache.B, dtype=complex)
        for site in range(N):
            new = (1 - configs[:, site]).astype(np.int8)
            out += cache.flip_ratios_site(site, new)
        return out / N
    raise ValueError(f"unknown observable kind {obs.kind}")


# -- batches --------------------------------------------------------------------


@dataclass
class SampleBatch:
    """Per-sample records plus the weighted sums the gradient needs.

    For Monte Carlo batches the weights are uniform (weights=None,
    weight_sum=m); enumeration batches carry explicit p(n) weights.  The
    padded b sums hold sum_n w_n conj(b_n) and sum_n w_n conj(b_n) h_n per
    slot in the (n_slots, d, D, D) layout of the state's parameter pads.
    """

    m: int
    weight_sum: float
    h_mean: complex
    b_sum_pad: np.ndarray | None = None
    bh_sum_pad: np.ndarray | None = None
    h_series: np.ndarray | None = None        # (rounds, chains), MC only
    acceptance: float = 0.0
    weights: np.ndarray | None = None          # enumeration only, aligned with records
    b_records: dict[int, np.ndarray] = field(default_factory=dict)
    a_records: dict[int, np.ndarray] = field(default_factory=dict)
    configs: np.ndarray | None = None


def _b_all_padded(cache: BatchCache, zero_rows: np.ndarray | None = None) -> np.ndarray:
    """b tensors for every slot at once, padded: (B, n_slots, D, D) at the
    configuration's own level (the level index is implicit; accumulation
    scatters by level)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = cache.env_pad.transpose(0, 1, 3, 2) / cache.den[:, :, None, None]
    if zero_rows is not None and zero_rows.any():
        out[zero_rows] = 0.0
    return out


def _accumulate_b_sums(cache: BatchCache, h: np.ndarray, w: np.ndarray,
                       b_sum: np.ndarray, bh_sum: np.ndarray) -> None:
    """Add sum_b w conj(b) and sum_b w conj(b) h into padded accumulators."""
    state = cache.state
    zero_rows = np.asarray(w == 0.0)
    ball = np.conj(_b_all_padded(cache, zero_rows))
    levels = cache.configs[:, state.slot_site]  # (B, n_slots)
    h = np.where(zero_rows, 0.0, h)
    for k in range(state.d):
        m = (levels == k) & ~zero_rows[:, None]
        bk = ball * m[:, :, None, None]
        b_sum[:, k] += np.einsum("b,bsij->sij", w, bk)
        bh_sum[:, k] += np.einsum("b,bsij->sij", w * h, bk)


def _string_env_raw(state: StringBondState, s: int, t: int,
                    configs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Environment of string s at position t and the string trace, computed
    by plain products (no caches, no rescaling; desk-scale helper)."""
    st = state.pattern.strings[s]
    L = len(st.sites)
    cfg = configs[:, state.string_sites[s]]
    B = cfg.shape[0]
    D = state.D
    if st.closed:
        P = np.broadcast_to(np.eye(D, dtype=complex), (B, D, D)).copy()
        Sx = np.broadcast_to(np.eye(D, dtype=complex), (B, D, D)).copy()
    else:
        P = np.ones((B, 1, 1), dtype=complex)
        Sx = np.ones((B, 1, 1), dtype=complex)
    for u in range(t):
        P = P @ state.mats[s][u][cfg[:, u]]
    for u in range(L - 1, t, -1):
        Sx = state.mats[s][u][cfg[:, u]] @ Sx
    env = Sx @ P
    trace = np.einsum("bij,bji->b", state.mats[s][t][cfg[:, t]], env)
    return env, trace


def _excluded_ratio(state: StringBondState, cache: BatchCache, skip_string: int,
                    flip_sites: tuple[int, ...], new_levels: np.ndarray) -> np.ndarray:
    """Product of per-string flip ratios over all strings except one."""
    plan = state.flip_plan(tuple(flip_sites))
    out = np.ones(cache.B, dtype=complex)
    for slot, idx in zip(plan.single_slots, plan.single_idx):
        s, _ = state.slots[slot]
        if s == skip_string:
            continue
        env = cache.env_pad[:, slot]
        Anew = state.param_pad[slot, new_levels[:, idx]]
        num = np.einsum("bij,bji->b", Anew, env)
        out = out * num / cache.den[:, slot]
    for s, tk, steps in plan.groups:
        if s == skip_string:
            continue
        t1 = steps[0][0]
        Pn = cache.prefix_of(s, t1)
        Pd = Pn
        for t, site, sub in steps:
            cur = cache.configs[:, site]
            Ad = state.mats[s][t][cur]
            An = state.mats[s][t][new_levels[:, sub]] if sub >= 0 else Ad
            Pn = Pn @ An
            Pd = Pd @ Ad
        Sfx = cache.suffix_of(s, tk)
        num = np.einsum("bij,bji->b", Pn, Sfx)
        den = np.einsum("bij,bji->b", Pd, Sfx)
        out = out * num / den
    return out


def _record_slot(state: StringBondState, cache: BatchCache, H: LocalHamiltonian,
                 slot: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample b and a tensors for one slot (desk-scale, raw products).

    a_n collects, over every Hamiltonian branch, the linear functional of
    the slot tensor contributed by the flipped configuration; contracting
    a_n with the current tensor reproduces h_n.
    """
    s, t = state.slots[slot]
    d, r, c = state.shapes[slot]
    B = cache.B
    x = int(state.slot_site[slot])
    configs = cache.configs
    env0, tr0 = _string_env_raw(state, s, t, configs)
    if np.any(tr0 == 0):
        raise SamplingError("b/a records require nonzero string traces")
    b_rec = np.zeros((B, d, r, c), dtype=complex)
    b_rec[np.arange(B), configs[:, x]] = env0.transpose(0, 2, 1) / tr0[:, None, None]
    a_rec = np.zeros((B, d, r, c), dtype=complex)
    for term in H.terms:
        local = configs[:, term.support]
        for mask, table in term.branches:
            coeff = table[tuple(local.T)]
            if mask == 0:
                a_rec += coeff[:, None, None, None] * b_rec
                continue
            flip_sites = tuple(term.support[i] for i in range(len(term.support))
                               if mask >> i & 1)
            new_levels = 1 - configs[:, flip_sites]
            excl = _excluded_ratio(state, cache, s, flip_sites, new_levels)
            flipped = configs.copy()
            flipped[:, flip_sites] = new_levels
            envk, _ = _string_env_raw(state, s, t, flipped)
            contrib = np.zeros((B, d, r, c), dtype=complex)
            contrib[np.arange(B), flipped[:, x]] = envk.transpose(0, 2, 1) / tr0[:, None, None]
            a_rec += (coeff * excl)[:, None, None, None] * contrib
    return b_rec, a_rec


# -- sampling front ends ---------------------------------------------------------


def collect_batch(walker: BatchedChains, H: LocalHamiltonian | None,
                  rounds: int, thinning: int = 1,
                  observables: tuple[Observable, ...] = (),
                  want_b_sums: bool = False,
                  record_slots: tuple[int, ...] = (),
                  ) -> tuple[SampleBatch, dict[str, np.ndarray]]:
    """Advance the chains and collect `rounds` retained samples per chain.

    One thinning sweep separates retained samples.  Returns the batch and
    per-observable value series of shape (rounds, chains).
    """
    state = walker.state
    C = walker.n_chains
    walker.reset_counters()
    h_series = np.zeros((rounds, C), dtype=complex)
    obs_series = {o.name: np.zeros((rounds, C), dtype=complex) for o in observables}
    b_sum = bh_sum = None
    if want_b_sums:
        b_sum = np.zeros((state.n_slots, state.d, state.D, state.D), dtype=complex)
        bh_sum = np.zeros_like(b_sum)
    records_b = {slot: [] for slot in record_slots}
    records_a = {slot: [] for slot in record_slots}
    cfg_rows = [] if record_slots else None
    w = np.ones(C)
    for it in range(rounds):
        walker.sweep(thinning)
        if H is not None:
            from .hamiltonian import local_energies
            h = local_energies(H, walker.cache)
            h_series[it] = h
            if want_b_sums:
                _accumulate_b_sums(walker.cache, h, w, b_sum, bh_sum)
            for slot in record_slots:
                br, ar = _record_slot(state, walker.cache, H, slot)
                records_b[slot].append(br)
                records_a[slot].append(ar)
            if record_slots:
                cfg_rows.append(walker.cache.configs.copy())
        for o in observables:
            obs_series[o.name][it] = observable_values(o, walker.cache)
    m = rounds * C
    h_flat = h_series.reshape(-1)
    batch = SampleBatch(
        m=m,
        weight_sum=float(m),
        h_mean=complex(h_flat.mean()) if H is not None else 0j,
        b_sum_pad=b_sum,
        bh_sum_pad=bh_sum,
        h_series=h_series,
        acceptance=walker.acceptance,
        b_records={k: np.concatenate(v) for k, v in records_b.items()},
        a_records={k: np.concatenate(v) for k, v in records_a.items()},
        configs=np.concatenate(cfg_rows) if cfg_rows else None,
    )
    return batch, obs_series


def _pooled_estimate(series: np.ndarray) -> EstimateWithError:
    """Pool a (rounds, chains) value series into one estimate."""
    rounds, C = series.shape
    reals = series.real
    if rounds >= 2:
        means = np.empty(C, dtype=complex)
        errs = np.empty(C)
        taus = np.empty(C)
        bins = np.empty(C, dtype=int)
        for c in range(C):
            means[c] = series[:, c].mean()
            errs[c], bins[c], taus[c] = binning_analysis(reals[:, c])
        return pool_chains(means, errs, taus, bins, rounds * C)
    flat = series.reshape(-1)
    stderr = float(flat.real.std(ddof=1) / np.sqrt(flat.size)) if flat.size > 1 else 0.0
    return EstimateWithError(complex(flat.mean()), stderr, flat.size, 0.0, flat.size)


def sample_energy(state: StringBondState, H: LocalHamiltonian, M: int,
                  burn_in: int | None = None, thinning: int = 1,
                  n_chains: int = 8, seed: int = 0) -> EstimateWithError:
    """Energy estimate from M retained samples pooled across chains.

    burn_in counts sweeps (default 10 N); one thinning sweep separates
    retained samples.  M is rounded up to a multiple of the chain count.
    """
    est, _ = sample_all(state, H, (), M, burn_in, thinning, n_chains, seed)
    return est


def sample_observables(state: StringBondState, H: LocalHamiltonian | None,
                       observables: tuple[Observable, ...], M: int,
                       burn_in: int | None = None, thinning: int = 1,
                       n_chains: int = 8, seed: int = 0) -> dict[str, EstimateWithError]:
    _, obs = sample_all(state, H, observables, M, burn_in, thinning, n_chains, seed)
    return obs


def sample_all(state: StringBondState, H: LocalHamiltonian | None,
               observables: tuple[Observable, ...], M: int,
               burn_in: int | None = None, thinning: int = 1,
               n_chains: int = 8, seed: int = 0,
               ) -> tuple[EstimateWithError | None, dict[str, EstimateWithError]]:
    """Energy and observables from one chain trajectory."""
    if M < 1:
        raise ValueError("M must be positive")
    N = state.lattice.n_sites
    if burn_in is None:
        burn_in = 10 * N
    C = min(n_chains, M)
    rounds = -(-M // C)
    rng = np.random.default_rng(seed)
    walker = BatchedChains(state, C, rng)
    walker.sweep(burn_in)
    batch, obs_series = collect_batch(walker, H, rounds, thinning, observables)
    energy = _pooled_estimate(batch.h_series) if H is not None else None
    obs = {name: _pooled_estimate(series) for name, series in obs_series.items()}
    return energy, obs


# -- exact enumeration ------------------------------------------------------------


@dataclass
class EnumerationResult:
    energy: float
    batch: SampleBatch
    observables: dict[str, float]
    log_norm: float


def enumerate_estimates(state: StringBondState, H: LocalHamiltonian | None,
                        observables: tuple[Observable, ...] = (),
                        record_slots: tuple[int, ...] = (),
                        want_b_sums: bool = True,
                        chunk: int = 4096) -> EnumerationResult:
    """Exact p(n)-weighted expectations by full summation over d^N configs.

    Weights are carried in a streaming log-sum-exp form so amplitudes of
    any scale combine safely.  Record slots require every p(n) > 0
    configuration to have nonzero string traces (always true here).
    """
    from .hamiltonian import local_energies

    N, d = state.lattice.n_sites, state.d
    total = d ** N
    if total > _MAX_ENUM:
        raise ValueError(f"{d}^{N} configurations exceed the enumeration limit")
    shift = -np.inf
    w_sum = 0.0
    h_sum = 0j
    b_sum = bh_sum = None
    if want_b_sums:
        b_sum = np.zeros((state.n_slots, state.d, state.D, state.D), dtype=complex)
        bh_sum = np.zeros_like(b_sum)
    obs_sums = {o.name: 0j for o in observables}
    rec_b = {slot: [] for slot in record_slots}
    rec_a = {slot: [] for slot in record_slots}
    weights_chunks = []
    cfg_chunks = []
    n_kept = 0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        cfgs = np.empty((idx.size, N), dtype=np.int8)
        for i in range(N):
            cfgs[:, i] = (idx // d ** (N - 1 - i)) % d
        cache = state.make_cache(cfgs)
        glog = cache.global_log()
        local_shift = float(np.max(glog))
        if local_shift == -np.inf:
            continue
        new_shift = max(shift, local_shift)
        if new_shift > shift and shift != -np.inf:
            factor = np.exp(2.0 * (shift - new_shift))
            w_sum *= factor
            h_sum *= factor
            if want_b_sums:
                b_sum *= factor
                bh_sum *= factor
            for k in obs_sums:
                obs_sums[k] *= factor
            weights_chunks = [w * factor for w in weights_chunks]
        shift = new_shift
        with np.errstate(invalid="ignore"):
            w = np.where(np.isneginf(glog), 0.0, np.exp(2.0 * (glog - shift)))
        w_sum += float(w.sum())
        if H is not None:
            h = local_energies(H, cache)
            h = np.where(w > 0, h, 0.0)
            h_sum += complex((w * h).sum())
            if want_b_sums:
                _accumulate_b_sums(cache, h, w, b_sum, bh_sum)
            for slot in record_slots:
                keep = w > 0
                sub = BatchCache(state, cfgs[keep])
                br, ar = _record_slot(state, sub, H, slot)
                rec_b[slot].append(br)
                rec_a[slot].append(ar)
        if record_slots:
            keep = w > 0
            weights_chunks.append(w[keep])
            cfg_chunks.append(cfgs[keep])
            n_kept += int(keep.sum())
        for o in observables:
            vals = observable_values(o, cache)
            obs_sums[o.name] += complex((w * np.where(w > 0, vals, 0.0)).sum())
    if w_sum <= 0.0:
        raise SamplingError("wavefunction is identically zero")
    h_mean = h_sum / w_sum
    batch = SampleBatch(
        m=n_kept if record_slots else total,
        weight_sum=w_sum,
        h_mean=complex(h_mean),
        b_sum_pad=b_sum,
        bh_sum_pad=bh_sum,
        weights=np.concatenate(weights_chunks) if record_slots else None,
        b_records={k: np.concatenate(v) for k, v in rec_b.items()},
        a_records={k: np.concatenate(v) for k, v in rec_a.items()},
        configs=np.concatenate(cfg_chunks) if record_slots else None,
    )
    obs = {k: float((v / w_sum).real) for k, v in obs_sums.items()}
    return EnumerationResult(float(h_mean.real), batch, obs, float(shift))


def enumerate_probabilities(state: StringBondState) -> np.ndarray:
    """Normalized p(n) over all configurations in lexicographic order."""
    N, d = state.lattice.n_sites, state.d
    total = d ** N
    if total > 2 ** 16:
        raise ValueError("probability table too large")
    cfgs = np.empty((total, N), dtype=np.int8)
    idx = np.arange(total)
    for i in range(N):
        cfgs[:, i] = (idx // d ** (N - 1 - i)) % d
    glog = state.make_cache(cfgs).global_log()
    shift = np.max(glog)
    p = np.where(np.isneginf(glog), 0.0, np.exp(2.0 * (glog - shift)))
    return p / p.sum()


# -- reweighting and quadratic forms ----------------------------------------------


@dataclass
class ReweightedEstimate:
    estimate: EstimateWithError
    m_eff: float
    trusted: bool


def reweighted_estimate(batch: SampleBatch, slot: int, A_new: np.ndarray,
                        trust_fraction: float = 0.1) -> ReweightedEstimate:
    """Energy at parameters differing from the batch's at one slot tensor.

    Importance weights are |<b_n|A>|^2 relative to the recorded
    distribution; the effective sample size (sum w)^2 / sum w^2 is reported
    and the result is flagged untrusted when it collapses below
    trust_fraction * m.
    """
    if slot not in batch.b_records or slot not in batch.a_records:
        raise KeyError(f"batch has no records for slot {slot}")
    b = batch.b_records[slot]
    a = batch.a_records[slot]
    bA = np.einsum("mdrc,drc->m", b, A_new)
    aA = np.einsum("mdrc,drc->m", a, A_new)
    base = batch.weights if batch.weights is not None else np.ones(b.shape[0])
    w = base * np.abs(bA) ** 2
    if not np.any(w > 0):
        raise SamplingError("all reweighting weights vanish")
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(bA != 0, aA / np.where(bA != 0, bA, 1.0), 0.0)
    mean = complex((w * f).sum() / w.sum())
    var = float((w ** 2 * np.abs(f - mean) ** 2).sum() / w.sum() ** 2)
    m_eff = float(w.sum() ** 2 / (w ** 2).sum())
    return ReweightedEstimate(
        EstimateWithError(mean, math.sqrt(var), b.shape[0], 0.0, b.shape[0]),
        m_eff,
        m_eff >= trust_fraction * batch.m,
    )


def estimate_xy(batch: SampleBatch, slot: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic-form matrices X, Y of the energy in one slot tensor.

    E(A) = (A^H X A) / (A^H Y A) over the batch's distribution, built from
    the recorded b and a vectors: X = sum w conj(b) a^T, Y = sum w conj(b)
    b^T, normalized by the total weight.
    """
    if slot not in batch.b_records or slot not in batch.a_records:
        raise KeyError(f"batch has no records for slot {slot}")
    b = batch.b_records[slot].reshape(batch.b_records[slot].shape[0], -1)
    a = batch.a_records[slot].reshape(b.shape[0], -1)
    w = batch.weights if batch.weights is not None else np.ones(b.shape[0])
    X = np.einsum("m,mu,mv->uv", w, np.conj(b), a) / w.sum()
    Y = np.einsum("m,mu,mv->uv", w, np.conj(b), b) / w.sum()
    return X, Y
