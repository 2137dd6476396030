"""Variational Monte Carlo with string-bond trial wavefunctions."""

from .lattice import Bond, Lattice, build_lattice, plaquettes
from .patterns import (PatternError, String, StringPattern, lines_pattern,
                       load_pattern, loops_pattern, parse_pattern,
                       pattern_from_names, single_site_pattern, snake_pattern)
from .state import (BatchCache, LogAmplitude, StringBondState,
                    ZeroAmplitudeError, apply_flip, b_vector,
                    parity_loop_state, ratio, rescale_strings)
from .hamiltonian import (LocalHamiltonian, LocalTerm, build_frustrated_xx,
                          build_tfi, default_frustration, local_energies,
                          local_energy, observable_term, validate_frustration)
from .sampler import (BatchedChains, ChainState, EstimateWithError,
                      Observable, SampleBatch, SamplingError, binning_analysis,
                      collect_batch, enumerate_estimates,
                      enumerate_probabilities, estimate_xy, init_chain,
                      metropolis_step, observable_from_spec,
                      reweighted_estimate, sample_all, sample_energy,
                      sample_observables)
from .optimizer import (GradientEstimate, OptimizeResult, OptimizerConfig,
                        grow_bond_dimension, local_eigensolve_update, optimize,
                        sampled_gradient, step)
from .exact import (DenseState, all_configs, apply_hamiltonian, config_index,
                    dense_expectation, dense_hamiltonian, dense_wavefunction,
                    exact_ground_energy, fd_gradient, tfi_chain_ground_energy)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
