"""Contractive stochastic approximation driven by finite Markov chains."""

__version__ = "0.1.0"

from .chain import (ChainError, MixingProfile, StationaryDistribution, TransitionKernel,  # noqa: E402
                    is_ergodic, kernel_powers, mixing_profile, n_step_kernel, sample_path,
                    stationary_distribution)
from .engine import (DivergenceError, TrajectoryRecord, UpdateMap, off_policy_td_map,  # noqa: E402
                     q_learning_map, run_sa, run_skeleton)
from .lyapunov import MoreauConfig, moreau_grad, moreau_value, norm_m, pick_xi  # noqa: E402
from .mdp import (Mdp, Policy, induced_triple_chain, importance_ratios, random_mdp,  # noqa: E402
                  solve_q_star, solve_v_pi)
from .schedule import (SkeletonAnchors, StepSizeSchedule, compute_anchors, step_size,  # noqa: E402
                       step_sizes, verify_lemma_lr_bounds)
