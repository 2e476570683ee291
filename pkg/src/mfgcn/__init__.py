"""Particle solvers and diagnostics for mean-field games with common noise."""

from .assumptions import (AssumptionReport, check_convexity_lipschitz, check_fbsde_monotonicity,
                          check_ll_monotonicity, check_weak_mean_reverting, check_weak_monotonicity)
from .continuation import OperatorSpec, probe_delta, solve_continuation
from .decoupling import decoupling_function, flow_map, verify_decoupling, verify_semigroup
from .errors import NumericError, ValidationError
from .lsmc import FeedbackPolicy, backward_pass, evaluate_policy
from .measure import EmpiricalMeasure1D, MeasureFlow, conditional_empirical, second_moment, w2
from .mfg import MFGResult, SolverConfig, SolverReport, solve_individual, solve_mfg
from .model import (CostSpec, LinearStateSpec, ModelSpec, dx_hbar, e1_costs, hamiltonian, lq_model,
                    minimize_hamiltonian)
from .oracle import LQSpec, RiccatiSolution, analytic_feedback, solve_riccati
from .simulate import InitialLaw, NoiseBundle, ParticleStates, TimeGrid, forward_euler, generate_noise

__version__ = "0.1.0"
