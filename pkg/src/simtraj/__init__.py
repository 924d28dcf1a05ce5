"""Trajectory-based approximation of slow invariant manifolds in chemical kinetics."""

from ._backend import NAME as KERNEL_BACKEND
from .criteria import (AnalyticJacobian, CentralDifference, ComplexStep, CriterionKind,
                       DerivativeScheme, directional_second_derivative, local_curvature,
                       objective_integrand, phi_A, phi_B)
from .integrator import IntegrationError, IntegratorOptions, StopCondition, Trajectory, integrate
from .mechanism import (ArrheniusParams, ConservationRelation, Mechanism, Reaction, Species, State,
                        builtin, conservation_residual, davis_skodje, equilibrium_state, h2_6species,
                        jacobian, linear_model, load_mechanism, ozone, rate_constant, rhs)

__version__ = "0.1.0"
from .ildm import DegenerateSplitError, IldmError, IldmPoint, IldmSpec, ildm_curve, ildm_point
from .landscape import (LandscapeAxis, LandscapeGrid, LandscapeResult, distance_to_curve,
                        reference_sim_trajectory, relaxation_defect, scan_landscape, tail_on_progress)
from .simopt import (ConsistencyReport, InfeasibleProblemError, ManifoldResult, OptimizationError,
                     ProblemSpec, SolveResult, SweepSpec, check_solution, consistency_test,
                     reconstruct_point, sweep_manifold)
