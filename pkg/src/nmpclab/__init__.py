"""Short-horizon nonlinear MPC with a derivative-penalized terminal cost."""

from .cost import CostBreakdown, CostSpec, SoftConstraint, Variant, cost_gradient, stage_cost, terminal_phi, total_cost
from .dynamics import ExtendedState, IntegrationOverflowError, ModelSpec, Trajectory, extended_step, rk4_step, rollout
from .pvtol import PvtolParams, Scenario, pvtol_cost, pvtol_model

__version__ = "0.1.0"
