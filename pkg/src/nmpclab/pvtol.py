"""Planar vertical take-off and landing (PVTOL) aircraft benchmark.

State ``x = (y1, y2, theta, y1_dot, y2_dot, theta_dot)``, control
``u = (u1, u2)``, normalized dynamics::

    y1''    = -u1 sin(theta) + mu u2 cos(theta)
    y2''    =  u1 cos(theta) + mu u2 sin(theta) - 1
    theta'' =  u2

Hover is ``u = (1, 0)`` at ``theta = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .cost import CostSpec, SoftConstraint, Variant, abs_bound
from .dynamics import Array, ExtendedState, ModelSpec

TARGETS = (0.2, 0.5, 1.0, 2.0)
GAMMAS = (1.0, 5.0, 50.0, 100.0, 1000.0, 5000.0)
Q_DIAG = (100.0, 10.0, 10.0, 1.0, 1.0, 1.0)
R_DIAG = (1.0, 1.0)
QF_SCALE = 100.0
HOVER = (1.0, 0.0)

# soft-constraint channel name -> state index
VELOCITY_CHANNELS = {"y1_dot": 3, "y2_dot": 4, "theta_dot": 5}


@dataclass(frozen=True)
class PvtolParams:
    mu: float = 0.4
    u_lower: tuple[float, float] = (-1.5, -0.5)
    u_upper: tuple[float, float] = (1.5, 0.5)
    velocity_limits: dict = field(
        default_factory=lambda: {"y1_dot": 0.3, "y2_dot": 0.3, "theta_dot": 0.2}
    )
    penalty_weight: float = 1e3
    terminal_penalties: bool = False
    tau: float = 0.1
    horizon: int = 15

    def __post_init__(self) -> None:
        unknown = set(self.velocity_limits) - set(VELOCITY_CHANNELS)
        if unknown:
            raise ValueError(f"unknown velocity channels {sorted(unknown)}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.penalty_weight > 0:
            raise ValueError(f"penalty_weight must be positive, got {self.penalty_weight}")


@dataclass(frozen=True)
class Scenario:
    """Move from ``x0`` to ``x_ref = (d, d, 0, 0, 0, 0)``."""

    d: float
    steps: int = 300
    x0: tuple[float, ...] = (0.0,) * 6
    u0: tuple[float, float] = HOVER

    def __post_init__(self) -> None:
        if not self.d > 0:
            raise ValueError(f"target offset d must be positive, got {self.d}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if len(self.x0) != 6 or len(self.u0) != 2:
            raise ValueError("x0 needs 6 entries and u0 needs 2")

    @property
    def x_ref(self) -> Array:
        return np.array([self.d, self.d, 0.0, 0.0, 0.0, 0.0])

    @property
    def u_d(self) -> Array:
        return np.array(HOVER)

    def initial_state(self) -> ExtendedState:
        return ExtendedState(np.array(self.x0, dtype=float), np.array(self.u0, dtype=float))


def pvtol_fc(params: PvtolParams | float, x: Array, u: Array) -> Array:
    """Time derivative of the PVTOL state; broadcasts over leading axes."""
    mu = params.mu if isinstance(params, PvtolParams) else float(params)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 1 and u.ndim == 1:
        # scalar fast path for the rollout loop
        _, _, th, v1, v2, w = x.tolist()
        u1, u2 = u.tolist()
        s, c = math.sin(th), math.cos(th)
        return np.array((v1, v2, w, -u1 * s + mu * u2 * c, u1 * c + mu * u2 * s - 1.0, u2))
    th = x[..., 2]
    s, c = np.sin(th), np.cos(th)
    u1, u2 = u[..., 0], u[..., 1]
    out = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (6,))
    out[..., 0:3] = x[..., 3:6]
    out[..., 3] = -u1 * s + mu * u2 * c
    out[..., 4] = u1 * c + mu * u2 * s - 1.0
    out[..., 5] = u2
    return out


def pvtol_jacobian(params: PvtolParams | float, x: Array, u: Array) -> tuple[Array, Array]:
    """``(dfc/dx, dfc/du)`` with shapes (..., 6, 6) and (..., 6, 2)."""
    mu = params.mu if isinstance(params, PvtolParams) else float(params)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    th = x[..., 2]
    s, c = np.sin(th), np.cos(th)
    u1, u2 = u[..., 0], u[..., 1]
    A = np.zeros(lead + (6, 6))
    A[..., 0, 3] = 1.0
    A[..., 1, 4] = 1.0
    A[..., 2, 5] = 1.0
    A[..., 3, 2] = -u1 * c - mu * u2 * s
    A[..., 4, 2] = -u1 * s + mu * u2 * c
    B = np.zeros(lead + (6, 2))
    B[..., 3, 0] = -s
    B[..., 3, 1] = mu * c
    B[..., 4, 0] = c
    B[..., 4, 1] = mu * s
    B[..., 5, 1] = 1.0
    return A, B


def pvtol_model(params: PvtolParams | None = None) -> ModelSpec:
    params = params or PvtolParams()
    return ModelSpec(
        name="pvtol",
        state_dim=6,
        control_dim=2,
        fc=partial(pvtol_fc, params.mu),
        jacobian=partial(pvtol_jacobian, params.mu),
        u_lower=np.array(params.u_lower, dtype=float),
        u_upper=np.array(params.u_upper, dtype=float),
        tau=params.tau,
    )


def velocity_constraints(params: PvtolParams) -> tuple[SoftConstraint, ...]:
    return tuple(
        abs_bound(VELOCITY_CHANNELS[name], limit, params.penalty_weight, f"|{name}|<={limit:g}")
        for name, limit in params.velocity_limits.items()
    )


def pvtol_cost(
    scenario: Scenario,
    variant: Variant | str = Variant.FULL,
    gamma: float = 1000.0,
    params: PvtolParams | None = None,
) -> CostSpec:
    """Cost with Q = diag(100, 10, 10, 1, 1, 1), R = I, Qf = 100 Q."""
    params = params or PvtolParams()
    variant = Variant.parse(variant)
    if variant is Variant.NOMINAL:
        gamma = 0.0
    Q = np.array(Q_DIAG)
    return CostSpec(
        gamma=gamma,
        variant=variant,
        Q=Q,
        R=np.array(R_DIAG),
        Qf=QF_SCALE * Q,
        x_ref=scenario.x_ref,
        u_d=scenario.u_d,
        soft_constraints=velocity_constraints(params),
        terminal_penalties=params.terminal_penalties,
    )


def max_horizon_displacement(params: PvtolParams | None = None) -> float:
    """Largest position change over one horizon under the translational speed limits."""
    params = params or PvtolParams()
    limits = [params.velocity_limits[k] for k in ("y1_dot", "y2_dot") if k in params.velocity_limits]
    if not limits:
        return math.inf
    return max(limits) * params.horizon * params.tau


def horizon_reachable(d: float, params: PvtolParams | None = None) -> bool:
    return d <= max_horizon_displacement(params)
