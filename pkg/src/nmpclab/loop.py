"""Real-time compatible closed loop with a one-sample computational delay.

While ``u_k`` drives the plant over ``[k, k+1)``, the controller solves the
problem parameterized by ``z_k = (x_k, u_k)``; its first planned move is the
control applied over ``[k+1, k+2)``. Hence ``z_{k+1} = (f(x_k, u_k), u*_1(z_k))``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cost import CostSpec, stage_cost
from .dynamics import Array, ExtendedState, ModelSpec, extended_step
from .ocp import OcpSolution, SolverConfig, SolverError, cold_start, shift_warm_start, solve


@dataclass(frozen=True)
class ClosedLoopRecord:
    k: int
    z: ExtendedState
    J_star: float
    stage: float
    terminal_derivative_norm: float
    terminal_stage: float
    solver_iterations: int
    cpu_seconds: float
    # cost of the warm start J(shift(u*_{k-1}) | z_k); equals J_star's upper bound
    warm_cost: float = float("nan")
    status: str = "converged"


@dataclass
class ClosedLoopTrace:
    metadata: dict
    records: list[ClosedLoopRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> Array:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def J_star(self) -> Array:
        return self.column("J_star")

    @property
    def stage(self) -> Array:
        return self.column("stage")

    def states(self) -> Array:
        return np.array([r.z.x for r in self.records])

    def controls(self) -> Array:
        return np.array([r.z.u for r in self.records])


@dataclass(frozen=True)
class ControllerState:
    """Previous optimal sequence, or ``None`` before the first solve."""

    previous: Array | None = None
    step: int = 0


class SimulationError(RuntimeError):
    """A closed-loop step failed; ``trace`` holds the records up to the failure."""

    def __init__(self, message: str, step: int, trace: ClosedLoopTrace) -> None:
        super().__init__(message)
        self.step = step
        self.trace = trace


def mpc_step(
    model: ModelSpec,
    spec: CostSpec,
    solver: SolverConfig,
    horizon: int,
    state: ControllerState,
    z_now: ExtendedState,
) -> tuple[Array, ClosedLoopRecord, ControllerState, OcpSolution]:
    """Solve P(z_now) and return the control for the next sampling interval."""
    if state.previous is None:
        warm = cold_start(model, z_now, horizon)
    else:
        warm = shift_warm_start(state.previous)
    t0 = time.perf_counter()
    sol = solve(spec, model, solver, z_now, warm)
    cpu = time.perf_counter() - t0
    seq = sol.sequence
    status = sol.status
    if status == "linesearch_failed" and sol.iterations_used == 0:
        # no progress: the shifted plan is applied open loop
        seq = warm
        status = "fallback"
    warm_cost = sol.history[0] if sol.history else float("nan")
    record = ClosedLoopRecord(
        k=state.step,
        z=z_now,
        J_star=sol.value,
        stage=stage_cost(spec, z_now),
        terminal_derivative_norm=float(np.sqrt(sol.breakdown.terminal_derivative_sq)),
        terminal_stage=sol.breakdown.terminal_stage,
        solver_iterations=sol.iterations_used,
        cpu_seconds=cpu,
        warm_cost=warm_cost,
        status=status,
    )
    return seq[0].copy(), record, ControllerState(seq, state.step + 1), sol


def simulate(
    model: ModelSpec,
    spec: CostSpec,
    solver: SolverConfig,
    z0: ExtendedState,
    steps: int,
    horizon: int,
    metadata: dict | None = None,
) -> ClosedLoopTrace:
    """Run ``steps`` closed-loop iterations from ``z0``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z0.check(model)
    meta = {"model": model.name, "variant": spec.variant.value, "gamma": spec.gamma, "N": horizon, "tau": model.tau}
    meta.update(metadata or {})
    trace = ClosedLoopTrace(meta)
    state = ControllerState()
    z = z0
    for k in range(steps):
        try:
            u_next, record, state, _ = mpc_step(model, spec, solver, horizon, state, z)
            trace.records.append(record)
            if k + 1 < steps:
                z = extended_step(model, z, u_next, step=k)
        except (SolverError, FloatingPointError, ValueError) as exc:
            raise SimulationError(f"closed loop failed at step {k}: {exc}", k, trace) from exc
    return trace
