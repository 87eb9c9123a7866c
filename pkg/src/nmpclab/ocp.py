"""Iteration-capped box-constrained minimization of the MPC cost.

The optimizer is a projected limited-memory BFGS method: variables sitting on
a bound with the gradient pushing outward are frozen, the two-loop recursion
runs on the remaining free variables, and a projected Armijo backtracking
search keeps every iterate inside the box. Optionally the curvature memory
is dropped whenever the set of active exact-penalty terms changes; this is
off by default because it stalls progress on problems whose iterates keep
crossing penalty kinks.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cost import CostBreakdown, CostSpec, TerminalWeights, evaluate
from .dynamics import Array, ControlSequence, ExtendedState, ModelSpec, as_sequence


class SolverError(RuntimeError):
    pass


class InvalidWarmStartError(SolverError):
    """The objective is not finite at the (projected) warm start."""


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 15
    memory_size: int = 10
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    gradient_tolerance: float = 1e-8
    max_linesearch_steps: int = 30
    reset_on_penalty_change: bool = False

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.memory_size < 1:
            raise ValueError("memory_size must be >= 1")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if not (self.armijo_c > 0 and self.gradient_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.max_linesearch_steps < 1:
            raise ValueError("max_linesearch_steps must be >= 1")


@dataclass(frozen=True)
class BoxResult:
    x: Array
    f: float
    grad: Array
    iterations: int
    status: str  # "converged" | "max_iterations" | "linesearch_failed"
    history: tuple[float, ...]

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass(frozen=True)
class OcpSolution:
    sequence: ControlSequence
    value: float
    breakdown: CostBreakdown
    iterations_used: int
    converged: bool
    wall_time: float
    status: str = "converged"
    history: tuple[float, ...] = ()


def project_box(seq, lower, upper) -> Array:
    """Clamp every entry of ``seq`` into ``[lower, upper]`` channel-wise."""
    return np.minimum(np.maximum(np.asarray(seq, dtype=float), lower), upper)


def shift_warm_start(prev: ControlSequence) -> ControlSequence:
    """``(u1, ..., uN) -> (u2, ..., uN, uN)``."""
    prev = np.asarray(prev, dtype=float)
    return np.concatenate([prev[1:], prev[-1:]], axis=0)


def projected_gradient(x: Array, g: Array, lower: Array, upper: Array) -> Array:
    return x - np.minimum(np.maximum(x - g, lower), upper)


def _two_loop(g: Array, S: deque, Y: deque, RHO: deque, free: Array) -> Array:
    q = np.where(free, g, 0.0)
    alphas = []
    for s, y, rho in zip(reversed(S), reversed(Y), reversed(RHO)):
        a = rho * np.dot(s[free], q[free])
        q = q - a * np.where(free, y, 0.0)
        alphas.append(a)
    s, y = S[-1], Y[-1]
    yy = np.dot(y[free], y[free])
    scale = np.dot(s[free], y[free]) / yy if yy > 0 else 1.0
    if not scale > 0:
        scale = 1.0
    r = scale * q
    for (s, y, rho), a in zip(zip(S, Y, RHO), reversed(alphas)):
        b = rho * np.dot(y[free], r[free])
        r = r + (a - b) * np.where(free, s, 0.0)
    return -np.where(free, r, 0.0)


def minimize_box(
    fun: Callable[[Array], tuple[float, Array, bytes]],
    x0: Array,
    lower: Array,
    upper: Array,
    config: SolverConfig = SolverConfig(),
    value: Callable[[Array], tuple[float, bytes]] | None = None,
) -> BoxResult:
    """Projected L-BFGS with Armijo backtracking on a flat variable vector.

    ``fun`` returns ``(value, gradient, signature)``. The optional ``value``
    returns ``(value, signature)`` only and is used for line-search trials,
    so the gradient is computed once per accepted step. With
    ``config.reset_on_penalty_change`` a change of ``signature`` between
    accepted iterates clears the curvature memory.
    The returned point is never worse than the projected starting point.
    """
    x = project_box(x0, lower, upper)
    f, g, sig = fun(x)
    if not np.isfinite(f):
        raise InvalidWarmStartError(f"objective is not finite at the warm start (f={f})")
    S: deque = deque(maxlen=config.memory_size)
    Y: deque = deque(maxlen=config.memory_size)
    RHO: deque = deque(maxlen=config.memory_size)
    history = [f]
    status = "max_iterations"
    it = 0
    while it < config.max_iterations:
        pg = projected_gradient(x, g, lower, upper)
        if np.max(np.abs(pg)) <= config.gradient_tolerance:
            status = "converged"
            break
        free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
        d = _two_loop(g, S, Y, RHO, free) if S else None
        if d is None or not np.dot(g, d) < 0:
            S.clear(), Y.clear(), RHO.clear()
            d = -np.where(free, g, 0.0)
            alpha = 1.0 / max(1.0, float(np.linalg.norm(d)))
        else:
            alpha = 1.0
        accepted = False
        for _ in range(config.max_linesearch_steps):
            x_new = project_box(x + alpha * d, lower, upper)
            step = x_new - x
            if not np.any(step):
                break
            if value is None:
                f_new, g_new, sig_new = fun(x_new)
            else:
                f_new, sig_new = value(x_new)
            if np.isfinite(f_new) and f_new <= f + config.armijo_c * np.dot(g, step):
                accepted = True
                if value is not None:
                    f_new, g_new, sig_new = fun(x_new)
                break
            alpha *= config.backtrack
        if not accepted:
            if S:
                # quasi-Newton direction failed; retry once from steepest descent
                S.clear(), Y.clear(), RHO.clear()
                continue
            status = "linesearch_failed"
            break
        y = g_new - g
        sy = float(np.dot(step, y))
        if sig_new != sig and config.reset_on_penalty_change:
            S.clear(), Y.clear(), RHO.clear()
        elif sy > 1e-12 * float(np.linalg.norm(step) * np.linalg.norm(y)):
            S.append(step)
            Y.append(y)
            RHO.append(1.0 / sy)
        x, f, g, sig = x_new, f_new, g_new, sig_new
        history.append(f)
        it += 1
    return BoxResult(x, float(f), g, it, status, tuple(history))


def solve(
    spec: CostSpec,
    model: ModelSpec,
    solver: SolverConfig,
    z: ExtendedState,
    warm_start: ControlSequence,
    *,
    weights: TerminalWeights | None = None,
) -> OcpSolution:
    """Approximately solve ``min_{u in U^N} J(u | z)`` from ``warm_start``."""
    z.check(model)
    warm = as_sequence(warm_start, model.control_dim)
    N, m = warm.shape
    lower = np.tile(model.u_lower, N)
    upper = np.tile(model.u_upper, N)
    x0, u0 = z.x, z.u

    def fun(flat):
        b, g, sig = evaluate(spec, model, x0, u0, flat.reshape(N, m), weights=weights)
        return b.total, g.reshape(-1), sig

    def value(flat):
        b, _, sig = evaluate(spec, model, x0, u0, flat.reshape(N, m), gradient=False, weights=weights)
        return b.total, sig

    t0 = time.perf_counter()
    res = minimize_box(fun, warm.reshape(-1), lower, upper, solver, value)
    wall = time.perf_counter() - t0
    seq = res.x.reshape(N, m)
    breakdown = evaluate(spec, model, x0, u0, seq, gradient=False, weights=weights)[0]
    return OcpSolution(
        sequence=seq,
        value=breakdown.total,
        breakdown=breakdown,
        iterations_used=res.iterations,
        converged=res.converged,
        wall_time=wall,
        status=res.status,
        history=res.history,
    )


def cold_start(model: ModelSpec, z: ExtendedState, N: int) -> ControlSequence:
    """Constant sequence holding the currently applied control, projected."""
    return project_box(np.tile(z.u, (N, 1)), model.u_lower, model.u_upper)
