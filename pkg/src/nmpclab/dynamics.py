"""Continuous-time models, RK4 discretization and extended-state rollouts.

The extended state ``z = (x, u)`` pairs the plant state with the control that
is currently driving it. One extended step advances ``x`` under the stored
control and then replaces the control slot with the next one::

    z_{k+1} = (rk4(x_k, u_k), u_{k+1})
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

# A control sequence is an (N, m) float array; row i is planned for step i+1.
ControlSequence = Array


class IntegrationOverflowError(FloatingPointError):
    """Raised when an integration step produces a non-finite state."""

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ModelSpec:
    """Continuous-time model ``dx/dt = fc(x, u)`` with a control box.

    Parameters
    ----------
    name : label used in trace metadata.
    state_dim, control_dim : n and m.
    fc : vector field. Must broadcast over leading axes, i.e. accept
        ``x`` of shape (..., n) and ``u`` of shape (..., m).
    jacobian : returns ``(dfc/dx, dfc/du)`` with shapes (..., n, n) and
        (..., n, m); same broadcasting contract as ``fc``.
    u_lower, u_upper : per-channel control bounds.
    tau : sampling period; one RK4 step of this size per interval.
    """

    name: str
    state_dim: int
    control_dim: int
    fc: Callable[[Array, Array], Array]
    jacobian: Callable[[Array, Array], tuple[Array, Array]]
    u_lower: Array
    u_upper: Array
    tau: float

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be >= 1")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        lo = np.asarray(self.u_lower, dtype=float).reshape(self.control_dim)
        hi = np.asarray(self.u_upper, dtype=float).reshape(self.control_dim)
        if np.any(lo >= hi):
            raise ValueError("control box requires lower < upper on every channel")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)

    @property
    def nz(self) -> int:
        return self.state_dim + self.control_dim


@dataclass(frozen=True)
class ExtendedState:
    """Plant state together with the control currently applied to it."""

    x: Array
    u: Array

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float).reshape(-1)
        u = np.array(self.u, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("extended state entries must be finite")
        x.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExtendedState):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.u, other.u)

    __hash__ = None  # type: ignore[assignment]

    def as_vector(self) -> Array:
        return np.concatenate([self.x, self.u])

    def check(self, model: ModelSpec) -> None:
        if self.x.shape != (model.state_dim,) or self.u.shape != (model.control_dim,):
            raise ValueError(
                f"extended state has dims ({self.x.size}, {self.u.size}), "
                f"model {model.name!r} expects ({model.state_dim}, {model.control_dim})"
            )


@dataclass(frozen=True)
class Trajectory:
    """N+1 extended states stored as two stacked arrays."""

    xs: Array  # (N+1, n)
    us: Array  # (N+1, m)

    def __len__(self) -> int:
        return self.xs.shape[0]

    def __getitem__(self, i: int) -> ExtendedState:
        return ExtendedState(self.xs[i], self.us[i])

    def __iter__(self) -> Iterator[ExtendedState]:
        for i in range(len(self)):
            yield self[i]

    @property
    def last(self) -> ExtendedState:
        return self[len(self) - 1]

    def stacked(self) -> Array:
        """Rows are ``[x_i, u_i]``."""
        return np.hstack([self.xs, self.us])


def _rk4(fc, x: Array, u: Array, h: float) -> Array:
    k1 = fc(x, u)
    k2 = fc(x + 0.5 * h * k1, u)
    k3 = fc(x + 0.5 * h * k2, u)
    k4 = fc(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(model: ModelSpec, x: Array, u: Array, *, step: int | None = None) -> Array:
    """Advance ``x`` by one sampling period under constant control ``u``."""
    with np.errstate(over="ignore", invalid="ignore"):
        x_next = _rk4(model.fc, np.asarray(x, dtype=float), np.asarray(u, dtype=float), model.tau)
    if not np.all(np.isfinite(x_next)):
        where = "" if step is None else f" at step {step}"
        raise IntegrationOverflowError(f"non-finite state after RK4 step{where}", step)
    return x_next


def extended_step(model: ModelSpec, z: ExtendedState, u_next: Array, *, step: int | None = None) -> ExtendedState:
    """Apply ``F(z, u_next) = (f(z.x, z.u), u_next)``."""
    return ExtendedState(rk4_step(model, z.x, z.u, step=step), u_next)


def rollout(model: ModelSpec, z: ExtendedState, seq: ControlSequence) -> Trajectory:
    """Roll the extended state forward through every element of ``seq``."""
    z.check(model)
    seq = as_sequence(seq, model.control_dim)
    xs, us = rollout_arrays(model, z.x, z.u, seq)
    xs.setflags(write=False)
    us.setflags(write=False)
    return Trajectory(xs, us)


def rollout_arrays(model: ModelSpec, x0: Array, u0: Array, seq: Array) -> tuple[Array, Array]:
    """Array-level rollout used by the cost and solver hot paths."""
    N = seq.shape[0]
    xs = np.empty((N + 1, model.state_dim))
    us = np.empty((N + 1, model.control_dim))
    xs[0] = x0
    us[0] = u0
    us[1:] = seq
    fc, h = model.fc, model.tau
    x = xs[0]
    for i in range(N):
        x = _rk4(fc, x, us[i], h)
        xs[i + 1] = x
    if not np.all(np.isfinite(xs)):
        bad = int(np.argmax(~np.all(np.isfinite(xs), axis=1)))
        raise IntegrationOverflowError(f"non-finite state after RK4 step {bad - 1}", bad - 1)
    return xs, us


def step_jacobians(model: ModelSpec, stages: Array, us: Array) -> tuple[Array, Array]:
    """Exact Jacobians of the RK4 map for a batch of steps.

    ``stages`` holds the (K, 4, n) RK4 stage points of K steps taken with
    the (K, m) controls ``us``. Returns ``dx+/dx`` (K, n, n) and
    ``dx+/du`` (K, n, m), obtained by chaining the stage Jacobians.
    """
    K, _, n = stages.shape
    m = us.shape[-1]
    h = model.tau
    A, B = model.jacobian(stages.reshape(K * 4, n), np.repeat(us, 4, axis=0))
    A = np.asarray(A).reshape(K, 4, n, n)
    B = np.asarray(B).reshape(K, 4, n, m)
    eye = np.eye(n)
    dk1x = A[:, 0]
    dk2x = A[:, 1] + 0.5 * h * (A[:, 1] @ dk1x)
    dk3x = A[:, 2] + 0.5 * h * (A[:, 2] @ dk2x)
    dk4x = A[:, 3] + h * (A[:, 3] @ dk3x)
    dk1u = B[:, 0]
    dk2u = B[:, 1] + 0.5 * h * (A[:, 1] @ dk1u)
    dk3u = B[:, 2] + 0.5 * h * (A[:, 2] @ dk2u)
    dk4u = B[:, 3] + h * (A[:, 3] @ dk3u)
    Phi = eye + (h / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    Gam = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return Phi, Gam


def rollout_with_stages(model: ModelSpec, x0: Array, u0: Array, seq: Array) -> tuple[Array, Array, Array]:
    """Rollout that also returns the (N, 4, n) RK4 stage points for the adjoint."""
    N = seq.shape[0]
    n = model.state_dim
    xs = np.empty((N + 1, n))
    us = np.empty((N + 1, model.control_dim))
    stages = np.empty((N, 4, n))
    xs[0] = x0
    us[0] = u0
    us[1:] = seq
    fc, h = model.fc, model.tau
    x = xs[0]
    for i in range(N):
        u = us[i]
        k1 = fc(x, u)
        p2 = x + 0.5 * h * k1
        k2 = fc(p2, u)
        p3 = x + 0.5 * h * k2
        k3 = fc(p3, u)
        p4 = x + h * k3
        k4 = fc(p4, u)
        stages[i, 0] = x
        stages[i, 1] = p2
        stages[i, 2] = p3
        stages[i, 3] = p4
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        xs[i + 1] = x
    if not np.all(np.isfinite(xs)):
        bad = int(np.argmax(~np.all(np.isfinite(xs), axis=1)))
        raise IntegrationOverflowError(f"non-finite state after RK4 step {bad - 1}", bad - 1)
    return xs, us, stages


def as_sequence(seq, m: int) -> Array:
    arr = np.array(seq, dtype=float)
    if arr.ndim == 1 and m == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != m:
        raise ValueError(f"control sequence must have shape (N, {m}), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("control sequence must have N >= 1 elements")
    return arr


def linear_model(
    A,
    B,
    u_lower,
    u_upper,
    tau: float,
    name: str = "linear",
) -> ModelSpec:
    """Continuous-time LTI model ``dx/dt = A x + B u`` (solver test bed)."""
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float)
    n, m = B.shape

    def fc(x, u):
        return x @ A.T + u @ B.T

    def jac(x, u):
        lead = np.shape(x)[:-1]
        return np.broadcast_to(A, lead + (n, n)), np.broadcast_to(B, lead + (n, m))

    return ModelSpec(name, n, m, fc, jac, np.asarray(u_lower, float), np.asarray(u_upper, float), tau)


def double_integrator(tau: float = 0.1, bound: float = 1.0) -> ModelSpec:
    """Scalar double integrator ``p'' = u`` with ``|u| <= bound``."""
    return linear_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], [-bound], [bound], tau, "double_integrator")
