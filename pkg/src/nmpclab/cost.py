"""Stage cost with exact penalties, derivative-penalized terminal cost, total cost.

For a horizon ``N`` and the rolled-out extended states ``z_0 .. z_N``::

    J = Phi(z_N) + S,       S = sum_{i=0}^{N} l(z_i)

    full:           Phi = gamma^2 |fc(z_N)|^2 + gamma l(z_N)
    no_derivative:  Phi = gamma l(z_N)
    nominal:        Phi = |x_N - x_ref|^2_{Qf}

``l`` is a diagonal quadratic tracking term plus L1 exact penalties
``rho * max(0, g(z))`` for every soft constraint ``g(z) <= 0``. Inside ``Phi``
only the quadratic part of ``l`` is used unless ``terminal_penalties`` is set;
a gamma-scaled L1 kink at the horizon end stalls the quasi-Newton solver.
The gradient with respect to the decision sequence is obtained by reverse
accumulation through the RK4 steps.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dynamics import (
    Array,
    ControlSequence,
    ExtendedState,
    ModelSpec,
    as_sequence,
    rollout_with_stages,
    step_jacobians,
)


class Variant(str, enum.Enum):
    NOMINAL = "nominal"
    FULL = "full"
    NO_DERIVATIVE = "no_derivative"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"no_deriv": "no_derivative", "noderiv": "no_derivative", "proposed": "full"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown cost variant {value!r}; expected nominal, full or no-deriv") from None


@dataclass(frozen=True)
class SoftConstraint:
    """Soft constraint ``g(z) <= 0`` penalized by ``weight * max(0, g(z))``.

    ``fun`` maps stacked extended states (K, n+m) to (K,) values and ``grad``
    returns the (K, n+m) gradients of ``g``.
    """

    name: str
    fun: Callable[[Array], Array]
    grad: Callable[[Array], Array]
    weight: float = 1e3

    def __post_init__(self) -> None:
        if not self.weight > 0:
            raise ValueError(f"penalty weight for {self.name!r} must be positive")


def abs_bound(index: int, limit: float, weight: float = 1e3, name: str | None = None) -> SoftConstraint:
    """Soft version of ``|z[index]| <= limit``."""

    def fun(Z):
        return np.abs(Z[:, index]) - limit

    def grad(Z):
        G = np.zeros_like(Z)
        G[:, index] = np.sign(Z[:, index])
        return G

    return SoftConstraint(name or f"|z{index}|<={limit:g}", fun, grad, float(weight))


@dataclass(frozen=True)
class TerminalWeights:
    """Coefficients of the terminal term: ``derivative*|fc|^2 + stage*l + [Qf term]``."""

    derivative: float
    stage: float
    use_qf: bool = False


@dataclass(frozen=True)
class CostSpec:
    gamma: float
    variant: Variant
    Q: Array
    R: Array
    Qf: Array
    x_ref: Array
    u_d: Array
    soft_constraints: tuple[SoftConstraint, ...] = ()
    terminal_penalties: bool = False

    def __post_init__(self) -> None:
        variant = Variant.parse(self.variant)
        object.__setattr__(self, "variant", variant)
        gamma = float(self.gamma)
        if not gamma >= 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if (variant is Variant.NOMINAL) != (gamma == 0.0):
            raise ValueError("variant 'nominal' is used exactly when gamma == 0")
        object.__setattr__(self, "gamma", gamma)
        for name in ("Q", "R", "Qf", "x_ref", "u_d"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.Q.shape != self.x_ref.shape or self.Qf.shape != self.x_ref.shape:
            raise ValueError("Q, Qf and x_ref must have the state dimension")
        if self.R.shape != self.u_d.shape:
            raise ValueError("R and u_d must have the control dimension")
        if min(self.Q.min(), self.R.min(), self.Qf.min()) < 0:
            raise ValueError("cost weights must be nonnegative")
        object.__setattr__(self, "soft_constraints", tuple(self.soft_constraints))

    def terminal_weights(self) -> TerminalWeights:
        if self.variant is Variant.FULL:
            return TerminalWeights(self.gamma**2, self.gamma)
        if self.variant is Variant.NO_DERIVATIVE:
            return TerminalWeights(0.0, self.gamma)
        return TerminalWeights(0.0, 0.0, use_qf=True)


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    terminal_phi: float
    cumulated_stage: float
    terminal_derivative_sq: float
    terminal_stage: float
    conventional_terminal: float


def _stage_terms(spec: CostSpec, xs: Array, us: Array) -> tuple[Array, Array, Array | None]:
    """Per-row stage costs, stacked states and the active-penalty mask."""
    dx = xs - spec.x_ref
    du = us - spec.u_d
    ell = dx * dx @ spec.Q + du * du @ spec.R
    if not spec.soft_constraints:
        return ell, None, None
    Z = np.hstack([xs, us])
    active = np.empty((len(spec.soft_constraints), Z.shape[0]), dtype=bool)
    for j, sc in enumerate(spec.soft_constraints):
        g = sc.fun(Z)
        active[j] = g > 0
        ell = ell + sc.weight * np.maximum(g, 0.0)
    return ell, Z, active


def stage_cost(spec: CostSpec, z: ExtendedState) -> float:
    """Quadratic tracking term plus exact penalties at one extended state."""
    ell, _, _ = _stage_terms(spec, z.x[None, :], z.u[None, :])
    return float(ell[0])


def stage_costs(spec: CostSpec, xs: Array, us: Array) -> Array:
    """Vectorized ``stage_cost`` over stacked rows."""
    return _stage_terms(spec, np.atleast_2d(xs), np.atleast_2d(us))[0]


def _quadratic(spec: CostSpec, x: Array, u: Array) -> float:
    dx = x - spec.x_ref
    du = u - spec.u_d
    return float(dx * dx @ spec.Q + du * du @ spec.R)


def terminal_stage_cost(spec: CostSpec, z_N: ExtendedState) -> float:
    """The ``l`` that enters ``Phi``: with or without the exact penalties."""
    if spec.terminal_penalties:
        return stage_cost(spec, z_N)
    return _quadratic(spec, z_N.x, z_N.u)


def terminal_phi(spec: CostSpec, model: ModelSpec, z_N: ExtendedState) -> float:
    w = spec.terminal_weights()
    if w.use_qf:
        dx = z_N.x - spec.x_ref
        return float(dx * dx @ spec.Qf)
    f = model.fc(z_N.x, z_N.u)
    return float(w.derivative * (f @ f) + w.stage * terminal_stage_cost(spec, z_N))


def evaluate(
    spec: CostSpec,
    model: ModelSpec,
    x0: Array,
    u0: Array,
    seq: Array,
    *,
    gradient: bool = True,
    weights: TerminalWeights | None = None,
) -> tuple[CostBreakdown, Array | None, bytes]:
    """Cost breakdown, optional gradient w.r.t. ``seq`` and active-penalty signature.

    ``weights`` overrides the variant's terminal weighting (used by the
    steady-terminal surrogate in the certificates module).
    """
    w = spec.terminal_weights() if weights is None else weights
    N = seq.shape[0]
    xs, us, stages = rollout_with_stages(model, x0, u0, seq)
    ell, Z, active = _stage_terms(spec, xs, us)
    S = float(ell.sum())
    xN, uN = xs[N], us[N]
    fN = model.fc(xN, uN)
    dsq = float(fN @ fN)
    dxN = xN - spec.x_ref
    psi_f = float(dxN * dxN @ spec.Qf)
    if w.use_qf:
        phi = psi_f
    else:
        ell_phi = float(ell[N]) if spec.terminal_penalties else _quadratic(spec, xN, uN)
        phi = w.derivative * dsq + w.stage * ell_phi
    breakdown = CostBreakdown(
        total=phi + S,
        terminal_phi=phi,
        cumulated_stage=S,
        terminal_derivative_sq=dsq,
        terminal_stage=float(ell[N]),
        conventional_terminal=psi_f,
    )
    signature = b"" if active is None else np.packbits(active).tobytes()
    if not gradient:
        return breakdown, None, signature

    n = model.state_dim
    # d(stage sum)/d(x_i, u_i) for every row, then terminal extras on row N
    gx = 2.0 * (xs - spec.x_ref) * spec.Q
    gu = 2.0 * (us - spec.u_d) * spec.R
    if active is not None:
        gz = np.zeros_like(Z)
        for j, sc in enumerate(spec.soft_constraints):
            if active[j].any():
                gz += (sc.weight * active[j])[:, None] * sc.grad(Z)
        gx = gx + gz[:, :n]
        gu = gu + gz[:, n:]
    if spec.terminal_penalties:
        gxN = (1.0 + w.stage) * gx[N]
        guN = (1.0 + w.stage) * gu[N]
    else:
        gxN = gx[N] + w.stage * 2.0 * (xN - spec.x_ref) * spec.Q
        guN = gu[N] + w.stage * 2.0 * (uN - spec.u_d) * spec.R
    if w.use_qf:
        gxN = gxN + 2.0 * spec.Qf * dxN
    if w.derivative:
        AN, BN = model.jacobian(xN, uN)
        gxN = gxN + 2.0 * w.derivative * (AN.T @ fN)
        guN = guN + 2.0 * w.derivative * (BN.T @ fN)

    grad = np.empty((N, model.control_dim))
    grad[N - 1] = guN
    lam = gxN
    if N > 1:
        Phi, Gam = step_jacobians(model, stages[1:], us[1:N])
        for i in range(N - 1, 0, -1):
            grad[i - 1] = Gam[i - 1].T @ lam + gu[i]
            lam = Phi[i - 1].T @ lam + gx[i]
    return breakdown, grad, signature


def total_cost(spec: CostSpec, model: ModelSpec, z: ExtendedState, seq: ControlSequence) -> CostBreakdown:
    z.check(model)
    seq = as_sequence(seq, model.control_dim)
    return evaluate(spec, model, z.x, z.u, seq, gradient=False)[0]


def cost_gradient(spec: CostSpec, model: ModelSpec, z: ExtendedState, seq: ControlSequence) -> Array:
    """Gradient of ``J`` w.r.t. every entry of ``seq``; shape (N, m)."""
    z.check(model)
    seq = as_sequence(seq, model.control_dim)
    return evaluate(spec, model, z.x, z.u, seq, gradient=True)[1]


def penalty_margin(spec: CostSpec, model: ModelSpec, z: ExtendedState, seq: ControlSequence) -> float:
    """Smallest ``|g|`` over all soft constraints along the rollout (kink distance)."""
    if not spec.soft_constraints:
        return float("inf")
    seq = as_sequence(seq, model.control_dim)
    xs, us, _ = rollout_with_stages(model, z.x, z.u, seq)
    Z = np.hstack([xs, us])
    return float(min(np.min(np.abs(sc.fun(Z))) for sc in spec.soft_constraints))


def diagonal(values: Sequence[float] | float, size: int) -> Array:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    return arr.reshape(size)
