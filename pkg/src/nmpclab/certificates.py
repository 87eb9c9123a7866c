"""Runtime checks of the stability inequalities along closed-loop traces.

Every check returns a :class:`CheckResult` holding per-step residuals and
pass flags; :class:`CertificateReport` bundles several of them and writes a
``key: value`` text block per check plus a CSV of the per-step residuals.

Sign convention: a residual is *good* when it is <= 0 for the decrease and
warm-start checks and >= 0 (a slack) for the terminal bound.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cost import CostSpec, TerminalWeights, evaluate, stage_cost
from .dynamics import Array, ExtendedState, ModelSpec
from .loop import ClosedLoopTrace
from .ocp import SolverConfig, SolverError, cold_start, solve

ELL_FLOOR = 1e-3
MU_EQ = 1e6
STATIONARY_TOL = 1e-4
WARM_START_TOL = 1e-9


class CertificateError(ValueError):
    pass


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one check over a trace.

    ``steps`` are the record indices actually checked, ``residuals`` the
    per-step quantity and ``passed`` the per-step verdict. ``summary`` holds
    aggregate estimates (for instance ``beta_hat``).
    """

    name: str
    steps: Array
    residuals: Array
    passed: Array
    summary: dict = field(default_factory=dict)

    @property
    def checked(self) -> int:
        return int(self.steps.size)

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(~self.passed))

    @property
    def violation_rate(self) -> float:
        return self.violations / self.checked if self.checked else 0.0

    @property
    def pass_rate(self) -> float:
        return 1.0 - self.violation_rate

    @property
    def worst_step(self) -> int | None:
        if not self.checked:
            return None
        bad = np.flatnonzero(~self.passed)
        pool = bad if bad.size else np.arange(self.checked)
        # largest residual for "<= 0" checks, smallest slack for ">= 0" checks
        sign = -1.0 if self.summary.get("residual_kind") == "slack" else 1.0
        return int(self.steps[pool[np.argmax(sign * self.residuals[pool])]])

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def as_lines(self) -> list[str]:
        lines = [
            f"check: {self.name}",
            f"checked: {self.checked}",
            f"violations: {self.violations}",
            f"violation_rate: {self.violation_rate:.6g}",
            f"worst_step: {'none' if self.worst_step is None else self.worst_step}",
        ]
        for key, value in self.summary.items():
            lines.append(f"{key}: {_fmt(value)}")
        return lines


@dataclass
class CertificateReport:
    checks: list[CheckResult] = field(default_factory=list)
    label: str = ""

    def add(self, result: CheckResult) -> CheckResult:
        self.checks.append(result)
        return result

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_text(self) -> str:
        blocks = []
        for c in self.checks:
            head = [f"label: {self.label}"] if self.label else []
            blocks.append("\n".join(head + c.as_lines()))
        return "\n\n".join(blocks) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "check", "step", "residual", "passed"])
        for c in self.checks:
            for s, r, p in zip(c.steps, c.residuals, c.passed):
                w.writerow([self.label, c.name, int(s), repr(float(r)), int(bool(p))])
        return buf.getvalue()


def parse_report_text(text: str) -> list[dict[str, str]]:
    """Inverse of :meth:`CertificateReport.to_text` (values stay strings)."""
    out = []
    for block in text.strip().split("\n\n"):
        entry = {}
        for line in block.splitlines():
            key, _, value = line.partition(": ")
            entry[key] = value
        out.append(entry)
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def check_decrease(
    trace: ClosedLoopTrace,
    ell_floor: float = ELL_FLOOR,
    tolerance: float = 1e-6,
    beta_min: float = 0.0,
) -> CheckResult:
    """Decrease of the optimal cost relative to the current stage cost.

    For each consecutive pair with ``l_k > ell_floor`` the residual is
    ``r_k = (J*_{k+1} - J*_k) / l_k``; a step violates the check when
    ``r_k > -beta_min + tolerance``. ``beta_hat = -max r_k``.
    """
    if len(trace) < 2:
        raise CertificateError("decrease check needs a trace with at least two records")
    J = trace.J_star
    ell = trace.stage
    idx = np.flatnonzero(ell[:-1] > ell_floor)
    r = (J[idx + 1] - J[idx]) / ell[idx]
    passed = r <= -beta_min + tolerance
    beta_hat = float(-r.max()) if r.size else float("nan")
    return CheckResult(
        "decrease",
        idx,
        r,
        passed,
        {"beta_hat": beta_hat, "beta_min": beta_min, "tolerance": tolerance, "ell_floor": ell_floor},
    )


def terminal_bound_slack(derivative_norm, terminal_stage, gamma: float) -> Array:
    """``l(z_N)^(1/2) / sqrt(gamma) - |fc(z_N)|``; nonnegative means the bound holds."""
    if not gamma > 0:
        raise CertificateError("terminal bound needs gamma > 0")
    dn = np.asarray(derivative_norm, dtype=float)
    ts = np.asarray(terminal_stage, dtype=float)
    return np.sqrt(np.maximum(ts, 0.0)) / math.sqrt(gamma) - dn


def check_terminal_bounds(
    trace: ClosedLoopTrace,
    gamma: float,
    ell_floor: float = ELL_FLOOR,
    tolerance: float = 0.0,
) -> CheckResult:
    """Terminal-derivative bound at every step.

    The residual is the slack of ``|fc(z*_N)| <= l(z*_N)^(1/2) / sqrt(gamma)``.
    As a diagnostic, ``gamma^2 |fc(z*_N)|^2 / l(z)`` is the smallest value of
    the unknown constant combination ``gamma*alpha + kappa_1`` compatible
    with the quadratic bound; its maximum over steps with ``l(z) > ell_floor``
    is reported as ``implied_constant_max``.
    """
    if not trace.records:
        raise CertificateError("empty trace")
    dn = trace.column("terminal_derivative_norm")
    ts = trace.column("terminal_stage")
    if not (np.all(np.isfinite(dn)) and np.all(np.isfinite(ts))):
        raise CertificateError("trace records lack terminal_derivative_norm or terminal_stage")
    slack = terminal_bound_slack(dn, ts, gamma)
    ell = trace.stage
    mask = ell > ell_floor
    implied = gamma**2 * dn[mask] ** 2 / ell[mask]
    return CheckResult(
        "terminal_bound",
        np.arange(len(trace)),
        slack,
        slack >= -tolerance,
        {
            "residual_kind": "slack",
            "gamma": float(gamma),
            "min_slack": float(slack.min()),
            "implied_constant_max": float(implied.max()) if implied.size else 0.0,
        },
    )


def check_warm_start(trace: ClosedLoopTrace, tolerance: float = WARM_START_TOL) -> CheckResult:
    """``J*(z_k) <= J(shift(u*_{k-1}) | z_k) + tolerance`` for every warm-started step."""
    J = trace.J_star
    warm = trace.column("warm_cost")
    idx = np.flatnonzero(np.isfinite(warm))
    r = J[idx] - warm[idx]
    return CheckResult("warm_start", idx, r, r <= tolerance, {"tolerance": tolerance})


@dataclass(frozen=True)
class ContractionEstimate:
    alpha_hat: float
    kappa_hat: float
    alpha_ratios: tuple[float, ...]
    kappa_ratios: tuple[float, ...]
    accepted: int
    skipped: int
    rejected: int

    def as_lines(self) -> list[str]:
        return [
            "check: contraction",
            f"alpha_hat: {_fmt(self.alpha_hat)}",
            f"kappa_hat: {_fmt(self.kappa_hat)}",
            f"accepted: {self.accepted}",
            f"skipped: {self.skipped}",
            f"rejected: {self.rejected}",
        ]


def estimate_contraction(
    model: ModelSpec,
    spec: CostSpec,
    solver: SolverConfig,
    probes: Iterable[ExtendedState],
    horizon: int,
    *,
    mu_eq: float = MU_EQ,
    stationary_tol: float = STATIONARY_TOL,
    ell_floor: float = ELL_FLOOR,
) -> ContractionEstimate:
    """Empirical ``(alpha, kappa_1)`` from a steady-terminal surrogate problem.

    For each probe ``z`` the surrogate ``min_u S^u(z) + mu_eq |fc(z^u_N)|^2``
    is solved from the constant sequence ``(z.u, ..., z.u)``. Probes whose
    solution is not stationary (``|fc| > stationary_tol``) or whose solve
    fails are skipped; probes with ``l(z) <= ell_floor`` are rejected.
    """
    weights = TerminalWeights(derivative=mu_eq, stage=0.0)
    alphas: list[float] = []
    kappas: list[float] = []
    skipped = rejected = 0
    for z in probes:
        ell0 = stage_cost(spec, z)
        if not ell0 > ell_floor:
            rejected += 1
            continue
        try:
            sol = solve(spec, model, solver, z, cold_start(model, z, horizon), weights=weights)
        except (SolverError, FloatingPointError):
            skipped += 1
            continue
        b = sol.breakdown
        if math.sqrt(b.terminal_derivative_sq) > stationary_tol:
            skipped += 1
            continue
        alphas.append(b.terminal_stage / ell0)
        kappas.append(b.cumulated_stage / ell0)
    return ContractionEstimate(
        alpha_hat=max(alphas) if alphas else float("nan"),
        kappa_hat=max(kappas) if kappas else float("nan"),
        alpha_ratios=tuple(alphas),
        kappa_ratios=tuple(kappas),
        accepted=len(alphas),
        skipped=skipped,
        rejected=rejected,
    )


@dataclass(frozen=True)
class GammaScaling:
    gammas: tuple[float, ...]
    max_norms: tuple[float, ...]
    nonincreasing: bool
    exponent: float
    matched_steps: int

    def as_lines(self) -> list[str]:
        return [
            "check: gamma_scaling",
            "gammas: " + " ".join(f"{g:g}" for g in self.gammas),
            "max_norms: " + " ".join(f"{v:.6g}" for v in self.max_norms),
            f"nonincreasing: {_fmt(self.nonincreasing)}",
            f"exponent: {_fmt(self.exponent)}",
            f"matched_steps: {self.matched_steps}",
        ]


_SCENARIO_KEYS = ("model", "variant", "d", "N", "tau")


def gamma_scaling_probe(traces: Sequence[ClosedLoopTrace], rtol: float = 1e-9) -> GammaScaling:
    """Trend of ``max_k |fc(z*_N)|`` over traces that differ only in gamma.

    Maxima are taken over the common prefix of steps. The exponent is the
    least-squares slope of ``log(max norm)`` against ``log(gamma)``.
    """
    if len(traces) < 3:
        raise CertificateError("gamma scaling needs at least three traces")
    ref = traces[0].metadata
    for t in traces[1:]:
        for key in _SCENARIO_KEYS:
            if key in ref and t.metadata.get(key) != ref[key]:
                raise CertificateError(f"traces differ in {key!r}: {ref[key]!r} vs {t.metadata.get(key)!r}")
    order = sorted(range(len(traces)), key=lambda i: float(traces[i].metadata["gamma"]))
    steps = min(len(t) for t in traces)
    if steps < 1:
        raise CertificateError("empty trace")
    gammas = np.array([float(traces[i].metadata["gamma"]) for i in order])
    norms = np.array([traces[i].column("terminal_derivative_norm")[:steps].max() for i in order])
    nonincreasing = bool(np.all(np.diff(norms) <= rtol * np.maximum(norms[:-1], 1e-300)))
    if np.ptp(gammas) == 0 or np.any(norms <= 0):
        exponent = 0.0
    else:
        exponent = float(np.polyfit(np.log(gammas), np.log(norms), 1)[0])
    return GammaScaling(tuple(gammas), tuple(norms), nonincreasing, exponent, steps)


def gradient_check(
    spec: CostSpec,
    model: ModelSpec,
    z: ExtendedState,
    seq: Array,
    h: float = 1e-6,
    *,
    gradient=None,
) -> float:
    """Max relative error between the adjoint gradient and central differences.

    ``gradient`` replaces the adjoint (a hook used to exercise the failure path).
    """
    seq = np.asarray(seq, dtype=float)
    g = evaluate(spec, model, z.x, z.u, seq)[1] if gradient is None else gradient(seq)
    fd = np.empty_like(seq)
    for idx in np.ndindex(*seq.shape):
        up = seq.copy()
        dn = seq.copy()
        up[idx] += h
        dn[idx] -= h
        fu = evaluate(spec, model, z.x, z.u, up, gradient=False)[0].total
        fl = evaluate(spec, model, z.x, z.u, dn, gradient=False)[0].total
        fd[idx] = (fu - fl) / (2 * h)
    scale = max(1.0, float(np.max(np.abs(fd))))
    return float(np.max(np.abs(g - fd)) / scale)
