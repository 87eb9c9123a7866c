"""Experiment orchestration behind the command-line tool.

A sweep is a list of independent :class:`~nmpclab.config.Cell` tasks. Each
task simulates one closed loop, writes its trace and CPU sidecar, and returns
a deterministic summary row plus a timing row. Aggregation happens in the
parent process after all tasks finish.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import certificates as cert
from .config import Cell, ExperimentConfig
from .cost import CostSpec, Variant, evaluate, penalty_margin
from .dynamics import ExtendedState, ModelSpec
from .loop import ClosedLoopTrace, SimulationError, simulate
from .ocp import SolverConfig
from .plots import panel_name, plot_cpu_histogram, plot_target_panel
from .pvtol import pvtol_cost, pvtol_model
from .traceio import (
    SUMMARY_SCHEMA,
    TIMING_SCHEMA,
    cpu_name,
    read_trace,
    trace_name,
    write_cpu,
    write_table,
    write_trace,
)

SUCCESS_STAGE = 1e-2
HIST_NAME = "fig2_cpu_hist.svg"
SUMMARY_COLUMNS = (
    "variant", "gamma", "d", "steps", "records", "status", "reason", "success",
    "final_stage", "final_J_star", "min_stage", "decrease_checked", "decrease_violations",
    "terminal_bound_violations", "warm_start_violations", "fallback_steps", "trace_file",
)
TIMING_COLUMNS = ("variant", "gamma", "d", "solves", "cpu_mean_s", "cpu_p95_s", "cpu_max_s", "wall_s")


def build(cfg: ExperimentConfig, cell: Cell) -> tuple[ModelSpec, CostSpec, ExtendedState]:
    scenario = cfg.scenario(cell.d)
    model = pvtol_model(cfg.params)
    spec = pvtol_cost(scenario, cell.variant, cell.gamma, cfg.params)
    return model, spec, scenario.initial_state()


def simulate_cell(cfg: ExperimentConfig, cell: Cell) -> tuple[ClosedLoopTrace, str | None]:
    """Closed loop for one cell; on failure returns the partial trace and the reason."""
    model, spec, z0 = build(cfg, cell)
    meta = {"d": cell.d, "seed": cfg.seed}
    try:
        return simulate(model, spec, cfg.solver, z0, cell.steps, cfg.params.horizon, meta), None
    except SimulationError as exc:
        return exc.trace, str(exc)


def summarize(trace: ClosedLoopTrace, cell: Cell, cfg: ExperimentConfig, reason: str | None, name: str) -> dict:
    row = {
        "variant": cell.variant.value,
        "gamma": cell.gamma,
        "d": cell.d,
        "steps": cell.steps,
        "records": len(trace),
        "status": "failed" if reason else "ok",
        "reason": reason or "",
        "trace_file": name,
    }
    if not trace.records:
        return row | {"success": 0}
    stage = trace.stage
    row["final_stage"] = float(stage[-1])
    row["final_J_star"] = float(trace.J_star[-1])
    row["min_stage"] = float(stage.min())
    row["success"] = int(reason is None and stage[-1] < SUCCESS_STAGE)
    if len(trace) >= 2:
        dec = cert.check_decrease(trace, cfg.check.ell_floor, cfg.check.decrease_tolerance, cfg.check.beta_min)
        row["decrease_checked"] = dec.checked
        row["decrease_violations"] = dec.violations
    if cell.gamma > 0:
        row["terminal_bound_violations"] = cert.check_terminal_bounds(trace, cell.gamma, cfg.check.ell_floor).violations
    row["warm_start_violations"] = cert.check_warm_start(trace).violations
    row["fallback_steps"] = sum(r.status == "fallback" for r in trace.records)
    return row


def timing_row(trace: ClosedLoopTrace, cell: Cell, wall: float) -> dict:
    cpu = trace.column("cpu_seconds") if trace.records else np.zeros(0)
    return {
        "variant": cell.variant.value,
        "gamma": cell.gamma,
        "d": cell.d,
        "solves": int(cpu.size),
        "cpu_mean_s": float(cpu.mean()) if cpu.size else float("nan"),
        "cpu_p95_s": float(np.percentile(cpu, 95)) if cpu.size else float("nan"),
        "cpu_max_s": float(cpu.max()) if cpu.size else float("nan"),
        "wall_s": wall,
    }


def run_cell(cfg: ExperimentConfig, cell: Cell, out_dir: str | Path) -> tuple[dict, dict]:
    """Simulate, persist and summarize one cell (also the process-pool task)."""
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    trace, reason = simulate_cell(cfg, cell)
    wall = time.perf_counter() - t0
    name = trace_name(cell.variant.value, cell.gamma, cell.d)
    write_trace(trace, out_dir / name)
    write_cpu(trace, out_dir / cpu_name(cell.variant.value, cell.gamma, cell.d))
    return summarize(trace, cell, cfg, reason, name), timing_row(trace, cell, wall)


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    figures: list[Path] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "ok"]


def sweep(cfg: ExperimentConfig, out_dir: Path, *, plots: bool = True) -> SweepResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = cfg.cells()
    t0 = time.perf_counter()
    results: list[tuple[dict, dict]] = []
    jobs = min(cfg.n_jobs, len(cells))
    if jobs <= 1:
        for cell in cells:
            results.append(_guarded(cfg, cell, out_dir))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_guarded, cfg, cell, out_dir) for cell in cells]
            results = [f.result() for f in futures]
    res = SweepResult([r for r, _ in results], [t for _, t in results])
    write_table(out_dir / "summary.csv", SUMMARY_SCHEMA, SUMMARY_COLUMNS, res.rows)
    write_table(out_dir / "timing.csv", TIMING_SCHEMA, TIMING_COLUMNS, res.timing)
    if plots:
        res.figures = make_plots(out_dir, sorted({c.d for c in cells}), cfg.log_y, cells)
    res.wall_seconds = time.perf_counter() - t0
    return res


def _guarded(cfg: ExperimentConfig, cell: Cell, out_dir: Path) -> tuple[dict, dict]:
    # anything unexpected marks the cell failed instead of aborting the sweep
    try:
        return run_cell(cfg, cell, out_dir)
    except Exception as exc:  # noqa: BLE001
        name = trace_name(cell.variant.value, cell.gamma, cell.d)
        row = {"variant": cell.variant.value, "gamma": cell.gamma, "d": cell.d, "steps": cell.steps,
               "records": 0, "status": "failed", "reason": f"{type(exc).__name__}: {exc}",
               "success": 0, "trace_file": name}
        return row, timing_row(ClosedLoopTrace({}), cell, float("nan"))


def load_traces(out_dir: Path, cells: list[Cell] | None = None) -> list[ClosedLoopTrace]:
    """Traces of ``cells`` (default: every trace file in ``out_dir``) with CPU sidecars."""
    if cells is None:
        paths = sorted(out_dir.glob("trace_*.csv"))
    else:
        paths = [out_dir / trace_name(c.variant.value, c.gamma, c.d) for c in cells]
    traces = []
    for path in paths:
        if path.exists():
            cpu = path.with_name("cpu_" + path.name[len("trace_"):])
            traces.append(read_trace(path, cpu))
    return traces


def make_plots(
    out_dir: Path, targets: list[float] | None = None, log_y: bool = False, cells: list[Cell] | None = None
) -> list[Path]:
    traces = load_traces(out_dir, cells)
    if not traces:
        raise FileNotFoundError(f"no trace files in {out_dir}")
    if targets is None:
        targets = sorted({float(t.metadata["d"]) for t in traces})
    figures = []
    for d in targets:
        group = [t for t in traces if float(t.metadata["d"]) == d]
        figures.append(plot_target_panel(group, d, out_dir / panel_name(d), log_y=log_y))
    cpu = np.concatenate([t.column("cpu_seconds") for t in traces])
    figures.append(plot_cpu_histogram(cpu, out_dir / HIST_NAME))
    return figures


# ---------------------------------------------------------------------------
# certificate suite
# ---------------------------------------------------------------------------


@dataclass
class CheckOutcome:
    lines: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    reports: list[cert.CertificateReport] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _random_instance(model: ModelSpec, spec: CostSpec, z0: ExtendedState, horizon: int, rng, margin: float):
    """Random state and box-feasible sequence whose rollout avoids penalty kinks."""
    for _ in range(50):
        x = z0.x + rng.normal(scale=0.1, size=model.state_dim)
        u = rng.uniform(model.u_lower, model.u_upper)
        z = ExtendedState(x, u)
        seq = rng.uniform(model.u_lower, model.u_upper, size=(horizon, model.control_dim))
        if penalty_margin(spec, model, z, seq) > margin:
            return z, seq
    raise RuntimeError("could not sample an instance away from the penalty kinks")


def _faulty_gradient(spec: CostSpec, model: ModelSpec, z: ExtendedState):
    """Adjoint gradient scaled by 1.001, used to exercise the failure path."""

    def grad(seq):
        return evaluate(spec, model, z.x, z.u, seq)[1] * (1.0 + 1e-3)

    return grad


def gradient_suite(
    cfg: ExperimentConfig, cell: Cell, rng: np.random.Generator, *, inject_fault: bool = False
) -> list[float]:
    model, spec, z0 = build(cfg, cell)
    errors = []
    for _ in range(cfg.check.gradient_instances):
        z, seq = _random_instance(model, spec, z0, cfg.params.horizon, rng, 100 * cfg.check.fd_step)
        hook = _faulty_gradient(spec, model, z) if inject_fault else None
        errors.append(cert.gradient_check(spec, model, z, seq, cfg.check.fd_step, gradient=hook))
    return errors


def _cell_trace(cfg: ExperimentConfig, cell: Cell, out_dir: Path) -> tuple[ClosedLoopTrace, str | None]:
    """Reuse a matching trace from ``out_dir`` or simulate and store one."""
    path = out_dir / trace_name(cell.variant.value, cell.gamma, cell.d)
    if path.exists():
        try:
            trace = read_trace(path)
            meta = trace.metadata
            if (len(trace) == cell.steps and meta.get("N") == cfg.params.horizon
                    and meta.get("tau") == cfg.params.tau and meta.get("seed") == cfg.seed):
                return trace, None
        except (ValueError, KeyError):
            pass
    trace, reason = simulate_cell(cfg, cell)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trace(trace, path)
    write_cpu(trace, out_dir / cpu_name(cell.variant.value, cell.gamma, cell.d))
    return trace, reason


def run_checks(cfg: ExperimentConfig, out_dir: Path, *, inject_fault: bool = False) -> CheckOutcome:
    """Gradient, decrease, terminal-bound, warm-start, gamma-scaling and contraction checks.

    Hard checks: gradient agreement, warm-start dominance everywhere, and the
    decrease inequality for ``full`` runs with ``gamma >= check.hard_decrease_gamma``.
    The remaining checks are reported only.
    """
    cc = cfg.check
    rng = np.random.default_rng(cfg.seed)
    outcome = CheckOutcome()
    cells = cfg.cells()
    grad_errors: list[float] = []
    for cell in cells:
        grad_errors.extend(gradient_suite(cfg, cell, rng, inject_fault=inject_fault))
    worst = max(grad_errors) if grad_errors else 0.0
    outcome.lines += ["check: gradient", f"instances: {len(grad_errors)}",
                      f"max_relative_error: {worst:.3g}", f"tolerance: {cc.gradient_tolerance:g}", ""]
    if worst > cc.gradient_tolerance:
        outcome.failures.append(f"gradient: max relative error {worst:.3g} > {cc.gradient_tolerance:g}")

    traces: dict[Cell, ClosedLoopTrace] = {}
    for cell in cells:
        trace, reason = _cell_trace(cfg, cell, out_dir)
        traces[cell] = trace
        if reason:
            outcome.failures.append(f"{cell.stem}: simulation failed: {reason}")
        report = cert.CertificateReport(label=cell.stem)
        if len(trace) >= 2:
            dec = report.add(cert.check_decrease(trace, cc.ell_floor, cc.decrease_tolerance, cc.beta_min))
            hard = cell.variant is Variant.FULL and cell.gamma >= cc.hard_decrease_gamma
            if hard and not dec.ok:
                outcome.failures.append(f"{cell.stem}: decrease violated at {dec.violations} of {dec.checked} steps")
        if cell.gamma > 0 and trace.records:
            report.add(cert.check_terminal_bounds(trace, cell.gamma, cc.ell_floor))
        ws = report.add(cert.check_warm_start(trace))
        if not ws.ok:
            outcome.failures.append(f"{cell.stem}: warm start dominance violated at {ws.violations} steps")
        outcome.reports.append(report)
        outcome.lines += [report.to_text()]

    for d in sorted({c.d for c in cells}):
        group = [traces[c] for c in cells if c.d == d and c.variant is Variant.FULL and len(traces[c])]
        if len(group) >= 3:
            gs = cert.gamma_scaling_probe(group)
            outcome.lines += [f"label: full_{d:g}", *gs.as_lines(), ""]
        if cc.contraction_probes > 0:
            base = next(c for c in cells if c.d == d)
            model, spec, z0 = build(cfg, base)
            probes = [z0] + [
                ExtendedState(z0.x + rng.normal(scale=0.05, size=model.state_dim), z0.u)
                for _ in range(cc.contraction_probes - 1)
            ]
            solver = SolverConfig(max_iterations=cc.contraction_iterations)
            est = cert.estimate_contraction(model, spec, solver, probes, cfg.params.horizon, ell_floor=cc.ell_floor)
            outcome.lines += [f"label: target_{d:g}", *est.as_lines(), ""]
    return outcome
