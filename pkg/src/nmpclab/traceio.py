"""CSV persistence for closed-loop traces, sweep summaries and timings.

Every file starts with a ``# schema: <name>/<version>`` comment line. Trace
files hold only deterministic quantities so that reruns are byte-identical;
wall-clock timings go to a ``cpu_*.csv`` sidecar with the same step index.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import ExtendedState
from .loop import ClosedLoopRecord, ClosedLoopTrace

TRACE_SCHEMA = "nmpc-trace/1"
CPU_SCHEMA = "nmpc-cpu/1"
SUMMARY_SCHEMA = "nmpc-summary/1"
TIMING_SCHEMA = "nmpc-timing/1"

TRACE_COLUMNS = (
    "k", "x1", "x2", "x3", "x4", "x5", "x6", "u1", "u2",
    "J_star", "stage", "term_deriv_norm", "term_stage", "iters", "J_warm", "status",
)
META_KEYS = ("model", "variant", "gamma", "d", "N", "tau", "seed")


def trace_name(variant: str, gamma: float, d: float) -> str:
    return f"trace_{variant}_{gamma:g}_{d:g}.csv"


def cpu_name(variant: str, gamma: float, d: float) -> str:
    return f"cpu_{variant}_{gamma:g}_{d:g}.csv"


def _num(x: float) -> str:
    return repr(float(x))


def _schema_line(schema: str, meta: dict | None = None) -> str:
    parts = [f"schema: {schema}"]
    for key, value in (meta or {}).items():
        parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return "# " + "; ".join(parts) + "\n"


def _parse_schema_line(line: str) -> tuple[str, dict[str, str]]:
    if not line.startswith("# schema: "):
        raise ValueError(f"missing schema line, got {line[:40]!r}")
    parts = line[2:].strip().split("; ")
    schema = parts[0].split(": ", 1)[1]
    meta = dict(p.split("=", 1) for p in parts[1:])
    return schema, meta


def write_trace(trace: ClosedLoopTrace, path: str | Path) -> Path:
    path = Path(path)
    meta = {k: trace.metadata[k] for k in META_KEYS if k in trace.metadata}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_schema_line(TRACE_SCHEMA, meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow(
                [r.k, *map(_num, r.z.x), *map(_num, r.z.u), _num(r.J_star), _num(r.stage),
                 _num(r.terminal_derivative_norm), _num(r.terminal_stage), r.solver_iterations,
                 _num(r.warm_cost), r.status]
            )
    return path


def write_cpu(trace: ClosedLoopTrace, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_schema_line(CPU_SCHEMA))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "cpu_s"])
        for r in trace.records:
            w.writerow([r.k, _num(r.cpu_seconds)])
    return path


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def read_trace(path: str | Path, cpu_path: str | Path | None = None) -> ClosedLoopTrace:
    """Load a trace; ``cpu_seconds`` comes from the sidecar when given, else NaN."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        schema, meta = _parse_schema_line(fh.readline())
        if schema != TRACE_SCHEMA:
            raise ValueError(f"{path}: unsupported schema {schema!r}")
        rows = list(csv.DictReader(fh))
    cpu = read_cpu(cpu_path) if cpu_path is not None and Path(cpu_path).exists() else {}
    metadata = {k: _coerce(v) for k, v in meta.items()}
    if "gamma" in metadata:
        metadata["gamma"] = float(metadata["gamma"])
    if "d" in metadata:
        metadata["d"] = float(metadata["d"])
    trace = ClosedLoopTrace(metadata)
    for row in rows:
        k = int(row["k"])
        trace.records.append(
            ClosedLoopRecord(
                k=k,
                z=ExtendedState([float(row[f"x{i}"]) for i in range(1, 7)], [float(row["u1"]), float(row["u2"])]),
                J_star=float(row["J_star"]),
                stage=float(row["stage"]),
                terminal_derivative_norm=float(row["term_deriv_norm"]),
                terminal_stage=float(row["term_stage"]),
                solver_iterations=int(row["iters"]),
                cpu_seconds=cpu.get(k, float("nan")),
                warm_cost=float(row["J_warm"]),
                status=row["status"],
            )
        )
    return trace


def read_cpu(path: str | Path) -> dict[int, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        schema, _ = _parse_schema_line(fh.readline())
        if schema != CPU_SCHEMA:
            raise ValueError(f"{path}: unsupported schema {schema!r}")
        return {int(r["k"]): float(r["cpu_s"]) for r in csv.DictReader(fh)}


def write_table(path: str | Path, schema: str, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_schema_line(schema))
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (_num(v) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    return path


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        _parse_schema_line(fh.readline())
        return [{k: _coerce(v) for k, v in row.items()} for row in csv.DictReader(fh)]
