"""``nmpclab`` command-line tool.

Subcommands
-----------
run     one closed-loop simulation, writes its trace CSV and prints a summary
sweep   every (variant, gamma, d) cell, summary/timing tables and SVG figures
check   certificate suite; exit code 4 when a hard check fails
plot    redraw the figures from trace files already in the output directory

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 certificate failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .pvtol import horizon_reachable

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CERTIFICATE = 4


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="YAML experiment file")
    p.add_argument("--gamma", type=float, nargs="+", help="terminal weight(s) gamma > 0")
    p.add_argument("--d", type=float, nargs="+", help="target offset(s)")
    p.add_argument("--variant", nargs="+", choices=["nominal", "full", "no-deriv"], help="cost variant(s)")
    p.add_argument("--steps", type=int, help="closed-loop steps (default 300 for d <= 0.5, else 600)")
    p.add_argument("--out", type=Path, help="output directory (overrides NMPCLAB_OUT and the config)")
    p.add_argument("--log-y", action="store_true", help="log scale on the optimal-cost panels")
    p.add_argument("--jobs", type=int, help="parallel simulations (default: CPU count)")
    p.add_argument("--seed", type=int, help="seed for randomized probes")
    p.add_argument("--inject-gradient-fault", action="store_true", help=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmpclab", description="Short-horizon NMPC experiments on the PVTOL benchmark."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    sub.add_parser("run", parents=[common], help="simulate a single (variant, gamma, d) cell")
    sub.add_parser("sweep", parents=[common], help="simulate the whole grid and draw figures")
    sub.add_parser("check", parents=[common], help="run the certificate suite")
    sub.add_parser("plot", parents=[common], help="draw figures from existing traces")
    return parser


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    variants = [v.replace("-", "_") for v in args.variant] if args.variant else None
    return apply_overrides(
        cfg,
        gammas=args.gamma,
        targets=args.d,
        variants=variants,
        steps=args.steps,
        out=args.out,
        log_y=args.log_y,
        jobs=args.jobs,
        seed=args.seed,
    )


def _fmt_row(row: dict) -> str:
    keys = ("variant", "gamma", "d", "records", "final_stage", "final_J_star", "decrease_violations", "status")
    parts = []
    for k in keys:
        v = row.get(k, "")
        parts.append(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def cmd_run(cfg: ExperimentConfig) -> int:
    from .lab import run_cell

    cells = cfg.cells()
    if len(cells) != 1:
        print(
            f"error: run needs exactly one (variant, gamma, d) cell, the configuration gives {len(cells)}; "
            "narrow it with --variant/--gamma/--d or use 'sweep'",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    row, timing = run_cell(cfg, cells[0], cfg.out_dir)
    print(_fmt_row(row) + f" cpu_mean_s={timing['cpu_mean_s']:.3g}")
    print(f"trace: {cfg.out_dir / row['trace_file']}")
    if row["status"] != "ok":
        print(f"error: {row['reason']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    from .lab import sweep

    res = sweep(cfg, cfg.out_dir)
    for row in res.rows:
        print(_fmt_row(row))
    print(f"{len(res.rows)} cells, {len(res.failed)} failed, {res.wall_seconds:.1f} s wall")
    for fig in res.figures:
        print(f"figure: {fig}")
    for row in res.failed:
        print(f"failed: {row['variant']} gamma={row['gamma']:g} d={row['d']:g}: {row['reason']}", file=sys.stderr)
    return EXIT_RUNTIME if res.failed else EXIT_OK


def cmd_check(cfg: ExperimentConfig, inject_fault: bool = False) -> int:
    from .lab import run_checks

    for d in cfg.targets:
        tag = "within" if horizon_reachable(d, cfg.params) else "beyond"
        print(f"target d={d:g} is {tag} the one-horizon displacement bound")
    outcome = run_checks(cfg, cfg.out_dir, inject_fault=inject_fault)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    text = "\n".join(outcome.lines).rstrip() + "\n"
    (cfg.out_dir / "certificates.txt").write_text(text, encoding="utf-8")
    csv_text = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(outcome.reports))
    (cfg.out_dir / "certificates.csv").write_text(csv_text, encoding="utf-8")
    print(text, end="")
    if outcome.ok:
        print("all hard checks passed")
        return EXIT_OK
    for failure in outcome.failures:
        print(f"FAIL {failure}", file=sys.stderr)
    return EXIT_CERTIFICATE


def cmd_plot(cfg: ExperimentConfig) -> int:
    from .lab import make_plots

    try:
        figures = make_plots(cfg.out_dir, log_y=cfg.log_y)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for fig in figures:
        print(f"figure: {fig}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "check":
            return cmd_check(cfg, inject_fault=args.inject_gradient_fault)
        return cmd_plot(cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
