import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from nmpclab.cli import EXIT_CERTIFICATE, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from nmpclab.config import OUT_ENV, ConfigError, ExperimentConfig, apply_overrides, from_dict, load_config
from nmpclab.cost import Variant
from nmpclab.traceio import TRACE_COLUMNS, read_table, read_trace

SMOKE = """
scenario: {targets: [0.2], steps: 5, x0: target}
cost: {variants: [full], gammas: [1000]}
check: {gradient_instances: 2, contraction_probes: 1}
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_default_grid_size():
    cfg = ExperimentConfig()
    cells = cfg.cells()
    assert len(cells) == 4 * (2 * 6 + 1)
    assert sum(c.variant is Variant.NOMINAL for c in cells) == 4
    assert {c.steps for c in cells if c.d <= 0.5} == {300}
    assert {c.steps for c in cells if c.d >= 1.0} == {600}


def test_config_round_trip():
    cfg = ExperimentConfig(gammas=(2.0, 3.0), targets=(0.7,), seed=4)
    assert from_dict(cfg.to_dict()) == cfg


def test_terminal_penalties_from_yaml(tmp_path):
    cfg = load_config(write(tmp_path, "pvtol: {terminal_penalties: true}"))
    assert cfg.params.terminal_penalties is True
    assert from_dict(cfg.to_dict()) == cfg
    assert ExperimentConfig().params.terminal_penalties is False


@pytest.mark.parametrize(
    "raw",
    [
        {"bogus": 1},
        {"scenario": {"steps": 0}},
        {"scenario": {"speed": 1}},
        {"cost": {"gammas": []}},
        {"cost": {"gammas": [-1]}},
        {"cost": {"variants": ["terminal"]}},
        {"solver": {"max_iterations": 0}},
        {"pvtol": {"velocity_limits": {"z_dot": 0.3}}},
        {"pvtol": {"penalty_weight": 0.0}},
        {"model": "cartpole"},
        {"scenario": {"x0": "origin"}},
        {"scenario": {"targets": ["far"]}},
        [1, 2],
    ],
)
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_yaml_parse_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "scenario: [unclosed"))


def test_output_precedence(tmp_path, monkeypatch):
    cfg = load_config(write(tmp_path, "output: {dir: from_file}"))
    assert cfg.out_dir == Path("from_file")
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert apply_overrides(cfg).out_dir == tmp_path / "env"
    assert apply_overrides(cfg, out=tmp_path / "flag").out_dir == tmp_path / "flag"


def test_run_zero_steps_is_config_error(tmp_path):
    assert main(["run", "--variant", "nominal", "--d", "0.2", "--steps", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_run_needs_single_cell(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--steps", "3"]) == EXIT_CONFIG


def test_bad_variant_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["run", "--variant", "proposed"])
    assert info.value.code == 2


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def run_args(out, steps=20):
    return ["run", "--variant", "full", "--gamma", "1000", "--d", "0.5", "--steps", str(steps), "--out", str(out)]


def test_run_writes_trace(tmp_path, capsys):
    assert main(run_args(tmp_path)) == EXIT_OK
    path = tmp_path / "trace_full_1000_0.5.csv"
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# schema: nmpc-trace/1; model=pvtol; variant=full; gamma=1000.0; d=0.5")
    assert lines[1].split(",") == list(TRACE_COLUMNS)
    assert len(lines) == 22
    assert (tmp_path / "cpu_full_1000_0.5.csv").exists()
    assert "final_stage=" in capsys.readouterr().out


def test_run_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(run_args(a)) == EXIT_OK
    assert main(run_args(b)) == EXIT_OK
    name = "trace_full_1000_0.5.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()


def test_trace_round_trip(tmp_path):
    from nmpclab.lab import simulate_cell
    from nmpclab.config import Cell
    from nmpclab.traceio import write_cpu, write_trace

    cfg = ExperimentConfig(seed=3)
    trace, reason = simulate_cell(cfg, Cell(Variant.NO_DERIVATIVE, 50.0, 1.0, 8))
    assert reason is None
    write_trace(trace, tmp_path / "t.csv")
    write_cpu(trace, tmp_path / "c.csv")
    back = read_trace(tmp_path / "t.csv", tmp_path / "c.csv")
    assert back.metadata == {k: trace.metadata[k] for k in back.metadata}
    assert back.metadata["seed"] == 3
    for r, s in zip(trace.records, back.records):
        assert r == s


def test_env_var_sets_output(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env_out"))
    args = ["run", "--variant", "nominal", "--d", "0.2", "--steps", "3"]
    assert main(args) == EXIT_OK
    assert (tmp_path / "env_out" / "trace_nominal_0_0.2.csv").exists()


def test_small_sweep(tmp_path):
    out = tmp_path / "s"
    args = ["sweep", "--variant", "full", "nominal", "--gamma", "100", "--d", "0.2", "0.5",
            "--steps", "6", "--jobs", "1", "--out", str(out)]
    assert main(args) == EXIT_OK
    rows = read_table(out / "summary.csv")
    assert len(rows) == 4
    assert {(r["variant"], r["d"]) for r in rows} == {("full", 0.2), ("full", 0.5), ("nominal", 0.2), ("nominal", 0.5)}
    assert all(r["status"] == "ok" for r in rows)
    assert sorted(p.name for p in out.glob("*.svg")) == ["fig1_d0.2.svg", "fig1_d0.5.svg", "fig2_cpu_hist.svg"]
    assert len(read_table(out / "timing.csv")) == 4
    first = {p.name: p.read_bytes() for p in out.glob("fig1_*.svg")}
    summary = (out / "summary.csv").read_bytes()
    assert main(args + ["--log-y"]) == EXIT_OK
    assert main(args) == EXIT_OK
    assert {p.name: p.read_bytes() for p in out.glob("fig1_*.svg")} == first
    assert (out / "summary.csv").read_bytes() == summary


def test_single_cell_sweep(tmp_path):
    out = tmp_path / "one"
    args = ["sweep", "--variant", "no-deriv", "--gamma", "5", "--d", "1", "--steps", "4", "--out", str(out)]
    assert main(args) == EXIT_OK
    assert len(read_table(out / "summary.csv")) == 1
    assert len(list(out.glob("*.svg"))) == 2
    assert len(list(out.glob("trace_*.csv"))) == 1


def test_plot_without_traces(tmp_path):
    assert main(["plot", "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_plot_redraws(tmp_path):
    assert main(run_args(tmp_path, steps=5)) == EXIT_OK
    assert main(["plot", "--out", str(tmp_path), "--log-y"]) == EXIT_OK
    assert (tmp_path / "fig1_d0.5.svg").exists() and (tmp_path / "fig2_cpu_hist.svg").exists()


def test_check_smoke_passes(tmp_path, capsys):
    cfg = write(tmp_path, SMOKE)
    assert main(["check", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    text = (tmp_path / "o" / "certificates.txt").read_text()
    assert "check: gradient" in text and "check: decrease" in text and "check: warm_start" in text
    assert (tmp_path / "o" / "certificates.csv").read_text().startswith("label,check,step,residual,passed")


def test_check_detects_gradient_fault(tmp_path, capsys):
    cfg = write(tmp_path, SMOKE)
    code = main(["check", "--config", str(cfg), "--out", str(tmp_path / "o"), "--inject-gradient-fault"])
    assert code == EXIT_CERTIFICATE
    assert "FAIL gradient" in capsys.readouterr().err


def test_check_full_small_target(tmp_path):
    cfg = write(tmp_path, "check: {gradient_instances: 1, contraction_probes: 0}\n")
    args = ["check", "--config", str(cfg), "--variant", "full", "--gamma", "1000", "--d", "0.2",
            "--steps", "300", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    text = (tmp_path / "certificates.txt").read_text()
    block = text.split("check: decrease")[1].split("\n\n")[0]
    assert "violations: 0" in block


def test_hidden_flag_not_in_help(capsys):
    with pytest.raises(SystemExit):
        main(["check", "--help"])
    assert "inject" not in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nmpclab", "run", "--steps", "0", "--variant", "nominal",
                           "--d", "0.2", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "steps must be >= 1" in proc.stderr
