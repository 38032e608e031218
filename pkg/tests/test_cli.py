import json
import math

import pytest

from spikedsim import cli
from spikedsim.flows import read_trace_csv


def test_hermite_command(capsys):
    assert cli.main(["hermite", "--link", "hermite:3"]) == 0
    out = capsys.readouterr().out
    assert "information_exponent=3" in out
    assert out.count("alpha_") == 21


def test_hermite_constant_has_no_exponent(capsys):
    assert cli.main(["hermite", "--link", "hermite:0"]) == 0
    assert "information_exponent=none" in capsys.readouterr().out


def test_flow_command_closed_form(tmp_path, capsys):
    argv = ["flow", "--kind", "pop_normalized", "--link", "hermite:2", "--d", "16", "--m0", "0.1",
            "--dt", "1e-4", "--eps", "0.5", "--record-stride", "100", "--output-dir", str(tmp_path)]
    assert cli.main(argv) == 0
    meta, rows = read_trace_csv(tmp_path / "flow_pop_normalized.csv")
    assert float(meta["hit_half"]) == pytest.approx(0.87413, rel=1e-3)
    assert rows[0, 1] == pytest.approx(0.1, abs=1e-12)
    first = (tmp_path / "flow_pop_normalized.csv").read_bytes()
    assert cli.main(argv) == 0
    assert (tmp_path / "flow_pop_normalized.csv").read_bytes() == first


def test_flow_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
    assert cli.main(["flow", "--d", "8", "--dt", "0.01"]) == 0
    assert (tmp_path / "flow_pop_normalized.csv").exists()


def test_config_then_set_then_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"m0": 0.3, "d": 8, "eps": 0.5}))
    args = cli.build_parser().parse_args(["flow", "--config", str(cfg), "--set", "m0=0.2", "--set", "d=10",
                                          "--d", "12"])
    o = cli.resolve_options(args, cli.FLOW_DEFAULTS)
    assert (o["m0"], o["d"], o["eps"]) == (0.2, 12, 0.5)


def test_apply_overrides_nested():
    doc = cli.apply_overrides({"grid": {"a": 1}}, ["grid.b=[1, 2]", "seeds=3"])
    assert doc == {"grid": {"a": 1, "b": [1, 2]}, "seeds": 3}
    with pytest.raises(cli.UsageError):
        cli.apply_overrides({}, ["novalue"])
    with pytest.raises(cli.UsageError):
        cli.apply_overrides({}, ["x=1"], allowed={"y"})


@pytest.mark.parametrize("argv", [
    ["flow", "--config", "/nonexistent/config.json"],
    ["flow", "--kind", "pop_teleport"],
    ["flow", "--set", "bogus=1"],
    ["flow", "--r1", "0.9", "--r2", "0.5"],
    ["frobnicate"],
    ["experiment"],
    ["flow", "--workers", "0"],
    ["stein", "--rho", "2"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == 2


def test_bad_json_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert cli.main(["hermite", "--config", str(p)]) == 2


def test_experiment_command(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"experiment": "tau_scaling",
                                "grid": {"s_list": [3], "m0_list": [0.1, 0.2, 0.3], "dt": 0.02}}))
    assert cli.main(["experiment", "--config", str(spec), "--output-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "tau_scaling.csv").exists()
    assert "tau_scaling: pass=" in capsys.readouterr().out


def test_experiment_bad_spec_exit_2(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"experiment": "tau_scaling", "grid": {"nope": 1}}))
    assert cli.main(["experiment", "--config", str(spec), "--output-dir", str(tmp_path)]) == 2


def test_stein_command(capsys):
    assert cli.main(["stein", "--f", "square", "--g", "identity", "--n-mc", "100000"]) == 0
    assert "pass=True" in capsys.readouterr().out


def test_train_command(tmp_path, capsys):
    argv = ["train", "--d", "8", "--r2", "0.5", "--m", "16", "--n", "600", "--eps", "0.1", "--n-test", "2000",
            "--set", "n_prime_cap=4000", "--output-dir", str(tmp_path)]
    assert cli.main(argv) == 0
    out = capsys.readouterr().out
    assert "test_risk=" in out
    first = (tmp_path / "net.json").read_bytes()
    assert cli.main(argv) == 0
    assert (tmp_path / "net.json").read_bytes() == first


def test_flow_example_default_dt(tmp_path, capsys):
    argv = ["flow", "--kind", "pop_normalized", "--link", "hermite:2", "--d", "64", "--m0", "0.1",
            "--eps", "0.01", "--output-dir", str(tmp_path)]
    assert cli.main(argv) == 0
    meta, _ = read_trace_csv(tmp_path / "flow_pop_normalized.csv")
    # first grid time past the threshold at the default dt = 1e-3; same 1% band as the oracle check
    assert float(meta["hit_half"]) == pytest.approx(0.25 * math.log(33.0), rel=0.01)


def test_hermite_prints_unit_alpha(capsys):
    cli.main(["hermite", "--link", "hermite:3"])
    out = capsys.readouterr().out
    assert "alpha_3=1\n" in out


def test_missing_config_names_path(capsys):
    assert cli.main(["hermite", "--config", "/no/such/file.json"]) == 2
    assert "/no/such/file.json" in capsys.readouterr().err


def test_workers_do_not_change_outputs(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"experiment": "init_alignment", "seeds": 100,
                                "grid": {"d_list": [64, 256], "cells": [[0.5, 0.1]]}}))
    outs = []
    for k in ("1", "2"):
        out = tmp_path / f"w{k}"
        assert cli.main(["experiment", "--config", str(spec), "--workers", k, "--output-dir", str(out)]) == 0
        outs.append([(out / f"init_alignment_r1=0.5_r2=0.1.{ext}").read_bytes() for ext in ("csv", "json")])
    assert outs[0] == outs[1]
