import csv
import json
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from psqueue.cli import (ConfigError, RunConfig, emit_config, emit_csv, main, parse_config, run, validate)

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "eps_rho04.ini"


def _config(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


BASE = """
[model]
arrival_rate = 0.4
pgf = 0, 1
service_kind = uniform
service_params = 0, 2

[run]
mode = {mode}
u_points = {u}
k_max = 4
"""


def test_pmf_mode_on_reference_config(tmp_path):
    assert run(REFERENCE, tmp_path) == 0
    rows = _read_csv(tmp_path / "pmf.csv")
    assert rows[0] == ["k", "p", "ci_lo", "ci_hi", "source"]
    assert float(rows[1][1]) == pytest.approx(0.6, abs=1e-3)
    assert rows[1][4] == "picard"
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "ok" and report["exit_code"] == 0
    assert len(report["provenance"]["config_sha256"]) == 64


def test_transform_mode(tmp_path):
    cfg = _config(tmp_path, BASE.format(mode="transform", u="0, 1"))
    assert run(cfg, tmp_path / "out") == 0
    rows = _read_csv(tmp_path / "out" / "transform.csv")
    assert rows[0] == ["u", "value", "pipeline"]
    assert float(rows[1][0]) == 0.0 and float(rows[1][1]) == pytest.approx(1.0, abs=1e-4)
    assert float(rows[2][1]) == pytest.approx(0.703525, abs=2e-3)


def test_malformed_pgf_names_field(tmp_path, capsys):
    cfg = _config(tmp_path, BASE.format(mode="transform", u="1").replace("pgf = 0, 1", "pgf = 0.1, 1.0"))
    assert run(cfg, tmp_path / "out") == 2
    assert "model.pgf" in capsys.readouterr().err
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["exit_code"] == 2 and "model.pgf" in report["error"]


def test_unstable_model_exit_code(tmp_path):
    cfg = _config(tmp_path, BASE.format(mode="transform", u="1").replace("arrival_rate = 0.4", "arrival_rate = 1.2"))
    assert run(cfg, tmp_path / "out") == 3
    assert json.loads((tmp_path / "out" / "report.json").read_text())["status"] == "unstable"


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="unknown section \\[model2\\]"):
        parse_config(BASE.format(mode="transform", u="1") + "\n[model2]\n")
    with pytest.raises(ConfigError, match="unknown key model.colour"):
        parse_config(BASE.format(mode="transform", u="1").replace("[run]", "colour = red\n[run]"))
    with pytest.raises(ConfigError, match="needs a \\[sim\\] section"):
        parse_config(BASE.format(mode="simulate", u="1"))
    with pytest.raises(ConfigError, match="run.mode"):
        parse_config(BASE.format(mode="dance", u="1"))


def test_numerical_failure_still_writes_report(tmp_path, monkeypatch):
    import psqueue.cli as cli

    def boom(*a, **k):
        raise ArithmeticError("forced failure")
    monkeypatch.setattr(cli, "stationary_transform_picard", boom)
    cfg = _config(tmp_path, BASE.format(mode="transform", u="1"))
    assert run(cfg, tmp_path / "out") == 4
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["status"] == "numerical failure" and "forced failure" in report["error"]


def test_identical_config_gives_identical_csv(tmp_path):
    text = BASE.format(mode="transform", u="0.5, 2") + "\n[sim]\nhorizon_time = 200\nreplications = 2\n"
    a = _config(tmp_path, text, "a.ini")
    b = _config(tmp_path, text, "b.ini")
    assert run(a, tmp_path / "A") == 0 and run(b, tmp_path / "B") == 0
    assert (tmp_path / "A" / "transform.csv").read_bytes() == (tmp_path / "B" / "transform.csv").read_bytes()


def test_simulate_mode_and_seed_flag(tmp_path):
    text = BASE.format(mode="simulate", u="1") + "\n[sim]\nhorizon_time = 500\nwarmup_time = 10\nreplications = 2\n"
    cfg = _config(tmp_path, text)
    assert main(["run", str(cfg), "--out-dir", str(tmp_path / "s1"), "--seed", "7"]) == 0
    assert main(["run", str(cfg), "--out-dir", str(tmp_path / "s2"), "--seed", "7"]) == 0
    assert (tmp_path / "s1" / "pmf.csv").read_bytes() == (tmp_path / "s2" / "pmf.csv").read_bytes()
    report = json.loads((tmp_path / "s1" / "report.json").read_text())
    assert report["provenance"]["seed"] == 7
    assert _read_csv(tmp_path / "s1" / "pmf.csv")[1][4] == "simulation"


def test_limit_study_header(tmp_path):
    text = BASE.format(mode="limit-study", u="1").replace("arrival_rate = 0.4", "arrival_rate = 0.5")
    text += "\n[policy]\nkind = fb\n[sim]\nhorizon_time = 300\nwarmup_time = 10\nreplications = 2\n"
    text = text.replace("k_max = 4", "k_max = 4\nfamily = fb\nn_list = 1, 2")
    assert run(_config(tmp_path, text), tmp_path / "out") == 0
    rows = _read_csv(tmp_path / "out" / "limit_study.csv")
    assert rows[0] == ["N", "tv", "tv_ci", "ks"] and [r[0] for r in rows[1:]] == ["1", "2"]


def test_compare_command_logs_deviations(tmp_path):
    text = BASE.format(mode="transform", u="1") + "\n[sim]\nhorizon_time = 300\nwarmup_time = 10\nreplications = 2\n"
    assert main(["compare", str(_config(tmp_path, text)), "--out-dir", str(tmp_path / "out")]) == 0
    rows = _read_csv(tmp_path / "out" / "transform.csv")
    assert {r[2] for r in rows[1:]} == {"picard", "theorem", "simulation"}
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    # the two routes differ on this instance, so the log cannot be empty
    assert report["deviations"]
    for entry in report["deviations"]:
        assert {"u", "theorem", "picard", "abs_diff"} <= set(entry)


def test_validate_command(tmp_path, capsys):
    assert validate(REFERENCE) == 0
    assert "rho = 0.4" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.ini")]) == 2


def test_csv_full_precision(tmp_path):
    emit_csv(["u", "value", "pipeline"], [(0.1, 1 / 3, "x")], tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text(encoding="utf-8")
    assert text == "u,value,pipeline\n0.10000000000000001,0.33333333333333331,x\n"


_FLOAT = st.floats(0.01, 10.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(rate=_FLOAT, hi=_FLOAT, us=st.lists(st.floats(0.0, 5.0), min_size=1, max_size=4),
       seed=st.integers(0, 2 ** 32), mode=st.sampled_from(["transform", "pmf", "simulate", "sojourn"]))
def test_config_round_trip(rate, hi, us, seed, mode):
    text = BASE.format(mode=mode, u=", ".join(repr(u) for u in us)).replace("0.4", repr(rate))
    text = text.replace("service_params = 0, 2", f"service_params = 0, {hi!r}")
    text += f"\n[sim]\nseed = {seed}\n"
    cfg = parse_config(text)
    again = parse_config(emit_config(cfg))
    assert again == cfg
    assert isinstance(again, RunConfig)
    assert replace(again, present=()) == replace(cfg, present=())
