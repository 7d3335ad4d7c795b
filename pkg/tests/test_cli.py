import csv
import json

import pytest

from routedistill.cli import DEFAULTS, cli_main

from pipeline import pipeline_outputs, run_pipeline


def _toml(dest, **kw):
    dest.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in kw.items()))
    return str(dest)


def test_every_subcommand_takes_config_and_seed():
    for name in DEFAULTS:
        with pytest.raises(SystemExit) as err:
            cli_main([name, "--help"])
        assert err.value.code == 0


def test_unknown_subcommand_and_flag_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        cli_main(["frobnicate"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        cli_main(["generate", "--bogus"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_is_single_line_error(tmp_path, capsys):
    cfg = _toml(tmp_path / "c.toml", n=5, colour="blue")
    assert cli_main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    obj = json.loads(err[0])
    assert obj["error"] == "CliError" and "colour" in obj["message"]


def test_generate_echoes_effective_config(tmp_path, capsys, monkeypatch):
    cfg = _toml(tmp_path / "c.toml", n=5, count=3, distribution="grid")
    monkeypatch.setenv("ROUTEDISTILL_OUT", str(tmp_path / "env"))
    assert cli_main(["generate", "--config", cfg, "--seed", "7"]) == 0
    eff = json.loads((tmp_path / "env" / "effective_config.json").read_text())
    assert eff["seed"] == 7 and eff["n"] == 5 and eff["distribution"] == "grid" and eff["command"] == "generate"
    assert len((tmp_path / "env" / "instances.jsonl").read_text().splitlines()) == 3
    assert json.loads(capsys.readouterr().out)["command"] == "generate"


def test_parse_bench_reports_bound(tmp_path, capsys):
    path = tmp_path / "x.vrp"
    path.write_text(
        "NAME : t\nTYPE : CVRP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 5\n"
        "NODE_COORD_SECTION\n1 0 0\n2 1 0\n3 0 1\nDEMAND_SECTION\n1 0\n2 4\n3 3\nDEPOT_SECTION\n1\n-1\nEOF\n"
    )
    cfg = _toml(tmp_path / "c.toml", path=str(path))
    assert cli_main(["parse-bench", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    info = json.loads((tmp_path / "o" / "benchmark.json").read_text())
    assert info["min_routes"] == 2 and info["dimension"] == 3
    bad = tmp_path / "g.tsp"
    bad.write_text("NAME : g\nTYPE : TSP\nDIMENSION : 2\nEDGE_WEIGHT_TYPE : GEO\nNODE_COORD_SECTION\n1 0 0\n2 1 1\nEOF\n")
    cfg = _toml(tmp_path / "d.toml", path=str(bad))
    assert cli_main(["parse-bench", "--config", cfg, "--out", str(tmp_path / "p")]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "UnsupportedFormatError"


def test_evaluate_needs_checkpoint(tmp_path, capsys):
    assert cli_main(["evaluate", "--out", str(tmp_path)]) == 1
    assert "checkpoint" in json.loads(capsys.readouterr().err)["message"]


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    run_pipeline(a)
    run_pipeline(b)
    return a, b


def test_pipeline_is_byte_identical(pipeline_runs):
    a, b = pipeline_runs
    files_a, files_b = pipeline_outputs(a), pipeline_outputs(b)
    assert set(files_a) == set(files_b) and len(files_a) >= 8
    for rel in files_a:
        assert files_a[rel] == files_b[rel], rel


def test_distill_log_and_gap_table_layout(pipeline_runs):
    a, _ = pipeline_runs
    header = (a / "distill" / "distill_log.csv").read_text().splitlines()[0].split(",")
    assert header == [
        "epoch", "selected_distribution", "p_uniform", "p_cluster", "p_mixed",
        "gap_uniform", "gap_cluster", "gap_mixed", "task_loss", "kd_loss",
    ]
    rows = list(csv.reader(open(a / "evaluate" / "gap_table.csv")))
    assert rows[0] == ["model", "G_U", "G_C", "G_M", "Expansion", "Implosion", "Explosion", "Grid", "Avg."]
    assert [r[0] for r in rows[1:]] == ["teacher", "student"]
    for r in rows[1:]:
        vals = [float(x) for x in r[1:8]]
        assert float(r[8]) == pytest.approx(sum(vals) / 7, abs=1e-5)
    gaps = list(csv.DictReader(open(a / "evaluate" / "gaps.csv")))
    for model in ("teacher", "student"):
        mine = [float(g["gap"]) for g in gaps if g["model"] == model and g["source"] != "overall"]
        overall = [float(g["gap"]) for g in gaps if g["model"] == model and g["source"] == "overall"][0]
        assert overall == pytest.approx(sum(mine) / len(mine), abs=1e-15)
    assert json.loads((a / "solve" / "run_meta.json").read_text())["sha256"]
