import csv
import json
import subprocess
import sys

import pytest

from fringe_epec import cli
from fringe_epec.lcp import RayTermination
from fringe_epec.market_data import save_dataset


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_solve_mcp_perfect_competition(tmp_path, capsys):
    assert cli.main(["--out", str(tmp_path), "solve-mcp", "--cv", "0"]) == 0
    inv = {}
    for r in _rows(tmp_path / "outcome.csv"):
        inv[r["firm"], r["technology"]] = float(r["inv_MW"])
    for f in ("l1", "l2", "f3", "f4"):
        assert inv[f, "new_midmerit"] == pytest.approx(713.0, abs=5.0)
        assert inv.get((f, "new_baseload"), 0.0) == pytest.approx(0.0, abs=1.0)
    assert "prices:" in capsys.readouterr().out


def test_sweep_writes_one_file_per_level(tmp_path):
    assert cli.main(["solve-mcp", "--sweep", "0,1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "outcome_cv0.csv").exists() and (tmp_path / "outcome_cv1.csv").exists()


def test_solve_pc(tmp_path):
    assert cli.main(["solve-pc", "--out", str(tmp_path)]) == 0
    assert _rows(tmp_path / "outcome.csv")


def test_validate(tmp_path, data, capsys):
    good = tmp_path / "d.json"
    save_dataset(data, good)
    assert cli.main(["validate", str(good)]) == 0
    doc = json.loads(good.read_text())
    doc["demand"]["slope"] = 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert cli.main(["validate", str(bad)]) == 1
    assert "slope" in capsys.readouterr().err


def test_input_errors_exit_one(tmp_path):
    assert cli.main(["solve-mcp", "--cv", "1.5", "--out", str(tmp_path)]) == 1
    assert cli.main(["solve-mpec", "--leader", "f3", "--out", str(tmp_path)]) == 1
    assert cli.main(["--data", str(tmp_path / "missing.json"), "solve-pc", "--out", str(tmp_path)]) == 1
    (tmp_path / "junk.json").write_text("{")
    assert cli.main(["report", "--in", str(tmp_path / "junk.json"), "--out", str(tmp_path)]) == 1


def test_solver_failure_exit_two(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise RayTermination("secondary ray")

    monkeypatch.setattr(cli, "solve_market_mcp", boom)
    assert cli.main(["solve-mcp", "--cv", "0.5", "--out", str(tmp_path)]) == 2
    assert "solver failure" in capsys.readouterr().err


def test_solve_mpec_writes_summary(tmp_path):
    assert cli.main(["solve-mpec", "--leader", "l1", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "mpec.json").read_text())
    assert doc["leader"] == "l1"
    assert doc["leader_profit"] == pytest.approx(23.287e6, rel=1e-3)


@pytest.fixture(scope="module")
def eq_runs(tmp_path_factory):
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"eq{k}")
        code = cli.main(["find-equilibria", "--iters", "10", "--seed", "7", "--order", "split_half",
                         "--max-gs", "10", "--out", str(out)])
        assert code == 0
        outs.append(out)
    return outs


def test_find_equilibria_byte_identical(eq_runs):
    a, b = (o / "equilibria.json" for o in eq_runs)
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert doc["attempts"] == 10
    assert doc["provenance"]["command"] == "find-equilibria"


def test_report(eq_runs, capsys):
    out = eq_runs[0]
    assert cli.main(["report", "--in", str(out / "equilibria.json"), "--out", str(out)]) == 0
    doc = json.loads((out / "equilibria.json").read_text())
    assert len(_rows(out / "metrics.csv")) == len(doc["records"])
    assert (out / "clusters.csv").exists()
    assert "price clusters" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "fringe_epec.cli", "--out", str(tmp_path), "solve-pc"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "prices:" in r.stdout
