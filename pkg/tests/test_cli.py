import json
import os
from pathlib import Path

import pytest

from poaw.cli import main

from test_sim import SCENARIO


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(SCENARIO)
    return path


def files_under(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_simulate_writes_outputs(scenario, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", str(scenario), "--out", str(out)]) == 0
    assert sorted(files_under(out)) == ["agents.csv", "chain.jsonl", "competitions.csv", "manifest.json",
                                        "summary.json"]
    man = json.loads((out / "manifest.json").read_text())
    digest = man["config_digest"]
    assert (out / "agents.csv").read_text().startswith(f"# config_digest={digest}")
    assert json.loads((out / "chain.jsonl").read_text().splitlines()[0])["config_digest"] == digest
    assert "1/1 competitions sealed, 0 invariant breaches" in capsys.readouterr().out


def test_simulate_reruns_are_byte_identical(scenario, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", str(scenario), "--out", str(a)]) == 0
    assert main(["simulate", str(scenario), "--out", str(b)]) == 0
    assert files_under(a) == files_under(b)


def test_simulate_seed_override_changes_digest(scenario, tmp_path):
    main(["simulate", str(scenario), "--out", str(tmp_path / "a")])
    main(["simulate", str(scenario), "--out", str(tmp_path / "b"), "--seed", "9"])
    da = json.loads((tmp_path / "a" / "manifest.json").read_text())["config_digest"]
    db = json.loads((tmp_path / "b" / "manifest.json").read_text())["config_digest"]
    assert da != db


def test_nothing_written_outside_out_dir(scenario, tmp_path, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    main(["simulate", str(scenario), "--out", str(tmp_path / "run")])
    main(["emit-frontier", "--out", str(tmp_path / "fr")])
    assert os.listdir(work) == []


def test_config_error_exit_code(scenario, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SCENARIO.replace("r_s: 5", "r_s: -1"))
    assert main(["simulate", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "config error: line 5: protocol.r_s" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_bad_override_exit_code(scenario, tmp_path):
    assert main(["simulate", str(scenario), "--set", "protocol.nonsense=1", "--out", str(tmp_path / "x")]) == 2
    assert main(["verify-theorem", "--set", "seed=1"]) == 2


def test_verify_theorem_defaults(capsys):
    assert main(["verify-theorem"]) == 0
    assert capsys.readouterr().out.strip() == "PoS 1.095, O(1) 1.0625, dominance: yes, solver upside: yes"


def test_verify_theorem_with_arguments(capsys, tmp_path):
    assert main(["verify-theorem", "--P-vstake", "0.15", "--p-pools", "0.10", "--out", str(tmp_path)]) == 0
    assert "O(1) 1.035," in capsys.readouterr().out
    assert json.loads((tmp_path / "theorem.json").read_text())["result"]["dominance"] is True


def test_verify_theorem_rejects_bad_fraction():
    assert main(["verify-theorem", "--p-pools", "1.5"]) == 2


def test_emit_frontier(tmp_path):
    assert main(["emit-frontier", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "frontier.csv").read_text().splitlines()
    assert lines[0].startswith("# config_digest=") and lines[1] == "r,P_vstake,p_pools,o1_factor"
    for line in lines[2:]:
        r, pv, pp, _ = map(float, line.split(","))
        assert abs((1 + pv) * (1 - pp) - (0.95 * r + 0.04)) <= 1e-12


def test_emit_frontier_single_point(tmp_path):
    assert main(["emit-frontier", "--r", "1.1", "--grid-n", "1", "--grid-max", "0.25", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "frontier.csv").read_text().splitlines()) == 3


def test_emit_frontier_empty(tmp_path, capsys):
    assert main(["emit-frontier", "--r", "1.0", "--out", str(tmp_path / "none")]) == 3
    assert capsys.readouterr().err.startswith("empty_frontier:")
    assert not (tmp_path / "none").exists()


def test_attack_command(tmp_path, capsys):
    assert main(["attack", "fork", "--trials", "50", "--stake-share", "0.6", "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "attack.json").read_text())
    assert rec["attack"] == "fork" and rec["metrics"]["success_rate"] > 0.3
    assert capsys.readouterr().out.startswith("attack fork: n/a")


def test_attack_reruns_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["attack", "withhold", "--trials", "500", "--runs", "1", "--out", str(tmp_path / d)]) == 0
    assert files_under(tmp_path / "a") == files_under(tmp_path / "b")


def test_report(scenario, tmp_path):
    run = tmp_path / "run"
    main(["simulate", str(scenario), "--out", str(run)])
    assert main(["report", str(run)]) == 0
    text = (run / "report.md").read_text()
    assert text.startswith("# simulate run") and "| alice |" in text


def test_report_requires_manifest(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
