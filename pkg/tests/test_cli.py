import json
from pathlib import Path

import pytest

from srkmax.cli import main
from srkmax.harness import default_config, save_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_config(tmp_path, **over):
    cfg = default_config()
    cfg["backend"]["m"] = 12
    cfg["noise"]["J"] = 4
    cfg["T"] = 0.25
    cfg["scheme"]["tau"] = 0.025
    cfg["run"]["replicas"] = 4
    cfg["study"].update(tau_levels=[0.05, 0.025, 0.0125], ref_refinement=4, replicas=6)
    cfg.update(over)
    return str(save_config(cfg, tmp_path / "cfg.json"))


@pytest.mark.parametrize("name,sym,alg", [("implicit_euler", "false", "true"), ("midpoint", "true", "true"),
                                          ("gauss2", "true", "true")])
def test_tableau_text(capsys, name, sym, alg):
    assert main(["tableau", name]) == 0
    out = capsys.readouterr().out
    assert f"symplectic: {sym}" in out and f"algebraically stable: {alg}" in out


def test_tableau_json(capsys):
    assert main(["tableau", "gauss2", "--json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["symplectic"] is True and d["coercivity"]["status"] == "unknown"


def test_tableau_errors(tmp_path, capsys):
    assert main(["tableau", "no_such_scheme"]) == 2
    bad = tmp_path / "t.json"
    bad.write_text('{"A": [[1, 0]], "b": [1]}')
    assert main(["tableau", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_run_tau_mismatch(tmp_path, capsys):
    cfg = default_config()
    cfg["scheme"]["tau"] = 0.3
    path = save_config(cfg, tmp_path / "c.json")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "N*tau == T" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_diagnose_conservative_midpoint(tmp_path, capsys):
    out = tmp_path / "d"
    code = main(["diagnose", "--config", str(CONFIGS / "conservative_midpoint.json"), "--out", str(out)])
    text = capsys.readouterr().out
    assert code == 0 and "PASS  energy_conservation" in text
    summary = json.loads((out / "summary.json").read_text())
    assert {r["name"]: r["verdict"] for r in summary}["energy_conservation"] == "PASS"
    assert (out / "energy_law.csv").exists() and (out / "metadata.json").exists()


def test_run_is_reproducible(tmp_path):
    cfg = small_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(a), "--workers", "1"]) == 0
    assert main(["run", "--config", cfg, "--out", str(b), "--workers", "3", "--snapshots"]) == 0
    assert (a / "energy.csv").read_bytes() == (b / "energy.csv").read_bytes()
    sa, sb = (json.loads((d / "summary.json").read_text()) for d in (a, b))
    sa.pop("metadata"), sb.pop("metadata")
    assert sa == sb
    assert (b / "final_state.bin").exists()


def test_seed_precedence(tmp_path, monkeypatch, capsys):
    cfg = small_config(tmp_path)
    monkeypatch.setenv("SRKMAX_SEED", "77")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "e"), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 77
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "f"), "--json", "--seed", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 5
    monkeypatch.setenv("SRKMAX_SEED", "x")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "g")]) == 2


def test_converge_small(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "c"
    code = main(["converge", "--config", cfg, "--out", str(out), "--json"])
    payload = json.loads(capsys.readouterr().out)
    assert code in (0, 1) and code == (0 if payload["pass"] else 1)
    assert (out / "implicit_euler.csv").exists() and (out / "midpoint.summary.json").exists()
    assert len(payload["studies"]) == 2


def test_bad_arguments():
    with pytest.raises(SystemExit) as info:
        main(["run", "--config", "default", "--replicas", "0"])
    assert info.value.code == 2
