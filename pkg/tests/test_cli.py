import json
import subprocess
import sys
from pathlib import Path

import pytest

from rsplab.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main

GOLDEN = Path(__file__).resolve().parent.parent / "golden"
BASE = {"seed": 7, "flow": "download-ac", "orders": [{"matchingId": "MATCH-001", "iccid": "89049032000000000001"}]}


def scenario(tmp_path, name="s.json", **overrides):
    path = tmp_path / name
    path.write_text(json.dumps({**BASE, **overrides}))
    return path


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, (json.loads(out) if out else None)


def test_pki_init_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    code, first = cli(capsys, "pki", "init", "--seed", 5, "--out", a, "--devices", 2)
    assert code == EXIT_OK
    _, second = cli(capsys, "pki", "init", "--seed", 5, "--out", b, "--devices", 2)
    assert a.read_bytes() == b.read_bytes() and first["sha256"] == second["sha256"]
    assert {"ci", "eum", "euicc:dev-1", "euicc:dev-2", "dpauth:smdp.example.com"} <= set(first["keyIds"])
    _, other = cli(capsys, "pki", "init", "--seed", 6, "--out", b)
    assert other["sha256"] != first["sha256"]


def test_pki_init_unwritable(tmp_path, capsys):
    code, _ = cli(capsys, "pki", "init", "--seed", 1, "--out", tmp_path / "missing" / "f.json")
    assert code == EXIT_CONFIG


def test_run_with_fixture_matches_seeded_pki(tmp_path, capsys):
    cli(capsys, "pki", "init", "--seed", 7, "--out", tmp_path / "fixture.json")
    with_fixture = scenario(tmp_path, "f.json", pkiFixture="fixture.json")
    seeded = scenario(tmp_path, "p.json", pkiSeed=7)
    code, out = cli(capsys, "run", "--scenario", with_fixture, "--transcript", tmp_path / "f.jsonl")
    assert code == EXIT_OK and out["report"]["outcome"] == "installed"
    cli(capsys, "run", "--scenario", seeded, "--transcript", tmp_path / "p.jsonl")
    assert (tmp_path / "f.jsonl").read_bytes() == (tmp_path / "p.jsonl").read_bytes()


def test_run_exit_codes(tmp_path, capsys):
    assert cli(capsys, "run", "--scenario", scenario(tmp_path))[0] == EXIT_OK
    wrong = scenario(tmp_path, "w.json", expect={"outcome": "cancelled"})
    assert cli(capsys, "run", "--scenario", wrong)[0] == EXIT_FAIL
    unmet = scenario(tmp_path, "u.json", lpa={"consent": "reject"})
    code, out = cli(capsys, "run", "--scenario", unmet)
    assert code == EXIT_FAIL and out["report"]["reason"] == "endUserRejection"
    assert cli(capsys, "run", "--scenario", tmp_path / "absent.json")[0] == EXIT_CONFIG
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert cli(capsys, "run", "--scenario", broken)[0] == EXIT_CONFIG
    bad_flow = scenario(tmp_path, "b.json", flow="teleport")
    assert cli(capsys, "run", "--scenario", bad_flow)[0] == EXIT_CONFIG


def test_transcript_to_unwritable_path(tmp_path, capsys):
    code, out = cli(capsys, "run", "--scenario", scenario(tmp_path), "--transcript", tmp_path / "no" / "t.jsonl")
    assert code == EXIT_CONFIG and "error" in out


def test_seed_precedence(tmp_path, capsys, monkeypatch):
    path = scenario(tmp_path)
    monkeypatch.delenv("RSPLAB_SEED", raising=False)
    assert cli(capsys, "run", "--scenario", path)[1]["seed"] == 7
    monkeypatch.setenv("RSPLAB_SEED", "21")
    assert cli(capsys, "run", "--scenario", path)[1]["seed"] == 21
    assert cli(capsys, "run", "--scenario", path, "--seed", 3)[1]["seed"] == 3
    monkeypatch.setenv("RSPLAB_SEED", "many")
    assert cli(capsys, "run", "--scenario", path)[0] == EXIT_CONFIG


def test_seed_changes_the_transcript(tmp_path, capsys):
    path = scenario(tmp_path)
    cli(capsys, "run", "--scenario", path, "--seed", 1, "--transcript", tmp_path / "1.jsonl")
    cli(capsys, "run", "--scenario", path, "--seed", 2, "--transcript", tmp_path / "2.jsonl")
    assert (tmp_path / "1.jsonl").read_bytes() != (tmp_path / "2.jsonl").read_bytes()


@pytest.mark.parametrize("name", sorted(p.stem for p in (GOLDEN / "scenarios").glob("*.json")))
def test_golden_scenarios(name, capsys):
    code, out = cli(
        capsys, "run", "--scenario", GOLDEN / "scenarios" / f"{name}.json", "--golden", GOLDEN / "transcripts" / f"{name}.jsonl"
    )
    assert code == EXIT_OK
    assert out["golden"] == {"equal": True, "firstDivergence": None}


def test_golden_mismatch_fails(tmp_path, capsys):
    path = scenario(tmp_path, seed=99)
    code, out = cli(capsys, "run", "--scenario", path, "--golden", GOLDEN / "transcripts" / "download-ac.jsonl")
    assert code == EXIT_FAIL and out["golden"]["equal"] is False and out["golden"]["firstDivergence"] >= 1


def test_transcript_verify(tmp_path, capsys):
    golden = GOLDEN / "transcripts" / "download-ac.jsonl"
    assert cli(capsys, "transcript", "verify", golden, "--golden", golden) == (EXIT_OK, {"equal": True, "firstDivergence": None})
    lines = golden.read_text().splitlines()
    short = tmp_path / "short.jsonl"
    short.write_text("\n".join(lines[:5]) + "\n")
    assert cli(capsys, "transcript", "verify", short, "--golden", golden) == (EXIT_FAIL, {"equal": False, "firstDivergence": 6})
    assert cli(capsys, "transcript", "verify", tmp_path / "none.jsonl", "--golden", golden)[0] == EXIT_CONFIG
    junk = tmp_path / "junk.jsonl"
    junk.write_text("not json\n")
    assert cli(capsys, "transcript", "verify", junk, "--golden", golden)[0] == EXIT_CONFIG


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "rsplab.cli", "run", "--scenario", str(scenario(tmp_path))],
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["report"]["outcome"] == "installed"
