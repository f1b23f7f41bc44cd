import hashlib
import json
import subprocess
import sys

import pytest
import yaml

from animsyn import cli
from conftest import tiny_plan


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


SPEC = {"datasets": [{"count": 2, "frames": 2, "height": 16, "width": 16, "domain": "real"},
                     {"count": 1, "frames": 2, "height": 16, "width": 16, "domain": "synthetic"}]}


def test_gen_data_is_reproducible(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump(SPEC))
    for d in ("a", "b"):
        assert cli.main(["gen-data", str(spec), "--seed", "4", "--out", str(tmp_path / d)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert (tmp_path / "a" / "real" / "real.jsonl").exists()
    assert (tmp_path / "a" / "synthetic" / "synthetic.jsonl").exists()
    assert str(tmp_path / "a" / "real" / "real.jsonl") in capsys.readouterr().out


def test_gen_data_single_spec(tmp_path):
    spec = write(tmp_path / "one.json", SPEC["datasets"][0])
    assert cli.main(["gen-data", spec, "--out", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize("text", ["[1, 2]", "{count: [unclosed", '{"count": 1, "height": 12}', '{"frames": 2}'])
def test_gen_data_bad_spec(tmp_path, text):
    spec = tmp_path / "bad.yaml"
    spec.write_text(text)
    assert cli.main(["gen-data", str(spec), "--out", str(tmp_path / "o")]) == cli.EXIT_SCHEMA


def test_run_experiment_and_report(tmp_path, capsys):
    plan = write(tmp_path / "plan.json", tiny_plan("ratio_scale", ratios=["1:1", "0:1"]))
    assert cli.main(["run-experiment", plan, "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "| Sim:real distribution |" in out
    assert cli.main(["report", str(tmp_path / "run"), "--out", str(tmp_path / "merged")]) == 0
    assert (tmp_path / "merged" / "radar.json").exists()


def test_seed_override_and_env_out(tmp_path, monkeypatch):
    plan = write(tmp_path / "plan.json", tiny_plan("finetune"))
    monkeypatch.setenv("ANIMSYN_OUT", str(tmp_path / "env"))
    rep = cli.cmd_run_experiment(plan, seed=9)
    assert rep["plan"]["seed"] == 9
    assert (tmp_path / "env" / "tiny_finetune" / "report.json").exists()


def test_exit_codes(tmp_path):
    assert cli.main(["run-experiment", write(tmp_path / "k.json", {"kind": "ablation"})]) == cli.EXIT_USAGE
    assert cli.main(["run-experiment", write(tmp_path / "c.json", {"kind": "finetune", "seedz": 1})]) == cli.EXIT_CONFIG
    (tmp_path / "j.json").write_text("{oops")
    assert cli.main(["run-experiment", str(tmp_path / "j.json")]) == cli.EXIT_CONFIG
    assert cli.main(["run-experiment", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    assert cli.main(["report", str(tmp_path / "nothing")]) == cli.EXIT_SCHEMA
    failing = tiny_plan("ratio_scale", ratios=["0:1", "8:1"])
    assert cli.main(["run-experiment", write(tmp_path / "f.json", failing),
                     "--out", str(tmp_path / "f")]) == cli.EXIT_RUNTIME
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "animsyn.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "run-experiment" in out.stdout
