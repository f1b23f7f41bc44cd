import json

import pytest

from animsyn.experiments import (ExperimentError, ExperimentPlan, PlanKindError, parse_ratio, run_plan)
from animsyn.report import strip_wall_clock
from animsyn.training import ConfigError
from conftest import tiny_plan


def test_plan_defaults_and_round_trip():
    p = ExperimentPlan(kind="finetune")
    assert p.data["synthetic"]["count"] == 64 and p.train["stage1_steps"] == 120
    assert p.ratios == ["0:1", "1:1", "2:1", "4:1", "8:1"]
    back = ExperimentPlan.from_dict(p.to_dict())
    assert back.hash() == p.hash()
    q = ExperimentPlan.from_dict({**p.to_dict(), "output_dir": "elsewhere"})
    assert q.hash() == p.hash()
    assert ExperimentPlan.from_dict({**p.to_dict(), "seed": 5}).hash() != p.hash()


@pytest.mark.parametrize("bad,err", [
    ({"kind": "ablation"}, PlanKindError),
    ({}, PlanKindError),
    ({"kind": "finetune", "plan_version": 2}, ConfigError),
    ({"kind": "finetune", "extra": 1}, ConfigError),
    ({"kind": "ratio_scale", "ratios": ["1-1"]}, ConfigError),
    ({"kind": "ratio_scale", "ratios": ["1:0"]}, ConfigError),
    ({"kind": "finetune", "model": {"depth": 3}}, ConfigError),
    ({"kind": "finetune", "data": {"real": {"domain": "cg"}}}, ConfigError),
])
def test_plan_validation(bad, err):
    with pytest.raises(err):
        ExperimentPlan.from_dict(bad)


def test_parse_ratio():
    assert parse_ratio("8:1") == (8, 1) and parse_ratio(" 1 : 2 ") == (1, 2)


@pytest.mark.parametrize("kind,labels", [
    ("finetune", ["Baseline", "Finetuned"]),
    ("ratio_scale", ["0:1", "1:1", "4:1"]),
    ("targeted_select", ["Random", "Manual", "CLIP-sim"]),
])
def test_tiny_plans_run(kind, labels, tmp_path):
    plan = ExperimentPlan.from_dict(tiny_plan(kind))
    rep = run_plan(plan, tmp_path)
    assert [r["label"] for r in rep["rows"]] == labels
    assert (tmp_path / "report.json").exists() and (tmp_path / "plan.json").exists()
    assert rep["plan_hash"] == plan.hash()
    if kind == "targeted_select":
        sel = json.loads((tmp_path / "selections.json").read_text())
        assert set(sel) == {"random", "manual", "clip_sim"}
        assert all(len(v["ids"]) == 2 for v in sel.values())
        assert len((tmp_path / "groups" / "clip-sim.jsonl").read_text().splitlines()) == 4
    if kind == "ratio_scale":
        assert len((tmp_path / "mixes" / "4-1.jsonl").read_text().splitlines()) == 2 + 8


def test_rerun_is_identical(tmp_path):
    plan = ExperimentPlan.from_dict(tiny_plan("finetune"))
    a = strip_wall_clock(run_plan(plan, tmp_path / "a"))
    b = strip_wall_clock(run_plan(plan, tmp_path / "b"))
    assert a == b


def test_stage_failure_is_wrapped(tmp_path):
    raw = tiny_plan("ratio_scale", ratios=["0:1", "8:1"])
    with pytest.raises(ExperimentError, match="mix 8:1"):
        run_plan(ExperimentPlan.from_dict(raw), tmp_path)
    # earlier stages keep their outputs
    assert (tmp_path / "models" / "0-1" / "stage2.npz").exists()


def test_existing_manifests_are_used(tmp_path):
    first = tmp_path / "first"
    run_plan(ExperimentPlan.from_dict(tiny_plan("finetune")), first)
    raw = tiny_plan("finetune")
    raw["data"] = {k: {"manifest": str(first / "data" / k / f"{k}.jsonl")} for k in ("real", "synthetic", "eval")}
    rep = run_plan(ExperimentPlan.from_dict(raw), tmp_path / "second")
    assert len(rep["rows"]) == 2
    assert not (tmp_path / "second" / "data").exists()
