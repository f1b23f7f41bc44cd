"""Experiment plans and the end-to-end pipelines behind the three study types:
fine-tuning on synthetic data, sim:real ratio scaling and targeted selection."""
from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import curation
from .denoiser import ModelConfig
from .manifest import Manifest, read_manifest
from .metrics import Embedders, MetricReport, evaluate
from .report import RATIO_LABELS, STRATEGY_LABELS, build_report, write_report
from .toydata import DatasetSpec, generate_toy_dataset
from .training import ConfigError, TrainConfig, finetune, train_stage1, train_stage2

log = logging.getLogger(__name__)

PLAN_VERSION = 1
KINDS = ("finetune", "ratio_scale", "targeted_select")


class PlanKindError(ConfigError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


TOY_DATA = {
    "real": {"count": 8, "domain": "real", "motion": "mixed"},
    "synthetic": {"count": 64, "domain": "synthetic", "motion": "mixed"},
    "eval": {"count": 4, "domain": "real", "motion": "mixed", "id_prefix": "eval"},
}
TOY_MODEL = {"base_width": 16, "heads": 4, "temporal_heads": 4, "ctx_dim": 32}
TOY_TRAIN = {"stage1_steps": 120, "stage2_steps": 40, "finetune_steps": 60,
             "stage1": {}, "stage2": {}}
TOY_EVAL = {"steps": 25, "frames": 16}


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentPlan:
    kind: str
    name: str = "experiment"
    seed: int = 0
    output_dir: str | None = None
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    ratios: list = field(default_factory=lambda: list(RATIO_LABELS))
    selection: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlanKindError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        self.data = _deep_merge(TOY_DATA, self.data)
        self.model = _deep_merge(TOY_MODEL, self.model)
        self.train = _deep_merge(TOY_TRAIN, self.train)
        self.eval = _deep_merge(TOY_EVAL, self.eval)
        self.selection = _deep_merge({"n": 3, "real_count": 8, "aggregate": "max",
                                      "manual_ids": None, "strategies": list(STRATEGY_LABELS)},
                                     self.selection)
        for r in self.ratios:
            parse_ratio(r)
        try:
            ModelConfig.from_dict(self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc
        for key, spec in self.data.items():
            if "manifest" not in spec:
                try:
                    DatasetSpec.from_dict(spec)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid dataset spec {key!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return {"plan_version": PLAN_VERSION, "kind": self.kind, "name": self.name,
                "seed": self.seed, "output_dir": self.output_dir, "data": self.data,
                "model": self.model, "train": self.train, "eval": self.eval,
                "ratios": list(self.ratios), "selection": self.selection}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        if not isinstance(d, dict):
            raise ConfigError("plan must be a JSON object")
        d = dict(d)
        version = d.pop("plan_version", PLAN_VERSION)
        if version != PLAN_VERSION:
            raise ConfigError(f"unsupported plan version {version!r}")
        if "kind" not in d:
            raise PlanKindError("plan has no 'kind'")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parse_ratio(label: str) -> tuple[int, int]:
    try:
        syn, real = (int(x) for x in str(label).replace(" ", "").split(":"))
    except ValueError:
        raise ConfigError(f"ratio must look like 'syn:real', got {label!r}") from None
    if syn < 0 or real < 1:
        raise ConfigError(f"invalid ratio {label!r}")
    return syn, real


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except (ConfigError, ExperimentError):
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc


class Runner:
    """Executes one plan inside its output directory; intermediate files are kept."""

    def __init__(self, plan: ExperimentPlan, out_dir, embedders: Embedders | None = None):
        self.plan = plan
        self.out = Path(out_dir)
        self.embedders = embedders or Embedders()
        self.timing: dict[str, float] = {}

    # data
    def dataset(self, key: str, offset: int) -> Manifest:
        spec = self.plan.data[key]
        if "manifest" in spec:
            with stage(f"load {key} manifest"):
                return read_manifest(spec["manifest"])
        with stage(f"generate {key} data"):
            ds = DatasetSpec.from_dict({"id_prefix": key, **spec})
            root = self.out / "data" / key
            generate_toy_dataset(ds, self.plan.seed + offset, root, manifest_name=f"{key}.jsonl")
            return read_manifest(root / f"{key}.jsonl")

    def train_cfg(self, which: int, steps_key: str, seed_offset: int) -> TrainConfig:
        d = {**self.plan.train.get(f"stage{which}", {}), "stage": which,
             "steps": int(self.plan.train[steps_key]), "seed": self.plan.seed + seed_offset,
             "model": self.plan.model}
        return TrainConfig.from_dict(d)

    def train_model(self, label: str, manifest: Manifest, seed_offset: int) -> Path:
        mdir = self.out / "models" / _slug(label)
        t0 = time.time()
        with stage(f"train {label} stage 1"):
            ck1, _ = train_stage1(self.train_cfg(1, "stage1_steps", seed_offset), manifest, mdir)
        with stage(f"train {label} stage 2"):
            ck2, _ = train_stage2(self.train_cfg(2, "stage2_steps", seed_offset), ck1, manifest, mdir)
        self.timing[f"train {label}"] = time.time() - t0
        return ck2

    def evaluate(self, label: str, checkpoint, eval_set: Manifest) -> MetricReport:
        t0 = time.time()
        with stage(f"evaluate {label}"):
            rep = evaluate(checkpoint, eval_set, self.embedders, label=label,
                           steps=int(self.plan.eval["steps"]), seed=self.plan.seed,
                           max_frames=self.plan.eval.get("frames"))
        self.timing[f"evaluate {label}"] = time.time() - t0
        return rep

    def finish(self, reports: list[MetricReport]) -> dict:
        rows = [{"label": r.label, **r.aggregate} for r in reports]
        per_video = {r.label: r.rows for r in reports}
        rep = build_report(self.plan.kind, rows, per_video, reports[0].embedders,
                           plan=self.plan.to_dict(), timing=self.timing)
        rep["plan_hash"] = self.plan.hash()
        write_report(rep, self.out)
        return rep

    # pipelines
    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "plan.json").write_text(json.dumps(self.plan.to_dict(), indent=2) + "\n")
        return getattr(self, f"run_{self.plan.kind}")()

    def run_finetune(self) -> dict:
        real = self.dataset("real", 0)
        syn = self.dataset("synthetic", 1)
        ev = self.dataset("eval", 2)
        base = self.train_model("Baseline", real, 0)
        with stage("finetune on synthetic"):
            cfg = self.train_cfg(2, "finetune_steps", 0)
            cfg.trainable = self.plan.train.get("finetune_trainable", "all")
            tuned, _ = finetune(base, syn, cfg, self.out / "models" / "finetuned")
        return self.finish([self.evaluate("Baseline", base, ev),
                            self.evaluate("Finetuned", tuned, ev)])

    def run_ratio_scale(self) -> dict:
        real = self.dataset("real", 0)
        syn = self.dataset("synthetic", 1)
        ev = self.dataset("eval", 2)
        reports = []
        for label in self.plan.ratios:
            rs, rr = parse_ratio(label)
            name = f"{rs}:{rr}"
            with stage(f"mix {name}"):
                mixed = curation.mix_datasets(real, syn, rs, rr, seed=self.plan.seed)
                curation.save_manifest(mixed, self.out / "mixes" / f"{_slug(name)}.jsonl")
            ck = self.train_model(name, mixed, 0)
            reports.append(self.evaluate(name, ck, ev))
        return self.finish(reports)

    def run_targeted_select(self) -> dict:
        sel = self.plan.selection
        real_all = self.dataset("real", 0)
        syn = self.dataset("synthetic", 1)
        ev = self.dataset("eval", 2)
        n, n_real = int(sel["n"]), int(sel["real_count"])
        if n_real > len(real_all):
            raise ConfigError(f"selection needs {n_real} real clips, have {len(real_all)}")
        real = Manifest(real_all[:n_real], root=real_all.root)
        with stage("embed candidates and targets"):
            syn_e = curation.embed_manifest(syn, self.embedders.video)
            targets = np.array([curation.embed_video(e, ev.root, self.embedders.video) for e in ev])
        selections = {}
        with stage("select synthetic samples"):
            for strategy in sel["strategies"]:
                if strategy == "random":
                    res = curation.select_random(syn_e, n, self.plan.seed)
                elif strategy == "manual":
                    ids = sel["manual_ids"] or curation.inspection_shortlist(syn_e, list(ev), n)
                    res = curation.select_manual(syn_e, ids)
                elif strategy == "clip_sim":
                    res = curation.select_top_n(targets, syn_e, n, sel["aggregate"], ev.ids())
                else:
                    raise ConfigError(f"unknown selection strategy {strategy!r}")
                selections[strategy] = res
            (self.out / "selections.json").write_text(json.dumps(
                {k: v.to_dict() for k, v in selections.items()}, indent=2) + "\n")
        reports = []
        for strategy, res in selections.items():
            label = STRATEGY_LABELS[strategy]
            with stage(f"assemble {label} group"):
                group = Manifest(list(curation.absolute(real))
                                 + list(curation.absolute(curation.subset(syn, res.ids))), root="/")
                curation.save_manifest(group, self.out / "groups" / f"{_slug(label)}.jsonl")
            ck = self.train_model(label, group, 0)
            reports.append(self.evaluate(label, ck, ev))
        return self.finish(reports)


def _slug(label: str) -> str:
    return label.replace(":", "-").replace(" ", "_").lower()


def run_plan(plan: ExperimentPlan, out_dir, embedders: Embedders | None = None) -> dict:
    return Runner(plan, out_dir, embedders).run()
