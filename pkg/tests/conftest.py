import numpy as np
import pytest
import torch

from animsyn.manifest import read_manifest
from animsyn.toydata import DatasetSpec, generate_toy_dataset


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture(scope="session")
def toy_real(tmp_path_factory):
    root = tmp_path_factory.mktemp("real")
    spec = DatasetSpec(count=3, frames=8, height=32, width=32, domain="real", motion="mixed")
    generate_toy_dataset(spec, 5, root)
    return read_manifest(root / "real.jsonl")


@pytest.fixture(scope="session")
def toy_synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    spec = DatasetSpec(count=6, frames=8, height=32, width=32, domain="synthetic", motion="mixed")
    generate_toy_dataset(spec, 6, root)
    return read_manifest(root / "synthetic.jsonl")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_plan(kind, **over):
    """Smallest runnable plan: 32x32 clips, a few training steps."""
    clip = {"frames": 4, "height": 32, "width": 32, "motion": "mixed"}
    plan = {
        "kind": kind, "name": f"tiny_{kind}", "seed": 1,
        "data": {"real": {"count": 2, **clip}, "synthetic": {"count": 8, **clip},
                 "eval": {"count": 1, **clip}},
        "model": {"image_size": 32, "base_width": 4, "width_growth": 1, "heads": 1,
                  "temporal_heads": 1, "ctx_dim": 4, "normal_dim": 8},
        "train": {"stage1_steps": 2, "stage2_steps": 2, "finetune_steps": 2,
                  "stage1": {"batch_size": 2}, "stage2": {"clip_length": 4}},
        "eval": {"steps": 2, "frames": 4},
        "ratios": ["0:1", "1:1", "4:1"],
        "selection": {"n": 2, "real_count": 2},
    }
    plan.update(over)
    return plan


ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
