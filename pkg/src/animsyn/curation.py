"""Real/synthetic mixing, video embeddings and synthetic-sample selection."""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .kernels import color_histogram
from .manifest import Manifest, ManifestEntry, load_clip, write_manifest

STRATEGIES = ("random", "manual", "clip_sim")
HIST_BINS = 8
EMBED_FRAMES = 8
VIDEO_EMBED_DIM = 3 * HIST_BINS + 3


class SelectionError(ValueError):
    pass


@dataclass
class SelectionResult:
    strategy: str
    ids: list[str]
    scores: list[float] | None = None
    target: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SelectionError(f"unknown strategy {self.strategy!r}")
        if len(set(self.ids)) != len(self.ids):
            raise SelectionError("selected ids must be distinct")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "ids": list(self.ids), "scores": self.scores,
                "target": self.target}


# embeddings -------------------------------------------------------------------

def symmetric_frame_indices(F: int, k: int = EMBED_FRAMES) -> np.ndarray:
    """k indices spread over 0..F-1, closed under i -> F-1-i."""
    if F <= k:
        return np.arange(F)
    half = np.floor(np.linspace(0, F - 1, k)[: (k + 1) // 2]).astype(int)
    mirror = (F - 1 - half)[::-1]
    return np.unique(np.concatenate([half, mirror]))


def toy_video_embedding(frames: np.ndarray) -> np.ndarray:
    """Mean-pooled colour histograms of 8 sampled, 4x-downsampled frames plus
    per-channel frame-difference energy.

    frames: F x 3 x H x W in [0, 1]. Invariant to reversing the frame order.
    """
    frames = np.asarray(frames, dtype=np.float64)
    F, C, H, W = frames.shape
    idx = symmetric_frame_indices(F)
    small = frames[idx].reshape(len(idx), C, H // 4, 4, W // 4, 4).mean(axis=(3, 5))
    hist = color_histogram(np.ascontiguousarray(small.transpose(0, 2, 3, 1)), HIST_BINS).mean(axis=0)
    if F > 1:
        energy = np.sqrt((np.diff(frames, axis=0) ** 2).mean(axis=(0, 2, 3)))
    else:
        energy = np.zeros(C)
    return np.concatenate([hist, energy])


def embed_video(entry: ManifestEntry, root, embedder: Callable[[np.ndarray], np.ndarray] = toy_video_embedding) -> np.ndarray:
    try:
        frames = load_clip(entry, root)["frames"]
    except (OSError, ValueError) as exc:
        raise SelectionError(f"cannot read video for {entry.id!r}: {exc}") from exc
    return np.asarray(embedder(frames), dtype=np.float64)


def embed_manifest(manifest: Manifest, embedder=toy_video_embedding) -> Manifest:
    """Copy of the manifest with ``embedding`` filled for every entry."""
    out = [replace(e, embedding=embed_video(e, manifest.root, embedder).tolist()) for e in manifest]
    return Manifest(out, root=manifest.root)


def cosine_similarity(v_t, v_i) -> float:
    v_t = np.asarray(v_t, dtype=np.float64)
    v_i = np.asarray(v_i, dtype=np.float64)
    nt, ni = np.linalg.norm(v_t), np.linalg.norm(v_i)
    if nt == 0 or ni == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(v_t @ v_i / (nt * ni), -1.0, 1.0))


def _unit_rows(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero vector among {what}")
    return m / norms


def similarity_scores(targets: np.ndarray, candidates: np.ndarray, aggregate: str = "max") -> np.ndarray:
    """Per-candidate cosine score against a target set (max or mean over targets)."""
    t = _unit_rows(np.atleast_2d(np.asarray(targets, dtype=np.float64)), "targets")
    c = _unit_rows(np.atleast_2d(np.asarray(candidates, dtype=np.float64)), "candidates")
    sims = np.clip(c @ t.T, -1.0, 1.0)
    if aggregate == "max":
        return sims.max(axis=1)
    if aggregate == "mean":
        return sims.mean(axis=1)
    raise ValueError(f"aggregate must be 'max' or 'mean', got {aggregate!r}")


def select_top_n(targets, candidates: list[ManifestEntry], n: int, aggregate: str = "max",
                 target_ids: list[str] | None = None) -> SelectionResult:
    """Keep the n candidates most similar to the targets; ties go to the smaller id."""
    if n > len(candidates) or n < 0:
        raise SelectionError(f"cannot select {n} from {len(candidates)} candidates")
    missing = [e.id for e in candidates if e.embedding is None]
    if missing:
        raise SelectionError(f"candidates without embeddings: {missing[:5]}")
    if n == 0:
        return SelectionResult("clip_sim", [], [], {"aggregate": aggregate, "ids": target_ids})
    mat = np.array([e.embedding for e in candidates], dtype=np.float64)
    scores = similarity_scores(targets, mat, aggregate)
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i].id))[:n]
    return SelectionResult("clip_sim", [candidates[i].id for i in order],
                           [float(scores[i]) for i in order],
                           {"aggregate": aggregate, "ids": target_ids,
                            "count": int(np.atleast_2d(targets).shape[0])})


def select_random(candidates: list[ManifestEntry], n: int, seed: int) -> SelectionResult:
    if n > len(candidates) or n < 0:
        raise SelectionError(f"cannot select {n} from {len(candidates)} candidates")
    rng = np.random.default_rng([seed, 31])
    idx = rng.choice(len(candidates), size=n, replace=False)
    return SelectionResult("random", [candidates[i].id for i in idx], None, {"seed": seed})


def select_manual(candidates: list[ManifestEntry], id_list: list[str]) -> SelectionResult:
    pool = {e.id for e in candidates}
    unknown = [i for i in id_list if i not in pool]
    if unknown:
        raise SelectionError(f"unknown ids in manual selection: {unknown[:5]}")
    return SelectionResult("manual", list(id_list), None, {"source": "id_list"})


def inspection_shortlist(candidates: list[ManifestEntry], targets: list[ManifestEntry], n: int) -> list[str]:
    """Deterministic stand-in for picking by eye: prefer candidates showing the
    targets' dominant motion family, then fill by id order."""
    motions = Counter(e.motion for e in targets if e.motion)
    wanted = motions.most_common(1)[0][0] if motions else None
    same = sorted(e.id for e in candidates if e.motion == wanted)
    rest = sorted(e.id for e in candidates if e.motion != wanted)
    return (same + rest)[:n]


# mixing -----------------------------------------------------------------------

def absolute(manifest: Manifest) -> Manifest:
    """Entries with locators resolved against the manifest root."""
    root = Path(manifest.root).resolve()

    def fix(p):
        return str((root / p).resolve())

    out = [replace(e, locator=fix(e.locator), controls={k: fix(v) for k, v in e.controls.items()})
           for e in manifest]
    return Manifest(out, root="/")


def save_manifest(manifest: Manifest, path) -> Manifest:
    """Write entries with locators relative to the new file's directory."""
    path = Path(path)
    base = path.parent.resolve()
    src = absolute(manifest)

    def rel(p):
        return os.path.relpath(p, base)

    out = [replace(e, locator=rel(e.locator), controls={k: rel(v) for k, v in e.controls.items()})
           for e in src]
    write_manifest(out, path)
    return Manifest(out, root=base)


def mix_datasets(real: Manifest, synthetic: Manifest, ratio_syn: int, ratio_real: int = 1,
                 seed: int = 0) -> Manifest:
    """All real entries plus floor(ratio_syn * |real| / ratio_real) synthetic ones,
    drawn without replacement and interleaved by a seeded shuffle."""
    if ratio_real < 1 or ratio_syn < 0:
        raise ValueError("need ratio_real >= 1 and ratio_syn >= 0")
    if any(e.domain != "real" for e in real):
        raise ValueError("real manifest contains synthetic entries")
    if any(e.domain != "synthetic" for e in synthetic):
        raise ValueError("synthetic manifest contains real entries")
    need = (ratio_syn * len(real)) // ratio_real
    if need > len(synthetic):
        raise ValueError(f"ratio {ratio_syn}:{ratio_real} needs {need} synthetic entries, "
                         f"pool has {len(synthetic)}")
    rng = np.random.default_rng([seed, 47])
    real_abs, syn_abs = absolute(real), absolute(synthetic)
    if need == 0:
        return real_abs
    picked = [syn_abs[i] for i in sorted(rng.choice(len(syn_abs), size=need, replace=False))]
    merged = list(real_abs) + picked
    order = rng.permutation(len(merged))
    return Manifest([merged[i] for i in order], root="/")


def subset(manifest: Manifest, ids: list[str]) -> Manifest:
    by_id = {e.id: e for e in manifest}
    return Manifest([by_id[i] for i in ids], root=manifest.root)
