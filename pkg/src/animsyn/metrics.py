"""Video quality metrics: PSNR, SSIM, Frechet distance, identity similarity and
a pluggable perceptual slot, plus the evaluation driver and table rendering."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conditioning import ControlBundle
from .curation import cosine_similarity, toy_video_embedding
from .kernels import gaussian_filter_valid
from .manifest import Manifest, ManifestError, load_clip

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SHRINKAGE = 0.01
EIG_TOL = 1e-8
LUMA = np.array([0.299, 0.587, 0.114])

METRICS = ("psnr", "ssim", "perceptual", "frechet", "csim")
HIGHER_BETTER = {"psnr": True, "ssim": True, "perceptual": False, "frechet": False, "csim": True}
COLUMN_NAMES = {"psnr": "PSNR", "ssim": "SSIM", "perceptual": "LPIPS", "frechet": "FVD", "csim": "CSIM"}


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for data in [0, 1]; identical inputs give PSNR_CAP."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def to_gray(video: np.ndarray) -> np.ndarray:
    """(F, 3, H, W) or (3, H, W) RGB -> luma with BT.601 weights; 2-D input passes through."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 2:
        return video[None]
    if video.ndim == 3 and video.shape[0] == 3:
        video = video[None]
    if video.ndim == 4:
        if video.shape[1] != 3:
            raise ValueError(f"expected F x 3 x H x W, got {video.shape}")
        return np.tensordot(LUMA, video, axes=([0], [1]))
    if video.ndim == 3:
        return video
    raise ValueError(f"unsupported video shape {video.shape}")


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = gaussian_filter_valid(x, g)
    my = gaussian_filter_valid(y, g)
    sxx = gaussian_filter_valid(x * x, g) - mx * mx
    syy = gaussian_filter_valid(y * y, g) - my * my
    sxy = gaussian_filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM on luma, valid region only; mean per frame, then over frames."""
    a, b = _check_pair(a, b)
    ga, gb = to_gray(a), to_gray(b)
    if min(ga.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"frames {ga.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    per_frame = [float(ssim_map(np.ascontiguousarray(x), np.ascontiguousarray(y), data_range).mean())
                 for x, y in zip(ga, gb)]
    return float(np.clip(np.mean(per_frame), -1.0, 1.0))


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((m + m.T) / 2.0)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.any(w < -EIG_TOL * scale):
        log.warning("clamping eigenvalue %.3g to 0 in matrix square root", float(w.min()))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_fit(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    n, k = feats.shape
    mu = feats.mean(axis=0)
    if n < 2:
        cov = np.zeros((k, k))
    else:
        cov = np.cov(feats, rowvar=False).reshape(k, k)
    if n < k + 1:
        cov = (1.0 - SHRINKAGE) * cov + SHRINKAGE * np.trace(cov) / k * np.eye(k)
    return mu, cov


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of (S_a S_b)^(1/2) is taken from the eigenvalues of the
    symmetric product S_a^(1/2) S_b S_a^(1/2), which shares its spectrum.
    """
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"dimension mismatch: {mu_a.shape} vs {mu_b.shape}")
    root_a = _sym_sqrt(cov_a)
    w = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.any(w < -EIG_TOL * scale):
        log.warning("clamping eigenvalue %.3g to 0 in covariance product", float(w.min()))
    tr_cross = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu_a - mu_b
    d = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    if d < 0.0:
        log.info("clamping Frechet distance %.3g to 0", d)
        d = 0.0
    return d


def frechet_distance(feats_a, feats_b) -> float:
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ValueError(f"dimension mismatch: {feats_a.shape[1]} vs {feats_b.shape[1]}")
    return frechet_from_stats(*gaussian_fit(feats_a), *gaussian_fit(feats_b))


def csim(id_embed_a, id_embed_b) -> float:
    return cosine_similarity(id_embed_a, id_embed_b)


def toy_identity_embedding(frames: np.ndarray, face_maps: np.ndarray) -> np.ndarray:
    """Skin colour inside the face raster, hair colour in the band above it and
    relative head size, averaged over frames. Returns a 7-vector."""
    frames = np.asarray(frames, dtype=np.float64)
    face_maps = np.asarray(face_maps, dtype=np.float64)
    F, _, H, W = frames.shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    rows = []
    for f in range(F):
        region = face_maps[f].max(axis=0) > 0.25
        area = int(region.sum())
        if area == 0:
            continue
        cy, cx = yy[region].mean(), xx[region].mean()
        r = math.sqrt(area / math.pi)
        skin = frames[f][:, region].mean(axis=1)
        d_hair = np.hypot(xx - cx, yy - (cy - 0.35 * r))
        band = (d_hair < r) & (np.hypot(xx - cx, yy - cy) > 1.05 * r)
        hair = frames[f][:, band].mean(axis=1) if band.any() else skin
        rows.append(np.concatenate([skin - 0.5, hair - 0.5, [r / (0.11 * W) - 1.0]]))
    if not rows:
        raise ValueError("face raster is empty in every frame")
    return np.mean(rows, axis=0)


def no_perceptual(a, b):
    return None


@dataclass
class Embedders:
    """Pluggable feature extractors; names are carried into reports."""

    video: Callable[[np.ndarray], np.ndarray] = toy_video_embedding
    identity: Callable[[np.ndarray, np.ndarray], np.ndarray] = toy_identity_embedding
    perceptual: Callable[[np.ndarray, np.ndarray], float | None] = no_perceptual
    names: dict = field(default_factory=lambda: {"video": "toy-histogram-motion",
                                                 "identity": "toy-face-raster",
                                                 "perceptual": None})


@dataclass
class MetricReport:
    """Per-video rows plus an aggregate row; absent metrics are None, never 0."""

    label: str
    rows: list[dict]
    aggregate: dict
    embedders: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"label": self.label, "rows": self.rows, "aggregate": self.aggregate,
                "embedders": self.embedders}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        missing = {"label", "rows", "aggregate"} - set(d)
        if missing:
            raise ManifestError(f"metric report missing {sorted(missing)}")
        return cls(d["label"], d["rows"], d["aggregate"], d.get("embedders", {}))


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def score_videos(label: str, ids: list[str], generated: list[np.ndarray], truth: list[np.ndarray],
                 face_maps: list[np.ndarray], embedders: Embedders | None = None) -> MetricReport:
    emb = embedders or Embedders()
    rows = []
    feats_g, feats_t = [], []
    for vid, g, t, fm in zip(ids, generated, truth, face_maps):
        p = emb.perceptual(g, t)
        rows.append({"id": vid, "psnr": psnr(g, t), "ssim": ssim(g, t),
                     "perceptual": None if p is None else float(p),
                     "csim": csim(emb.identity(g, fm), emb.identity(t, fm))})
        feats_g.append(emb.video(g))
        feats_t.append(emb.video(t))
    agg = {k: _mean_or_none([r[k] for r in rows]) for k in ("psnr", "ssim", "perceptual", "csim")}
    agg["frechet"] = frechet_distance(np.array(feats_g), np.array(feats_t))
    return MetricReport(label, rows, agg, dict(emb.names))


def evaluate(checkpoint, eval_manifest: Manifest, embedders: Embedders | None = None,
             label: str = "model", steps: int = 50, seed: int = 0, max_frames: int | None = None,
             predictor_factory=None) -> MetricReport:
    """Generate every eval entry from its first frame and controls, then score.

    Ground truth is the clip passed through the toy codec, so a perfect
    latent generator scores exactly. ``predictor_factory(x0_latent)`` optionally replaces the network with a
    per-video predictor (oracle checks).
    """
    from .codec import from_model_latent, to_model_latent
    from .training import ScheduleConfig, sample

    if len(eval_manifest) == 0:
        raise ValueError("evaluation manifest is empty")
    ids, gens, truths, faces = [], [], [], []
    for i, entry in enumerate(eval_manifest):
        clip = load_clip(entry, eval_manifest.root)
        for key in ("body", "face", "normal", "mask", "background"):
            if key not in clip:
                raise ManifestError(f"entry {entry.id!r} lacks ground-truth {key!r}")
        n = entry.frame_count if max_frames is None else min(entry.frame_count, max_frames)
        frames = clip["frames"][:n]
        bundle = ControlBundle(clip["body"][:n], clip["face"][:n], clip["normal"][:n])
        predictor, schedule = None, None
        if predictor_factory is not None:
            schedule = ScheduleConfig().build()
            predictor = predictor_factory(to_model_latent(frames), schedule)
        gen = sample(checkpoint, frames[0], bundle, clip["background"], clip["mask"][:n],
                     steps=steps, seed=seed + i, predictor=predictor, schedule=schedule)
        ids.append(entry.id)
        gens.append(gen)
        truths.append(np.clip(from_model_latent(to_model_latent(frames)), 0.0, 1.0))
        faces.append(clip["face"][:n])
    return score_videos(label, ids, gens, truths, faces, embedders)


def oracle_factory(x0_latent, schedule):
    """Predictor factory returning the exact v for the ground-truth latent."""
    from .diffusion import oracle_v
    return oracle_v(x0_latent, schedule)


# tables -----------------------------------------------------------------------

def _fmt(v, digits: int = 4) -> str:
    if v is None:
        return "n/a"
    return f"{v:.{digits}f}"


def best_values(rows: list[dict], columns: list[str]) -> dict:
    best = {}
    for c in columns:
        vals = [r.get(c) for r in rows if r.get(c) is not None]
        if vals:
            best[c] = max(vals) if HIGHER_BETTER[c] else min(vals)
    return best


def render_table(rows: list[dict], columns: list[str], first_header: str = "",
                 names: dict | None = None, digits: int = 4) -> str:
    """Markdown table with direction arrows; the best value per column is bold."""
    names = {**COLUMN_NAMES, **(names or {})}
    head = [first_header] + [f"{names[c]}{'↑' if HIGHER_BETTER[c] else '↓'}" for c in columns]
    best = best_values(rows, columns)
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [str(r["label"])]
        for c in columns:
            v = r.get(c)
            s = _fmt(v, digits)
            if v is not None and len(rows) > 1 and c in best and v == best[c]:
                s = f"**{s}**"
            cells.append(s)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def report_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
