"""Procedural toy human videos with aligned control maps.

Each clip shows an upper-body stick figure (torso, arms, neck, head, hair)
moving with a seeded oscillation. Alongside the RGB frames the renderer emits
the body-skeleton raster, the face raster, an analytic surface-normal raster,
a foreground mask and the static background plate.

The synthetic domain is flat shaded over a flat backdrop. The real domain adds
Lambertian shading, a textured backdrop and per-frame sensor noise, so the two
are separable by high-frequency pixel variance (see ``domain_statistic``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .kernels import rasterize_capsules
from .manifest import ManifestEntry, write_manifest

DOMAINS = ("real", "synthetic")
MOTIONS = ("talk", "wave", "dance")

# Skeleton limb colours, in capsule order below.
_LIMB_COLORS = np.array([
    [1.0, 0.0, 0.0],   # torso
    [1.0, 0.6, 0.0],   # neck
    [0.0, 1.0, 0.0],   # left upper arm
    [0.0, 1.0, 1.0],   # left forearm
    [0.0, 0.0, 1.0],   # right upper arm
    [1.0, 0.0, 1.0],   # right forearm
])

#: Threshold on ``domain_statistic``. Calibrated on stored (8-bit) clips:
#: real spans about 3.2e-3 to 5.6e-3, synthetic is exactly 0.
DOMAIN_THRESHOLD = 1.0e-3


@dataclass
class DatasetSpec:
    count: int
    frames: int = 16
    height: int = 64
    width: int = 64
    domain: str = "real"
    motion: str = "talk"
    identities: int | None = None
    id_prefix: str | None = None
    fps: int = 8

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.height < 16 or self.width < 16 or self.height % 8 or self.width % 8:
            raise ValueError("height and width must be multiples of 8 and at least 16")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.motion not in MOTIONS and self.motion != "mixed":
            raise ValueError(f"motion must be one of {MOTIONS + ('mixed',)}, got {self.motion!r}")
        if self.identities is not None and self.identities < 1:
            raise ValueError("identities must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset spec fields: {sorted(unknown)}")
        if "count" not in d:
            raise ValueError("dataset spec requires 'count'")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Identity:
    skin: np.ndarray
    hair: np.ndarray
    shirt: np.ndarray
    head_scale: float
    shoulder_scale: float


@dataclass
class Motion:
    family: str
    freq: float
    phase: float
    arm_amp: float
    bob_amp: float
    sway_amp: float
    mouth_freq: float


@dataclass
class Clip:
    frames: np.ndarray      # F x 3 x H x W in [0, 1]
    body: np.ndarray        # F x 3 x H x W
    face: np.ndarray        # F x 3 x H x W
    normal: np.ndarray      # F x 3 x H x W, encoded as (n + 1) / 2 on foreground
    mask: np.ndarray        # F x H x W in {0, 1}
    background: np.ndarray  # 3 x H x W
    meta: dict = field(default_factory=dict)


def sample_identity(rng: np.random.Generator) -> Identity:
    return Identity(
        skin=rng.uniform(0.15, 0.95, 3),
        hair=rng.uniform(0.0, 0.7, 3),
        shirt=rng.uniform(0.05, 0.95, 3),
        head_scale=float(rng.uniform(0.85, 1.15)),
        shoulder_scale=float(rng.uniform(0.85, 1.15)),
    )


def sample_motion(rng: np.random.Generator, family: str) -> Motion:
    if family == "talk":
        arm, bob, sway, freq = 0.25, 0.02, 0.01, rng.uniform(0.6, 1.2)
    elif family == "wave":
        arm, bob, sway, freq = 0.9, 0.01, 0.02, rng.uniform(1.0, 1.6)
    else:
        arm, bob, sway, freq = 1.2, 0.04, 0.08, rng.uniform(0.8, 1.4)
    return Motion(
        family=family,
        freq=float(freq),
        phase=float(rng.uniform(0, 2 * math.pi)),
        arm_amp=float(arm * rng.uniform(0.8, 1.2)),
        bob_amp=float(bob),
        sway_amp=float(sway),
        mouth_freq=float(rng.uniform(2.0, 4.0)),
    )


def _pose(ident: Identity, mot: Motion, time: float, H: int, W: int):
    """Joint positions in pixels for one instant."""
    w = 2 * math.pi * mot.freq * time + mot.phase
    cx = W * (0.5 + mot.sway_amp * math.sin(0.5 * w))
    bob = H * mot.bob_amp * math.sin(2 * w)
    neck = (cx, 0.47 * H + bob)
    hip = (cx, 1.05 * H)
    head_r = 0.11 * W * ident.head_scale
    head = (cx + 0.02 * W * math.sin(w), neck[1] - 0.9 * head_r)
    half = 0.14 * W * ident.shoulder_scale
    upper = 0.2 * H
    fore = 0.17 * H
    limbs = []
    for side, sign in (("l", -1.0), ("r", 1.0)):
        sh = (cx + sign * half, 0.53 * H + bob)
        a_up = math.pi / 2 - sign * (0.35 + mot.arm_amp * 0.6 * (1 + math.sin(w + (0 if sign < 0 else math.pi / 3))) / 2)
        el = (sh[0] + upper * math.cos(a_up), sh[1] + upper * math.sin(a_up))
        a_fo = a_up - sign * mot.arm_amp * (0.4 + 0.6 * math.sin(w + 0.7))
        wr = (el[0] + fore * math.cos(a_fo), el[1] + fore * math.sin(a_fo))
        limbs.append((sh, el, wr))
    mouth_open = 0.5 + 0.5 * math.sin(2 * math.pi * mot.mouth_freq * time)
    return dict(neck=neck, hip=hip, head=head, head_r=head_r, limbs=limbs,
                mouth=mouth_open, half=half)


def _seg(p, q, r):
    return [p[0], p[1], q[0], q[1], r]


def render_frame(ident: Identity, mot: Motion, time: float, H: int, W: int, domain: str,
                 plate: np.ndarray, rng: np.random.Generator):
    """Render one frame and its control maps; arrays are H x W x C."""
    P = _pose(ident, mot, time, H, W)
    s = W / 64.0
    (lsh, lel, lwr), (rsh, rel, rwr) = P["limbs"]
    hx, hy = P["head"]
    hr = P["head_r"]
    caps = [
        _seg(P["neck"], P["hip"], P["half"] * 0.9),
        _seg(P["neck"], (hx, hy), 0.045 * W),
        _seg(lsh, lel, 3.2 * s), _seg(lel, lwr, 2.6 * s),
        _seg(rsh, rel, 3.2 * s), _seg(rel, rwr, 2.6 * s),
        _seg((hx, hy - 0.35 * hr), (hx, hy - 0.35 * hr), hr * 1.02),  # hair
        _seg((hx, hy), (hx, hy), hr),                                  # head
    ]
    colors = [ident.shirt, ident.skin, ident.shirt, ident.skin, ident.shirt, ident.skin,
              ident.hair, ident.skin]
    caps = np.array(caps, dtype=np.float64)
    colors = np.array(colors, dtype=np.float64)

    rgb = np.zeros((H, W, 3))
    nrm = np.zeros((H, W, 3))
    label = np.zeros((H, W), dtype=np.int32)
    rasterize_capsules(caps, colors, rgb, nrm, label)
    fg = label > 0

    if domain == "real":
        shade = 0.55 + 0.45 * nrm[..., 2:3]
        tex = 1.0 + 0.08 * rng.standard_normal((H, W, 1))
        rgb = rgb * shade * tex
    frame = np.where(fg[..., None], rgb, plate)
    if domain == "real":
        frame = frame + 0.04 * rng.standard_normal(frame.shape)
    frame = np.clip(frame, 0.0, 1.0)

    # body skeleton raster
    bone = np.array([_seg(P["neck"], P["hip"], 1.6 * s), _seg(P["neck"], (hx, hy), 1.6 * s),
                     _seg(lsh, lel, 1.6 * s), _seg(lel, lwr, 1.6 * s),
                     _seg(rsh, rel, 1.6 * s), _seg(rel, rwr, 1.6 * s)])
    body = np.zeros((H, W, 3))
    rasterize_capsules(bone, _LIMB_COLORS, body, np.zeros((H, W, 3)), np.zeros((H, W), np.int32))

    # face raster: head region, eyes, mouth opening
    mo = P["mouth"]
    face_caps = np.array([
        _seg((hx, hy), (hx, hy), hr),
        _seg((hx - 0.4 * hr, hy - 0.2 * hr), (hx - 0.4 * hr, hy - 0.2 * hr), 0.15 * hr + 0.5),
        _seg((hx + 0.4 * hr, hy - 0.2 * hr), (hx + 0.4 * hr, hy - 0.2 * hr), 0.15 * hr + 0.5),
        _seg((hx - 0.3 * hr, hy + 0.4 * hr), (hx + 0.3 * hr, hy + 0.4 * hr), 0.08 * hr + 0.25 * hr * mo + 0.5),
    ])
    face_cols = np.array([[0.5, 0.5, 0.5], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 0.2, 0.2]])
    face = np.zeros((H, W, 3))
    rasterize_capsules(face_caps, face_cols, face, np.zeros((H, W, 3)), np.zeros((H, W), np.int32))

    normal = np.where(fg[..., None], (nrm + 1.0) / 2.0, 0.0)
    return frame, body, face, normal, fg.astype(np.float64)


def make_plate(rng: np.random.Generator, H: int, W: int, domain: str) -> np.ndarray:
    base = rng.uniform(0.1, 0.9, 3)
    if domain == "synthetic":
        return np.broadcast_to(base, (H, W, 3)).copy()
    top = np.clip(base + rng.uniform(-0.25, 0.25, 3), 0, 1)
    ramp = np.linspace(0, 1, H)[:, None, None]
    plate = (1 - ramp) * top + ramp * base
    coarse = rng.standard_normal((H // 8 + 1, W // 8 + 1))
    yy = np.linspace(0, H // 8, H)
    xx = np.linspace(0, W // 8, W)
    tex = np.array([np.interp(xx, np.arange(coarse.shape[1]), row) for row in coarse])
    tex = np.array([np.interp(yy, np.arange(coarse.shape[0]), col) for col in tex.T]).T
    plate = plate + 0.06 * tex[..., None] + 0.03 * rng.standard_normal((H, W, 3))
    return np.clip(plate, 0, 1)


def render_clip(spec: DatasetSpec, index: int, seed: int) -> Clip:
    dom = DOMAINS.index(spec.domain)
    rng = np.random.default_rng([seed, dom, index])
    if spec.identities is None:
        ident_id = index
        ident = sample_identity(rng)
    else:
        ident_id = index % spec.identities
        ident = sample_identity(np.random.default_rng([seed, dom, 1_000_003, ident_id]))
    family = spec.motion if spec.motion != "mixed" else MOTIONS[int(rng.integers(len(MOTIONS)))]
    mot = sample_motion(rng, family)
    H, W, F = spec.height, spec.width, spec.frames
    plate = make_plate(rng, H, W, spec.domain)
    outs = [render_frame(ident, mot, f / spec.fps, H, W, spec.domain, plate, rng) for f in range(F)]
    chw = lambda k: np.stack([o[k] for o in outs]).transpose(0, 3, 1, 2)
    return Clip(
        frames=chw(0), body=chw(1), face=chw(2), normal=chw(3),
        mask=np.stack([o[4] for o in outs]),
        background=plate.transpose(2, 0, 1).copy(),
        meta={"identity": int(ident_id), "motion": family},
    )


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0, 1) * 255.0).astype(np.uint8)


def _save_seq(arr: np.ndarray, folder: Path):
    folder.mkdir(parents=True, exist_ok=True)
    for f, img in enumerate(arr):
        if img.ndim == 3:
            Image.fromarray(_to_u8(img.transpose(1, 2, 0))).save(folder / f"{f:04d}.png")
        else:
            Image.fromarray(_to_u8(img)).save(folder / f"{f:04d}.png")


def generate_toy_dataset(spec: DatasetSpec, seed: int, out_dir: str | Path,
                         manifest_name: str | None = None) -> list[ManifestEntry]:
    """Render ``spec.count`` clips under ``out_dir`` and write a JSONL manifest.

    Locators in the manifest are relative to the manifest's directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = spec.id_prefix or spec.domain
    entries = []
    for i in range(spec.count):
        clip = render_clip(spec, i, seed)
        vid = f"{prefix}_{i:05d}"
        rel = Path("media") / vid
        root = out_dir / rel
        _save_seq(clip.frames, root / "frames")
        _save_seq(clip.body, root / "body")
        _save_seq(clip.face, root / "face")
        _save_seq(clip.normal, root / "normal")
        _save_seq(clip.mask, root / "mask")
        Image.fromarray(_to_u8(clip.background.transpose(1, 2, 0))).save(root / "background.png")
        entries.append(ManifestEntry(
            id=vid, domain=spec.domain, locator=str(rel / "frames"), frame_count=spec.frames,
            controls={"body": str(rel / "body"), "face": str(rel / "face"),
                      "normal": str(rel / "normal"), "mask": str(rel / "mask"),
                      "background": str(rel / "background.png")},
            identity=clip.meta["identity"], motion=clip.meta["motion"], fps=spec.fps,
        ))
    name = manifest_name or f"{prefix}.jsonl"
    write_manifest(entries, out_dir / name)
    return entries


def domain_statistic(frames: np.ndarray) -> float:
    """Mean squared horizontal-neighbour difference, excluding the largest 10%.

    Dropping the top decile removes object edges, leaving texture and noise.
    """
    d = np.diff(np.asarray(frames, dtype=np.float64), axis=-1) ** 2
    d = d.ravel()
    cut = np.quantile(d, 0.9)
    return float(d[d <= cut].mean())


def classify_domain(frames: np.ndarray, threshold: float = DOMAIN_THRESHOLD) -> str:
    return "real" if domain_statistic(frames) > threshold else "synthetic"
