"""Dataset manifests: JSONL, one entry per line, schema-versioned."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
DOMAINS = ("real", "synthetic")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    domain: str
    locator: str
    frame_count: int
    controls: dict = field(default_factory=dict)
    present: dict = field(default_factory=lambda: {"s": True, "h": True, "n": True})
    embedding: list | None = None
    identity: int | None = None
    motion: str | None = None
    fps: int = 8

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ManifestError(f"entry {self.id!r}: domain must be one of {DOMAINS}")
        if int(self.frame_count) < 1:
            raise ManifestError(f"entry {self.id!r}: frame_count must be >= 1")

    def to_dict(self) -> dict:
        d = {"schema": SCHEMA_VERSION, "id": self.id, "domain": self.domain,
             "locator": self.locator, "frame_count": int(self.frame_count),
             "controls": dict(self.controls), "present": dict(self.present),
             "identity": self.identity, "motion": self.motion, "fps": self.fps}
        if self.embedding is not None:
            d["embedding"] = [float(x) for x in self.embedding]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        if d.get("schema") != SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema {d.get('schema')!r}")
        for key in ("id", "domain", "locator", "frame_count"):
            if key not in d:
                raise ManifestError(f"manifest entry missing {key!r}")
        return cls(id=d["id"], domain=d["domain"], locator=d["locator"],
                   frame_count=int(d["frame_count"]), controls=dict(d.get("controls", {})),
                   present=dict(d.get("present", {"s": True, "h": True, "n": True})),
                   embedding=d.get("embedding"), identity=d.get("identity"),
                   motion=d.get("motion"), fps=int(d.get("fps", 8)))


class Manifest(list):
    """A list of entries that remembers the directory its locators are relative to."""

    def __init__(self, entries=(), root: str | Path = "."):
        super().__init__(entries)
        self.root = Path(root)

    def ids(self) -> list[str]:
        return [e.id for e in self]


def write_manifest(entries, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    entries = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(ManifestEntry.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{n}: {exc}") from exc
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate ids")
    return Manifest(entries, root=path.parent)


def _load_seq(folder: Path, count: int, channels: int) -> np.ndarray:
    out = []
    for f in range(count):
        p = folder / f"{f:04d}.png"
        if not p.exists():
            raise ManifestError(f"missing media file {p}")
        a = np.asarray(Image.open(p), dtype=np.float64) / 255.0
        if channels == 3:
            out.append(a.transpose(2, 0, 1))
        else:
            out.append(a)
    return np.stack(out)


def load_clip(entry: ManifestEntry, root: str | Path) -> dict:
    """Load frames and control maps as float arrays in [0, 1].

    Returns frames/body/face/normal as F x 3 x H x W, mask as F x H x W and
    background as 3 x H x W. Missing control maps are absent from the dict.
    """
    root = Path(root)
    F = entry.frame_count
    out = {"frames": _load_seq(root / entry.locator, F, 3)}
    for key in ("body", "face", "normal"):
        if key in entry.controls:
            out[key] = _load_seq(root / entry.controls[key], F, 3)
    if "mask" in entry.controls:
        out["mask"] = _load_seq(root / entry.controls["mask"], F, 1)
    if "background" in entry.controls:
        p = root / entry.controls["background"]
        if not p.exists():
            raise ManifestError(f"missing media file {p}")
        out["background"] = np.asarray(Image.open(p), dtype=np.float64).transpose(2, 0, 1) / 255.0
    return out
