"""Report files: publication-style tables, ratio normalization for radar plots, merging."""
from __future__ import annotations

import json
import math
from pathlib import Path

from .metrics import COLUMN_NAMES, HIGHER_BETTER, render_table

REPORT_VERSION = 1
RATIO_LABELS = ("0:1", "1:1", "2:1", "4:1", "8:1")
STRATEGY_LABELS = {"random": "Random", "manual": "Manual", "clip_sim": "CLIP-sim"}

# column layout and first header per experiment kind
LAYOUTS = {
    "finetune": ("", ["psnr", "ssim", "perceptual", "frechet", "csim"], {"csim": "ID-Sim"}),
    "ratio_scale": ("Sim:real distribution", ["psnr", "ssim", "perceptual", "frechet", "csim"], {}),
    "targeted_select": ("Selection", ["psnr", "ssim", "perceptual", "csim"], {}),
}
RADAR_METRICS = ["psnr", "ssim", "perceptual", "frechet", "csim"]
WALL_CLOCK_KEYS = ("timing",)


class SchemaError(ValueError):
    pass


def build_report(kind: str, rows: list[dict], per_video: dict, embedders: dict,
                 plan: dict | None = None, timing: dict | None = None) -> dict:
    first, columns, names = LAYOUTS[kind]
    rep = {"report_version": REPORT_VERSION, "kind": kind, "first_header": first,
           "columns": columns, "column_names": {c: names.get(c, COLUMN_NAMES[c]) for c in columns},
           "rows": rows, "per_video": per_video, "embedders": embedders, "plan": plan,
           "timing": timing or {}}
    if kind == "ratio_scale" and any(r["label"] == "0:1" for r in rows):
        rep["radar"] = normalize_ratio_rows(rows)
    return rep


def render(report: dict) -> str:
    names = report.get("column_names", {})
    return render_table(report["rows"], report["columns"], report.get("first_header", ""), names)


def normalize_ratio_rows(rows: list[dict], metrics: list[str] = RADAR_METRICS) -> dict:
    """Map each metric to [0, 1] with the 0:1 row as the minimum anchor.

    Values are oriented so larger is better (lower-is-better metrics are
    inverted), then scaled by (x - x_0:1) / (best - x_0:1) and clipped to
    [0, 1]. Absent metrics stay None.
    """
    labels = [r["label"] for r in rows]
    if "0:1" not in labels:
        raise SchemaError("ratio normalization needs the 0:1 row: it is the normalization "
                          "minimum for every metric")
    base = rows[labels.index("0:1")]
    out = {r["label"]: {} for r in rows}
    for m in metrics:
        sign = 1.0 if HIGHER_BETTER[m] else -1.0
        if base.get(m) is None:
            for r in rows:
                out[r["label"]][m] = None
            continue
        x0 = sign * base[m]
        top = max(sign * r[m] for r in rows if r.get(m) is not None)
        span = top - x0
        for r in rows:
            v = r.get(m)
            if v is None:
                out[r["label"]][m] = None
            elif span <= 0.0:
                out[r["label"]][m] = 0.0
            else:
                out[r["label"]][m] = min(1.0, max(0.0, (sign * v - x0) / span))
    return {"rule": "0:1 row is the minimum; LPIPS and FVD inverted", "metrics": metrics,
            "values": out}


def render_radar_table(radar: dict) -> str:
    metrics = radar["metrics"]
    head = ["Sim:real distribution"] + [COLUMN_NAMES[m] for m in metrics]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for label, vals in radar["values"].items():
        cells = [label] + ["n/a" if vals[m] is None else f"{vals[m]:.4f}" for m in metrics]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def radar_svg(radar: dict, size: int = 360) -> str:
    """Radar chart over the metrics that are present for every row."""
    metrics = [m for m in radar["metrics"]
               if all(v[m] is not None for v in radar["values"].values())]
    c = size / 2.0
    R = size * 0.36
    k = max(len(metrics), 1)

    def pt(i, r):
        a = -math.pi / 2 + 2 * math.pi * i / k
        return c + r * R * math.cos(a), c + r * R * math.sin(a)

    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for ring in (0.25, 0.5, 0.75, 1.0):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (pt(i, ring) for i in range(k)))
        parts.append(f'<polygon points="{pts}" fill="none" stroke="#ccc"/>')
    for i, m in enumerate(metrics):
        x, y = pt(i, 1.12)
        parts.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="11" text-anchor="middle">'
                     f'{COLUMN_NAMES[m]}</text>')
    for j, (label, vals) in enumerate(radar["values"].items()):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (pt(i, vals[m]) for i, m in enumerate(metrics)))
        col = colors[j % len(colors)]
        parts.append(f'<polygon points="{pts}" fill="{col}" fill-opacity="0.12" stroke="{col}"/>')
        parts.append(f'<text x="8" y="{16 + 14 * j}" font-size="11" fill="{col}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_report(report: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "table.md").write_text(render(report) + "\n")
    if "radar" in report:
        (out_dir / "radar.json").write_text(json.dumps(report["radar"], indent=2, sort_keys=True) + "\n")
        (out_dir / "radar.md").write_text(render_radar_table(report["radar"]) + "\n")
        (out_dir / "radar.svg").write_text(radar_svg(report["radar"]) + "\n")
    return out_dir / "report.json"


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        rep = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read report {path}: {exc}") from exc
    if rep.get("report_version") != REPORT_VERSION:
        raise SchemaError(f"{path}: unsupported report version {rep.get('report_version')!r}")
    for key in ("kind", "columns", "rows"):
        if key not in rep:
            raise SchemaError(f"{path}: report lacks {key!r}")
    return rep


def strip_wall_clock(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in WALL_CLOCK_KEYS}


def merge_reports(reports: list[dict]) -> dict:
    """Concatenate rows of compatible reports; ratio merges get radar data."""
    if not reports:
        raise SchemaError("nothing to merge")
    first = reports[0]
    for rep in reports[1:]:
        if rep["kind"] != first["kind"] or rep["columns"] != first["columns"]:
            raise SchemaError(f"incompatible reports: {first['kind']}/{first['columns']} vs "
                              f"{rep['kind']}/{rep['columns']}")
        if rep.get("embedders") != first.get("embedders"):
            raise SchemaError("reports were computed with different embedders")
    if len(reports) == 1:
        return first
    rows, per_video = [], {}
    seen = set()
    for rep in reports:
        for r in rep["rows"]:
            if r["label"] in seen:
                raise SchemaError(f"row {r['label']!r} appears in more than one report")
            seen.add(r["label"])
            rows.append(r)
        per_video.update(rep.get("per_video", {}))
    if first["kind"] == "ratio_scale":
        rows.sort(key=lambda r: RATIO_LABELS.index(r["label"]) if r["label"] in RATIO_LABELS else 99)
    merged = build_report(first["kind"], rows, per_video, first.get("embedders", {}),
                          plan={"merged_from": [rep.get("plan") for rep in reports]})
    if first["kind"] == "ratio_scale":
        merged["radar"] = normalize_ratio_rows(rows)
    merged["column_names"] = first.get("column_names", merged["column_names"])
    return merged
