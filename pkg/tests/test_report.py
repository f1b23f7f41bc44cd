import json

import pytest

from animsyn import report as rp


def ratio_rows():
    return [
        {"label": "0:1", "psnr": 10.0, "ssim": 0.5, "perceptual": None, "frechet": 4.0, "csim": 0.7},
        {"label": "1:1", "psnr": 12.0, "ssim": 0.4, "perceptual": None, "frechet": 2.0, "csim": 0.8},
        {"label": "2:1", "psnr": 11.0, "ssim": 0.6, "perceptual": None, "frechet": 3.0, "csim": 0.7},
    ]


def test_normalization_rule():
    vals = rp.normalize_ratio_rows(ratio_rows())["values"]
    assert vals["0:1"] == {"psnr": 0.0, "ssim": 0.0, "perceptual": None, "frechet": 0.0, "csim": 0.0}
    assert vals["1:1"]["psnr"] == 1.0 and vals["2:1"]["psnr"] == 0.5
    # lower-is-better metric inverted: FVD 2 is the best, 3 is halfway
    assert vals["1:1"]["frechet"] == 1.0 and vals["2:1"]["frechet"] == 0.5
    # a value below the 0:1 anchor clips to 0
    assert vals["1:1"]["ssim"] == 0.0 and vals["2:1"]["ssim"] == 1.0
    # no improvement anywhere: span 0 gives 0
    assert vals["2:1"]["csim"] == 0.0 and vals["1:1"]["csim"] == 1.0
    for row in vals.values():
        assert all(v is None or 0.0 <= v <= 1.0 for v in row.values())


def test_flat_metric_is_zero():
    rows = [{"label": "0:1", "psnr": 5.0}, {"label": "1:1", "psnr": 5.0}]
    assert rp.normalize_ratio_rows(rows, ["psnr"])["values"]["1:1"]["psnr"] == 0.0


def test_missing_anchor_is_an_error():
    with pytest.raises(rp.SchemaError, match="0:1"):
        rp.normalize_ratio_rows(ratio_rows()[1:])


def build(kind, rows, emb=None):
    return rp.build_report(kind, rows, {}, emb or {"video": "v"})


def test_layouts():
    ft = build("finetune", [{"label": "Baseline", "psnr": 1.0}])
    assert rp.render(ft).splitlines()[0] == "|  | PSNR↑ | SSIM↑ | LPIPS↓ | FVD↓ | ID-Sim↑ |"
    ts = build("targeted_select", [{"label": "Random"}])
    assert rp.render(ts).splitlines()[0] == "| Selection | PSNR↑ | SSIM↑ | LPIPS↓ | CSIM↑ |"
    rs = build("ratio_scale", ratio_rows())
    assert rp.render(rs).splitlines()[0] == "| Sim:real distribution | PSNR↑ | SSIM↑ | LPIPS↓ | FVD↓ | CSIM↑ |"
    assert "radar" in rs and "radar" not in build("ratio_scale", ratio_rows()[1:])


def test_write_and_load(tmp_path):
    rep = build("ratio_scale", ratio_rows())
    rep["timing"] = {"train": 1.0}
    rp.write_report(rep, tmp_path)
    for name in ("report.json", "table.md", "radar.json", "radar.md", "radar.svg"):
        assert (tmp_path / name).exists()
    back = rp.load_report(tmp_path)
    assert back == json.loads(json.dumps(rep))
    assert "timing" not in rp.strip_wall_clock(back)
    assert (tmp_path / "radar.svg").read_text().startswith("<svg")
    assert "| 1:1 | 1.0000 |" in (tmp_path / "radar.md").read_text()


def test_load_errors(tmp_path):
    with pytest.raises(rp.SchemaError):
        rp.load_report(tmp_path)
    (tmp_path / "report.json").write_text(json.dumps({"report_version": 99}))
    with pytest.raises(rp.SchemaError):
        rp.load_report(tmp_path)
    (tmp_path / "report.json").write_text(json.dumps({"report_version": 1, "kind": "finetune"}))
    with pytest.raises(rp.SchemaError):
        rp.load_report(tmp_path)


def test_merge():
    rows = ratio_rows()
    a, b = build("ratio_scale", rows[1:2]), build("ratio_scale", [rows[2], rows[0]])
    merged = rp.merge_reports([a, b])
    assert [r["label"] for r in merged["rows"]] == ["0:1", "1:1", "2:1"]
    assert merged["radar"]["values"]["1:1"]["psnr"] == 1.0
    with pytest.raises(rp.SchemaError, match="0:1"):
        rp.merge_reports([a, build("ratio_scale", rows[2:])])
    with pytest.raises(rp.SchemaError):
        rp.merge_reports([a, a])
    with pytest.raises(rp.SchemaError):
        rp.merge_reports([a, build("finetune", [])])
    with pytest.raises(rp.SchemaError):
        rp.merge_reports([a, build("ratio_scale", rows[:1], {"video": "other"})])
    with pytest.raises(rp.SchemaError):
        rp.merge_reports([])
    assert rp.merge_reports([a]) is a
