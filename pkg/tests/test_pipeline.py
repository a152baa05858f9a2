import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from charflow.characteristics import FlowOptions
from charflow.fields import Domain, ScalarField
from charflow.gallery import gallery
from charflow.pipeline import (
    CHECKS, DEFAULT_CHECKS, DEFAULT_RESOLUTION, ConfigError, RunConfig, emit_fan_svg, fan_curves, load_config, run,
)

SVG = "{http://www.w3.org/2000/svg}"
CHEAP = ["resolution.h=0.01", "resolution.curves=4", "resolution.holder_pairs=200", "resolution.fan_anchors=3"]


def test_defaults_expand_all_without_extension():
    cfg = load_config(overrides=["instance=ex1"])
    assert cfg.checks == list(DEFAULT_CHECKS)
    assert "extension" in CHECKS and "extension" not in cfg.checks
    assert cfg.resolution == DEFAULT_RESOLUTION and cfg.seed == 0


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("instance: ex2_split\nchecks: [holder]\nresolution:\n  h: 2e-3\nseed: 4\n")
    cfg = load_config(path, ["resolution.curves=7", "checks=[residual, holder]"])
    assert cfg.instance == "ex2_split" and cfg.seed == 4
    assert cfg.resolution["h"] == 2e-3 and cfg.resolution["curves"] == 7
    assert cfg.checks == ["residual", "holder"]
    assert cfg.base_dir == tmp_path


@pytest.mark.parametrize("data, fragment", [
    ({}, "config"),
    ({"instance": "nope"}, "instance"),
    ({"instance": "ex1", "checks": ["bogus"]}, "unknown checks"),
    ({"instance": "ex1", "resolution": {"h": -1}}, "resolution/h"),
    ({"instance": "ex1", "resolution": {"hh": 1}}, "hh"),
    ({"instance": "ex1", "fields": {"phi": "a.csv", "w": "b.csv"}}, "config"),
])
def test_invalid_configs_are_rejected(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        RunConfig.from_dict(data)


def test_missing_field_file_is_named(tmp_path):
    with pytest.raises(ConfigError, match="phi.*missing.csv"):
        RunConfig.from_dict({"fields": {"phi": "missing.csv", "w": "missing.csv"}}, tmp_path)


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        load_config(overrides=["instance"])
    with pytest.raises(ConfigError):
        load_config(overrides=["instance=ex1", "seed.x=1"])


def test_empty_check_list_runs_nothing(tmp_path):
    cfg = load_config(overrides=["instance=ex1", "checks=[]", f"output.dir={tmp_path}", "resolution.fan_anchors=0"])
    res = run(cfg)
    assert res.report.checks == [] and res.report.passed
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["checks"] == [] and data["provenance"]["instance"] == "ex1"


def test_failing_check_is_recorded_not_raised():
    cfg = load_config(overrides=["instance=ex1", "checks=[holder]", "tolerances.holder=-5"] + CHEAP)
    rep = run(cfg, write=False).report
    assert not rep.passed and rep.checks[0].name.startswith("holder")


def test_strip_too_wide_for_every_curve_fails():
    cfg = load_config(overrides=["instance=ex1", "checks=[dafermos_identity]", "resolution.strip_eps=5"] + CHEAP)
    rec = run(cfg, write=False).report.checks[0]
    assert not rec.passed and rec.details["curves"] == 0


def test_crashing_check_becomes_failing_record(monkeypatch):
    def boom(ctx):
        raise RuntimeError("kaput")
    monkeypatch.setitem(CHECKS, "holder", boom)
    rec = run(load_config(overrides=["instance=ex1", "checks=[holder]"]), write=False).report.checks[0]
    assert not rec.passed and rec.details["error"] == "RuntimeError: kaput"


def test_runs_are_byte_identical(tmp_path):
    names = ("report.json", "fan.svg", "curves/curve_000.csv", "curves/curve_003.csv")
    cfg = load_config(overrides=["instance=ex1", "checks=[dafermos_bound, holder]", "seed=3",
                                 f"output.dir={tmp_path}"] + CHEAP)
    seen = []
    for _ in range(2):
        assert run(cfg).report.passed
        seen.append([(tmp_path / n).read_bytes() for n in names])
    assert seen[0] == seen[1]


def test_csv_fields_drive_a_run(tmp_path):
    dom = Domain(0.0, 1.0, -1.0, 1.0)
    ScalarField.analytic("t", dom).to_csv(tmp_path / "phi.csv", resolution=21)
    ScalarField.analytic("t", dom).to_csv(tmp_path / "w.csv", resolution=21)
    (tmp_path / "run.yaml").write_text("fields: {phi: phi.csv, w: w.csv}\nchecks: [dafermos_bound]\n")
    cfg = load_config(tmp_path / "run.yaml", CHEAP)
    res = run(cfg, write=False)
    assert res.report.provenance["fields"] == {"phi": "phi.csv", "w": "w.csv"}
    assert len(res.report.checks) == 1


def test_svg_with_no_curves_has_frame_and_axes(tmp_path):
    dom = Domain(0.0, 1.0, -1.0, 1.0)
    n = emit_fan_svg([], dom, tmp_path / "f.svg")
    root = ET.parse(tmp_path / "f.svg").getroot()
    assert n == (tmp_path / "f.svg").stat().st_size
    assert root.tag == SVG + "svg" and root.get("viewBox") == "0 -1 1 2"
    axes = root.findall(f".//{SVG}line")
    assert sorted((a.get("y1"), a.get("y2")) for a in axes) == [("-1", "1"), ("0", "0")]
    assert root.findall(f".//{SVG}polyline") == []


def test_split_fan_contains_both_parabolas(tmp_path):
    g = gallery("ex2_split")
    fan = fan_curves(g.phi, g.domain, 4, FlowOptions(h=0.01))
    assert len(fan) == 8
    first = [c for c in fan if c.s0 == 0.0]
    lo, hi = sorted(first, key=lambda c: c.gamma[-1])
    assert np.max(np.abs(lo.gamma + lo.s ** 2 / 4)) < 2e-3
    assert np.max(np.abs(hi.gamma - hi.s ** 2 / 4)) < 2e-3
    emit_fan_svg(fan, g.domain, tmp_path / "fan.svg")
    root = ET.parse(tmp_path / "fan.svg").getroot()
    polys = root.findall(f".//{SVG}polyline")
    assert sorted(p.get("class") for p in polys) == ["maximal"] * 4 + ["minimal"] * 4
    x, y = polys[4].get("points").split()[-1].split(",")
    assert float(x) == pytest.approx(1.0) and float(y) == pytest.approx(-0.25, abs=2e-3)
