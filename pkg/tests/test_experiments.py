import json
import math

import pytest

from agentsched.core import ConfigError
from agentsched.experiments import (
    PRESETS, Cell, ExperimentPreset, get_preset, pattern_recovery, ratio_instance, run_preset, summarize,
    true_pattern_edges, write_summary, _metric,
)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_are_well_formed(name):
    p = get_preset(name)
    assert len(p.seeds) == 10
    assert p.cells and p.metrics
    assert p.baseline is None or p.baseline in {c.name for c in p.cells}
    for c in p.cells:
        assert c.runner in ("sim", "ratio", "pattern")


def test_preset_validation():
    with pytest.raises(ConfigError):
        get_preset("warp-drive")
    with pytest.raises(ConfigError):
        ExperimentPreset("x", [Cell("a", "pattern"), Cell("a", "pattern")], ["accuracy"])
    with pytest.raises(ConfigError):
        get_preset("pattern", seeds=[])
    assert get_preset("pattern", seeds=[3, 4]).seeds == (3, 4)


def test_metric_lookup():
    r = {"slo": {"Heavy": 0.5, "Medium": 0.8, "Light": None}, "ok": True}
    assert _metric(r, "slo.Medium") == 0.8
    assert _metric(r, "slo_spread") == pytest.approx(0.3)
    assert _metric(r, "ok") == 1.0
    assert _metric(r, "slo.Nope") is None


def test_run_preset_checkpoints_and_summary(tmp_path):
    preset = get_preset("pattern", seeds=[0, 1, 2])
    res = run_preset(preset, str(tmp_path))
    assert sorted(res["pattern"]) == [0, 1, 2]
    assert (tmp_path / "runs" / "pattern" / "seed2.json").exists()
    again = run_preset(preset, str(tmp_path))
    assert json.dumps(again, sort_keys=True) == json.dumps(res, sort_keys=True)
    rows = write_summary(preset, res, str(tmp_path))
    assert {r["metric"] for r in rows} == {"accuracy", "edges_match"}
    doc = json.loads((tmp_path / "pattern.json").read_text())
    assert doc["seeds"] == [0, 1, 2] and doc["preset"] == "pattern"


def test_summary_reports_welch_against_baseline():
    preset = ExperimentPreset("t", [Cell("a", "pattern"), Cell("b", "pattern")], ["x"], baseline="a",
                              seeds=(0, 1, 2, 3))
    results = {"a": {s: {"x": float(s)} for s in range(4)}, "b": {s: {"x": s + 10.0} for s in range(4)}}
    rows = {r["cell"]: r for r in summarize(preset, results)}
    assert rows["a"]["p"] is None
    assert rows["b"]["mean"] == 11.5 and rows["b"]["p"] < 0.001 and rows["b"]["stars"] == "***"


def test_pattern_recovery_finds_true_edges():
    r = pattern_recovery(0)
    assert r["ready"] and r["edges_match"]
    assert r["accuracy"] >= 0.85
    assert true_pattern_edges()
    assert pattern_recovery(0, n_train=2)["ready"] is False


def test_small_ratio_instance_is_consistent():
    tr, cap, opt, costs = ratio_instance(0, n_tasks=3, time_limit=10)
    assert cap >= max(a.tokens_required for a in tr.accesses)
    assert opt.optimal and opt.lower_bound <= opt.cost + 1e-6
    assert costs["EvictAll"] >= costs["Lru"] >= opt.cost - 1e-6
    assert costs["WaLru"] >= opt.cost - 1e-6
    assert not math.isnan(costs["PrefixLru"])
