import csv
import io
import json
import os
import subprocess
import sys

import pytest

from agentsched.cli import main

SMALL = ["--kind", "swebench", "--n-tasks", "3", "--horizon", "60"]


def test_generate_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    assert main(["generate", "--seed", "1", *SMALL, "--out", str(a)]) == 0
    assert main(["generate", "--seed", "1", *SMALL, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_multitenant_has_ten_tenants(tmp_path):
    out = tmp_path / "mt.ndjson"
    assert main(["generate", "--kind", "multitenant", "--horizon", "3600", "--out", str(out)]) == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert len({l["task"]["tenant_id"] for l in lines[1:]}) == 10


def test_bad_kind_is_usage_error(capsys):
    assert main(["generate", "--kind", "nope"]) == 2
    assert "usage" in capsys.readouterr().err


def test_run_writes_outputs(tmp_path):
    wl = tmp_path / "w.ndjson"
    main(["generate", "--seed", "2", *SMALL, "--out", str(wl)])
    out = tmp_path / "out"
    rc = main(["run", str(wl), "--policy", "wa-lru", "--fairness", "afs", "--dump-afs", "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["config"]["sim"]["policy"] == "wa-lru" and doc["config"]["seed"] == 0
    assert doc["version"].startswith("0.")
    assert set(doc["audit"].values()) == {0}
    for field in ("tct_mean_ms", "throughput_per_min", "memory_useful_frac", "slo", "evict_rate",
                  "regen_tokens", "steals_per_task", "tct_ms"):
        assert field in doc["metrics"]
    assert (out / "events.ndjson").stat().st_size > 0
    assert (out / "afs.ndjson").exists()
    assert list(csv.DictReader((out / "metrics.csv").open()))[0]["n_tasks"] == "3"


def test_run_baseline_and_ablation_flags(tmp_path):
    out = tmp_path / "o"
    assert main(["run", *SMALL, "--policy", "lru", "--no-steal", "--fairness", "fcfs", "--out", str(out)]) == 0
    sim = json.loads((out / "metrics.json").read_text())["config"]["sim"]
    assert (sim["policy"], sim["steal"], sim["fairness"]) == ("lru", False, "fcfs")
    assert main(["run", *SMALL, "--ablate", "session-affinity", "--out", str(out)]) == 0
    assert json.loads((out / "metrics.json").read_text())["config"]["sim"]["affinity"] is False
    assert main(["run", *SMALL, "--ablate", "telepathy", "--out", str(out)]) == 3


def test_run_is_deterministic(tmp_path):
    for d in ("x", "y"):
        assert main(["run", *SMALL, "--seed", "5", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "x" / "events.ndjson").read_bytes() == (tmp_path / "y" / "events.ndjson").read_bytes()


def test_toml_and_json_config(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('[workload]\nkind = "webarena"\nn_tasks = 2\n\n[sim]\nn_workers = 2\ntheta = 0.7\n')
    out = tmp_path / "o"
    assert main(["run", "--config", str(toml), "--out", str(out)]) == 0
    cfg = json.loads((out / "metrics.json").read_text())["config"]
    assert cfg["workload"]["kind"] == "webarena" and cfg["sim"]["n_workers"] == 2 and cfg["sim"]["theta"] == 0.7
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"sim": {"n_workers": 0}}))
    assert main(["run", *SMALL, "--config", str(js), "--out", str(out)]) == 3


@pytest.mark.parametrize("body", ['{"sim": {"warp": 9}}', '{"extra": {}}', "{not json", "[1, 2]"])
def test_config_errors_exit_3(tmp_path, body, capsys):
    p = tmp_path / "bad.json"
    p.write_text(body)
    assert main(["run", *SMALL, "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "config error" in capsys.readouterr().err


def test_capacity_error_exit_4(tmp_path, capsys):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps({"sim": {"kv_capacity_tokens": 2000}}))
    assert main(["run", *SMALL, "--config", str(p), "--out", str(tmp_path / "o")]) == 4
    assert "worker" in capsys.readouterr().err


def test_audit_command(tmp_path, capsys):
    out = tmp_path / "o"
    main(["run", *SMALL, "--out", str(out)])
    assert main(["audit", str(out / "events.ndjson")]) == 0
    bad = tmp_path / "bad.ndjson"
    bad.write_text('{"t_us": 5, "t_ms": 0.005, "kind": "Steal", "task": 1, "seq": 0}\n'
                   '{"t_us": 6, "t_ms": 0.006, "kind": "Steal", "task": 1, "seq": 1}\n')
    assert main(["audit", str(bad)]) == 4
    assert "anti_thrash  1 violation" in capsys.readouterr().out


def test_aeg_dump(capsys):
    assert main(["aeg", "dump"]) == 0
    g = json.loads(capsys.readouterr().out)
    assert len(g["nodes"]) == 5 and sum(1 for e in g["edges"] if e[3]) == 2


def test_ratio_csv_from_trace(tmp_path, capsys):
    tr = tmp_path / "t.ndjson"
    assert main(["ratio", "--n-tasks", "2", "--save-trace", str(tr)]) == 0
    capsys.readouterr()
    assert main(["ratio", "--trace", str(tr), "--capacity", "100000"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["policy"] for r in rows] == ["OPT", "EvictAll", "Lru", "PrefixLru", "WaLru"]
    assert all(float(r["ratio"]) >= 1.0 for r in rows if r["policy"] in ("EvictAll", "Lru", "WaLru"))
    assert main(["ratio", "--trace", str(tr)]) == 3


def test_experiment_resumes_from_checkpoints(tmp_path, capsys):
    out = tmp_path / "exp"
    assert main(["experiment", "pattern", "--seeds", "3", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "pattern.csv").open()))
    assert {r["metric"] for r in rows} == {"accuracy", "edges_match"}
    ck = out / "runs" / "pattern" / "seed1.json"
    ck.write_text(json.dumps({"ready": True, "edges_match": True, "accuracy": 0.5}))
    assert main(["experiment", "pattern", "--seeds", "3", "--out", str(out)]) == 0
    acc = [r for r in csv.DictReader((out / "pattern.csv").open()) if r["metric"] == "accuracy"][0]
    assert float(acc["mean"]) < 0.9  # the edited checkpoint was reused, not recomputed
    assert main(["experiment", "ratio", "--cv", "1,2"]) == 3


def test_console_script_and_log_env(tmp_path):
    env = dict(os.environ, SAGA_SIM_LOG="info")
    r = subprocess.run([sys.executable, "-m", "agentsched.cli", "experiment", "pattern", "--seeds", "1",
                        "--out", str(tmp_path / "e")], capture_output=True, text=True, env=env)
    assert r.returncode == 0
    assert "INFO agentsched: done pattern seed 0" in r.stderr
    env["SAGA_SIM_LOG"] = "warning"
    r = subprocess.run([sys.executable, "-m", "agentsched.cli", "experiment", "pattern", "--seeds", "1",
                        "--out", str(tmp_path / "f")], capture_output=True, text=True, env=env)
    assert "INFO" not in r.stderr
