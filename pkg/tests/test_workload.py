import numpy as np
import pytest

from agentsched.core import ConfigError, CostModel, default_tools, expected_duration
from agentsched.simulator.workload import (
    WorkloadSpec, continue_probs, generate_workload, read_workload, sample_tool_latency, step_pmf, tenants_of,
    write_workload,
)


def test_swebench_step_distribution():
    pmf = step_pmf(37.0, 150)
    assert float(np.dot(np.arange(1, 151), pmf)) == pytest.approx(37.0, rel=1e-6)
    wl = generate_workload(WorkloadSpec("swebench", n_tasks=10_000, arrival_rate=10_000.0,
                                        horizon_ms=1e9), 0)
    steps = np.array([len(t.plan) for _, t in wl])
    assert len(steps) == 10_000
    assert abs(steps.mean() - 37) <= 3.7
    assert steps.max() <= 150 and steps.min() >= 1


def test_webarena_prompt_range_and_steps():
    wl = generate_workload(WorkloadSpec("webarena", n_tasks=300), 1)
    firsts = [t.plan[0].prompt_tokens for _, t in wl]
    assert all(4000 <= p <= 8000 for p in firsts)
    assert all(50 <= s.output_tokens <= 200 for _, t in wl for s in t.plan)
    assert max(len(t.plan) for _, t in wl) <= 100


def test_multitenant_heavy_arrivals_per_hour():
    wl = generate_workload(WorkloadSpec("multitenant", horizon_ms=3_600_000.0), 4)
    per_tenant = np.bincount([t.tenant_id for _, t in wl], minlength=10)
    # heavy tenants (ids 0-2) expect 16/min x 60 min = 960; Poisson sd ~31
    for n in per_tenant[:3]:
        assert abs(n - 960) < 5 * np.sqrt(960)
    assert len(tenants_of(WorkloadSpec("multitenant"))) == 10
    steps = {t.tenant_class: len(t.plan) for _, t in wl}
    assert steps == {"Heavy": 100, "Medium": 30, "Light": 10}


def test_deadline_is_slo_factor_times_expected():
    cm = CostModel()
    for t0, t in generate_workload(WorkloadSpec("swebench", n_tasks=5, slo_factor=2.0), 2, cm):
        assert t.deadline == pytest.approx(t0 + 2.0 * expected_duration(t, cm))


def test_generation_deterministic_and_seed_sensitive():
    spec = WorkloadSpec("swebench", n_tasks=20)
    a, b = generate_workload(spec, 5), generate_workload(spec, 5)
    assert [(t, x.to_dict()) for t, x in a] == [(t, x.to_dict()) for t, x in b]
    assert [x.to_dict() for _, x in generate_workload(spec, 6)] != [x.to_dict() for _, x in a]


def test_workload_file_round_trip(tmp_path):
    spec = WorkloadSpec("multitenant", horizon_ms=120_000.0)
    wl = generate_workload(spec, 9)
    p = tmp_path / "w.ndjson"
    write_workload(p, spec, 9, wl)
    spec2, seed, wl2 = read_workload(p)
    assert seed == 9 and spec2.resolved() == spec.resolved()
    assert [(t, x) for t, x in wl2] == [(t, x) for t, x in wl]
    write_workload(tmp_path / "again.ndjson", spec2, seed, wl2)
    assert (tmp_path / "again.ndjson").read_bytes() == p.read_bytes()


def test_continue_probs_reproduce_step_pmf():
    cont = continue_probs(18.0, 100)
    alive, mean = 1.0, 0.0
    for k in range(1, 101):
        stop = alive * (1 - cont[k - 1]) if k < 100 else alive
        mean += k * stop
        alive -= stop
    assert mean == pytest.approx(18.0, rel=1e-6)


def test_tool_cv_override_keeps_mean():
    tools = WorkloadSpec(tool_cv=2.0).tool_types()
    rng = np.random.default_rng(0)
    x = np.array([sample_tool_latency(tools["WebApi"], rng) for _ in range(400_000)])
    assert x.mean() == pytest.approx(1200.0, rel=0.05)
    assert tools["FileOps"].latency.mean() == pytest.approx(1200.0)
    assert default_tools()["FileOps"].latency.median() == pytest.approx(45.0)


def test_invalid_specs():
    for bad in (dict(kind="nope"), dict(prompt=(0, 10)), dict(rate_scale=0.0), dict(tool_mix={"A": -1.0}),
                dict(step_mean=500.0), dict(shared_prefix_fraction=1.0)):
        with pytest.raises(ConfigError):
            WorkloadSpec(**bad).resolved()
