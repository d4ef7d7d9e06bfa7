import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentsched.core import (
    AgentExecutionGraph, CacheEntry, ConfigError, CostModel, Edge, EventKind, LatencyDistribution,
    PlannedStep, StepRecord, Task, Tenant, TenantClass, ToolType, default_tools, expected_duration,
    make_event, SimEvent, step_cost, validate_tools, BYTES_PER_TOKEN,
)
from agentsched.aeg import AegHint, HintStep, build_from_hints

CM = CostModel()


def chain(n, p=1.0, tool=None, tokens=(1000, 100)):
    return build_from_hints(AegHint([HintStep(tool, p if i < n - 1 else None, tokens=tokens)
                                     for i in range(n)]))


# ---------------------------------------------------------------- latency

def test_code_execution_fit_matches_table():
    d = default_tools()["CodeExecution"].latency
    assert d.mu == pytest.approx(math.log(180))
    assert d.sigma == pytest.approx(math.log(2400 / 180) / 1.6448536, rel=1e-6)
    assert d.sigma == pytest.approx(1.575, abs=0.002)
    assert d.quantile(0.5) == pytest.approx(180)
    assert d.quantile(0.95) == pytest.approx(2400, rel=1e-6)


def test_every_tool_hits_its_p50_and_p95():
    table = {"CodeExecution": (180, 2400), "FileOps": (45, 320), "WebApi": (850, 4500), "Database": (120, 890)}
    tools = default_tools()
    for name, (p50, p95) in table.items():
        assert tools[name].latency.quantile(0.5) == pytest.approx(p50)
        assert tools[name].latency.quantile(0.95) == pytest.approx(p95, rel=1e-6)


def test_zero_sigma_is_constant_median():
    d = LatencyDistribution("LogNormal", math.log(250.0), 0.0)
    rng = np.random.default_rng(1)
    assert all(d.sample(rng) == pytest.approx(250.0) for _ in range(20))


def test_empirical_draws_only_from_samples():
    d = LatencyDistribution("Empirical", samples=(3.0, 7.0, 11.0))
    rng = np.random.default_rng(2)
    assert {d.sample(rng) for _ in range(200)} <= {3.0, 7.0, 11.0}


def test_empirical_needs_samples_and_sigma_nonnegative():
    with pytest.raises(ConfigError):
        LatencyDistribution("Empirical")
    with pytest.raises(ConfigError):
        LatencyDistribution("LogNormal", 0.0, -1.0)


def test_mean_cv_fit():
    d = LatencyDistribution.from_mean_cv(1200.0, 1.0)
    assert d.mean() == pytest.approx(1200.0)
    x = np.random.default_rng(0).lognormal(d.mu, d.sigma, 200_000)
    assert x.std() / x.mean() == pytest.approx(1.0, abs=0.05)


def test_duplicate_tool_names_rejected():
    t = ToolType("FileOps", LatencyDistribution())
    with pytest.raises(ConfigError):
        validate_tools([t, t])


# ---------------------------------------------------------------- graph

def test_continue_and_termination_mass():
    g = AgentExecutionGraph([0, 1, 2], [Edge(0, 1, 0.6), Edge(0, 2, 0.3)])
    assert g.continue_prob(0) == pytest.approx(0.9)
    assert g.termination_prob(0) == pytest.approx(0.1)
    assert g.termination_prob(2) == 1.0


def test_validate_rejects_bad_graphs():
    with pytest.raises(ConfigError):
        AgentExecutionGraph([0, 1], [Edge(0, 1, 1.2)]).validate()
    with pytest.raises(ConfigError):
        AgentExecutionGraph([0, 1, 2], [Edge(0, 1, 0.7), Edge(0, 2, 0.7)]).validate()
    with pytest.raises(ConfigError):
        AgentExecutionGraph([0, 1], [Edge(0, 1, 0.5), Edge(1, 0, 0.5)]).validate()  # unmarked cycle
    with pytest.raises(ConfigError):
        # retry to a node that is not an ancestor
        AgentExecutionGraph([0, 1, 2], [Edge(0, 1, 0.5), Edge(0, 2, 0.5), Edge(2, 1, 0.3, retry=True)]).validate()


def test_retry_to_ancestor_is_allowed():
    AgentExecutionGraph([0, 1, 2], [Edge(0, 1, 1.0), Edge(1, 2, 0.6), Edge(2, 0, 0.3, retry=True)]).validate()


def test_expected_visits_chain_and_retry():
    g = chain(3, 0.5)
    v = g.expected_visits()
    assert v == {0: 1.0, 1: 0.5, 2: 0.25}
    # self-retry with probability r: node runs 1/(1-r) times
    g = AgentExecutionGraph([0, 1], [Edge(0, 1, 0.5), Edge(0, 0, 0.5, retry=True)])
    assert g.expected_visits()[0] == pytest.approx(2.0)
    assert g.expected_visits()[1] == pytest.approx(1.0)


def test_graph_round_trip():
    g = chain(4, 0.9, "FileOps")
    again = AgentExecutionGraph.from_dict(json.loads(json.dumps(g.to_dict())))
    assert again == g


# ---------------------------------------------------------------- cost

def test_step_cost_examples():
    assert step_cost(4000, 4000, 0, CM)[0] == 0 and step_cost(4000, 4000, 0, CM)[2] == 0
    assert step_cost(4000, 0, 0, CM)[0] == pytest.approx(800.0)
    assert step_cost(4000, 3500, 60, CM) == (pytest.approx(100.0), pytest.approx(2000.0), 500)
    with pytest.raises(ValueError):
        step_cost(10, 11, 0, CM)


def test_bytes_per_token_default():
    # 2 (K,V) x 80 layers x 8 KV heads x 128 dims x 2 bytes
    assert BYTES_PER_TOKEN == 327_680
    e = CacheEntry(1, 0, 8000, BYTES_PER_TOKEN, 0.0)
    assert e.bytes == 8000 * 327_680


def test_ttl_expiry_after_set_time():
    e = CacheEntry(1, 0, 10, 1, 0.0)
    e.set_ttl(50.0, 20.0)
    assert e.ttl_expiry == 70.0 >= 50.0
    with pytest.raises(ValueError):
        e.set_ttl(50.0, -1.0)


# ---------------------------------------------------------------- expected duration

def _task(g):
    return Task(0, 0, g, 0.0)


def test_expected_duration_single_node():
    g = chain(1, tokens=(1000, 100))
    assert expected_duration(_task(g), CM) == pytest.approx(CM.prefill_ms(1000) + CM.decode_ms(100))


def test_expected_duration_three_step_file_chain():
    g = chain(3, 1.0, "FileOps", tokens=(1000, 100))
    step = 1000 / 5000 * 1000 + 100 / 30 * 1000  # 200 ms prefill + 3333.3 ms decode
    assert expected_duration(_task(g), CM) == pytest.approx(3 * step + 2 * 45.0)


def test_expected_duration_immediate_termination():
    g = AgentExecutionGraph([0, 1], [Edge(0, 1, 0.0)], tool_of={0: "FileOps"},
                            tokens_of={0: (1000, 100), 1: (500, 50)})
    assert expected_duration(_task(g), CM) == pytest.approx(CM.prefill_ms(1000) + CM.decode_ms(100))


def test_expected_duration_empty_graph():
    assert expected_duration(_task(AgentExecutionGraph([])), CM) == 0.0


# ---------------------------------------------------------------- tasks and tenants

def test_context_never_shrinks():
    t = _task(chain(2))
    t.grow_context(100)
    with pytest.raises(ValueError):
        t.grow_context(-1)
    assert t.context_tokens == 100


def test_tenant_rate_positive():
    with pytest.raises(ConfigError):
        Tenant(0, TenantClass.Light, 0.0)


def test_task_round_trip():
    t = Task(7, 2, chain(3, 0.8, "WebApi"), 12.5, deadline=99.0, tenant_class="Light",
             plan=[PlannedStep(0, 100, 10, "WebApi", 5.0)], records=[StepRecord(100, 10, 5.0, 0)])
    again = Task.from_dict(json.loads(json.dumps(t.to_dict())))
    assert again == t


# ---------------------------------------------------------------- events

def test_event_tiebreak_completions_first():
    a = make_event(10, EventKind.StepStartPrefill, 1)
    b = make_event(10, EventKind.StepDone, 5)
    c = make_event(9, EventKind.TaskArrive, 9)
    assert [e.kind for e in sorted([a, b, c], key=SimEvent.sort_key)] == [
        EventKind.TaskArrive, EventKind.StepDone, EventKind.StepStartPrefill]


@given(st.integers(0, 10**12), st.sampled_from(list(EventKind)), st.integers(-1, 10**6),
       st.dictionaries(st.sampled_from(["worker", "tokens", "bytes", "dst"]), st.integers(0, 10**9)))
def test_event_round_trip(t, kind, task, payload):
    e = make_event(t, kind, task, 3, **payload)
    assert SimEvent.from_dict(json.loads(json.dumps(e.to_dict()))) == e


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 50), st.sampled_from(list(EventKind)), st.integers(0, 5)),
                min_size=1, max_size=30))
def test_event_order_is_total(raw):
    evs = [make_event(t, k, tid, i) for i, (t, k, tid) in enumerate(raw)]
    keys = [e.sort_key() for e in sorted(evs, key=SimEvent.sort_key)]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)
