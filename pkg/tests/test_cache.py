import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentsched.cache import (
    CacheAccess, CacheAccessTrace, EvictionWeights, Policy, TtlConfig, belady_replay, competitive_ratio,
    compute_ttl, eviction_score, farthest_next_use, memory_pressure, percentile_nearest_rank, prefetch_target,
    read_trace, replay_policy, select_victims, solve_opt, write_trace,
)
from agentsched.core import AgentExecutionGraph, CacheEntry, CapacityError, ConfigError, Edge, Task

from _oracles import brute_force_min_cost, chain_regeneration


def entry(sid, tokens=10, last=0.0, reuse=0.0, ttl_expiry=None):
    return CacheEntry(sid, 0, tokens, 1, last, ttl_expiry=ttl_expiry, reuse_prob=reuse)


# ---------------------------------------------------------------- eviction score

def test_score_all_terms_vanish():
    e = entry(1, tokens=1, last=100.0, reuse=1.0)
    assert eviction_score(e, 100.0, 50.0, 1e12) == pytest.approx(0.0, abs=1e-9)


def test_score_hand_evaluation():
    e = entry(1, tokens=25, last=50.0, reuse=0.6)
    assert eviction_score(e, 100.0, 100.0, 100.0) == pytest.approx(0.40)


def test_score_maximal():
    e = entry(1, tokens=100, last=0.0, reuse=0.0)
    assert eviction_score(e, 500.0, 100.0, 100.0) == pytest.approx(1.0)


def test_weights_normalized_and_nonnegative():
    w = EvictionWeights(3, 5, 2).normalized()
    assert (w.alpha, w.beta, w.gamma) == pytest.approx((0.3, 0.5, 0.2))
    with pytest.raises(ConfigError):
        EvictionWeights(-0.1, 0.6, 0.5)


@given(st.floats(0, 1000), st.floats(0, 1000), st.integers(1, 1000), st.integers(1, 1000),
       st.floats(0, 1), st.floats(0, 1))
def test_score_monotone(age1, age2, size1, size2, r1, r2):
    now, tau, smax = 2000.0, 1000.0, 1000.0
    lo = entry(1, min(size1, size2), now - min(age1, age2), max(r1, r2))
    hi = entry(2, max(size1, size2), now - max(age1, age2), min(r1, r2))
    assert eviction_score(lo, now, tau, smax) <= eviction_score(hi, now, tau, smax) + 1e-12


# ---------------------------------------------------------------- victim selection

def test_nothing_needed_nothing_evicted():
    assert select_victims({1: entry(1)}, 0, Policy.WaLru, 0.0) == []


def test_wa_lru_picks_highest_score():
    res = {1: entry(1, 10, last=0.0, reuse=0.0), 2: entry(2, 10, last=90.0, reuse=1.0)}
    assert select_victims(res, 5, Policy.WaLru, 100.0) == [1]


def test_lru_ignores_reuse():
    res = {1: entry(1, 10, last=0.0, reuse=1.0), 2: entry(2, 10, last=10.0, reuse=0.0)}
    assert select_victims(res, 5, Policy.Lru, 20.0) == [1]
    assert select_victims(res, 5, Policy.WaLru, 20.0) == [2]


def test_minimal_prefix_of_victims():
    res = {i: entry(i, 10, last=float(i)) for i in range(5)}
    assert select_victims(res, 25, Policy.Lru, 10.0) == [0, 1, 2]


def test_ttl_protection_advisory_until_hard_pressure():
    res = {1: entry(1, 10, last=0.0, ttl_expiry=100.0), 2: entry(2, 10, last=5.0)}
    assert select_victims(res, 10, Policy.Lru, 10.0) == [2]
    assert select_victims(res, 20, Policy.Lru, 10.0, pressure=0.5) is None
    assert select_victims(res, 20, Policy.Lru, 10.0, pressure=1.0) == [2, 1]
    # expired protection no longer counts
    assert select_victims(res, 10, Policy.Lru, 200.0) == [1]


def test_impossible_request_raises():
    with pytest.raises(CapacityError):
        select_victims({1: entry(1, 10)}, 11, Policy.Lru, 0.0)


def test_policy_names_parse():
    assert Policy.parse("wa-lru") is Policy.WaLru and Policy.parse("PrefixLru") is Policy.PrefixLru
    with pytest.raises(ConfigError):
        Policy.parse("mru")


# ---------------------------------------------------------------- TTL and pressure

def test_ttl_examples():
    hist = [100.0] * 94 + [2400.0] * 6  # nearest-rank p95 = 2400
    assert compute_ttl(hist, TtlConfig(), 0.0) == 2400.0
    assert compute_ttl(hist, TtlConfig(), 1.0) == 1200.0
    assert compute_ttl([900_000.0] * 10, TtlConfig(), 0.0) == 300_000.0


def test_ttl_fallback_to_configured_distribution():
    from agentsched.core import default_tools
    d = default_tools()["CodeExecution"].latency
    assert compute_ttl([], TtlConfig(), 0.0, d) == pytest.approx(2400.0, rel=1e-6)
    with pytest.raises(ValueError):
        compute_ttl([], TtlConfig(), 0.0)


def test_nearest_rank_percentile():
    assert percentile_nearest_rank(list(range(1, 101)), 95) == 95
    assert percentile_nearest_rank([5.0], 95) == 5.0
    assert percentile_nearest_rank([1, 2, 3, 4], 50) == 2


def test_ttl_uses_recent_window():
    cfg = TtlConfig(window=4)
    assert compute_ttl([10_000.0] * 50 + [10.0] * 4, cfg, 0.0) == 10.0


def test_pressure_examples():
    assert memory_pressure(70, 100) == 0.0
    assert memory_pressure(80, 100) == pytest.approx(0.5)
    assert memory_pressure(95, 100) == 1.0


def test_ttl_config_validation():
    for bad in (dict(percentile=0), dict(percentile=100), dict(low=0.9, high=0.7), dict(ttl_max=0)):
        with pytest.raises(ConfigError):
            TtlConfig(**bad)


@given(st.lists(st.floats(0, 1e7), min_size=1, max_size=300), st.floats(0, 1), st.floats(1, 1e6))
def test_ttl_bounded(hist, m, ttl_max):
    cfg = TtlConfig(ttl_max=ttl_max)
    ttl = compute_ttl(hist, cfg, m)
    base = percentile_nearest_rank(hist[-cfg.window:], cfg.percentile)
    assert ttl <= ttl_max
    assert ttl == pytest.approx(min(base * (1 - 0.5 * m), ttl_max))
    assert 0.5 <= 1 - 0.5 * m <= 1.0


# ---------------------------------------------------------------- prefetch

def _at(g, node):
    return Task(0, 0, g, 0.0, current_node=node)


def test_prefetch_target_examples():
    g = AgentExecutionGraph([0, 1, 2], [Edge(0, 1, 0.4), Edge(0, 2, 0.6)])
    assert prefetch_target(_at(g, 0), g) == 2
    assert prefetch_target(_at(g, 2), g) is None
    g = AgentExecutionGraph([0, 1, 2], [Edge(0, 2, 0.5), Edge(0, 1, 0.5)])
    assert prefetch_target(_at(g, 0), g) == 1


# ---------------------------------------------------------------- offline traces

def unit_trace(sessions, sizes=None):
    """Each access requires the session's size; a retained entry saves all of it."""
    sizes = sizes or {}
    return CacheAccessTrace([CacheAccess(float(i), s, sizes.get(s, 1), sizes.get(s, 1))
                             for i, s in enumerate(sessions)])


def test_abcab_example():
    tr = unit_trace([0, 1, 2, 0, 1])
    assert belady_replay(tr, 2) == 4  # A, B, C prefills plus one re-prefill of B
    r = solve_opt(tr, 2)
    assert r.retained == [0]  # A kept from access 0 to 3; B dropped after access 1
    assert farthest_next_use(tr, 2) == 4


def test_ample_capacity_only_first_touch():
    tr = unit_trace([0, 1, 2, 0, 1, 2, 0], {0: 5, 1: 7, 2: 3})
    assert belady_replay(tr, 15) == 15


def test_single_access_exceeding_capacity():
    with pytest.raises(CapacityError):
        belady_replay(unit_trace([0], {0: 10}), 9)


def test_times_must_not_decrease():
    with pytest.raises(ValueError):
        CacheAccessTrace([CacheAccess(2.0, 0, 1, 0), CacheAccess(1.0, 1, 1, 0)])


def test_farthest_next_use_not_optimal_with_sizes():
    # C(3) B(1) A(3) B(1) C(3), capacity 6: at A one of C, B must go. Farthest-next-use
    # drops C and re-prefills 3 tokens; dropping the small B costs only 1.
    sizes = {0: 3, 1: 1, 2: 3}
    tr = unit_trace([2, 1, 0, 1, 2], sizes)
    assert farthest_next_use(tr, 6) == 3 + 1 + 3 + 3
    assert belady_replay(tr, 6) == 3 + 1 + 3 + 1
    assert belady_replay(tr, 6) == brute_force_min_cost([(a.session, a.tokens_required, a.cached_if_retained)
                                                         for a in tr.accesses], 6)


@st.composite
def small_instances(draw):
    n_sess = draw(st.integers(1, 6))
    n_acc = draw(st.integers(1, 10))
    sess = draw(st.lists(st.integers(0, n_sess - 1), min_size=n_acc, max_size=n_acc))
    size, acc = {}, []
    for i, s in enumerate(sess):
        prev = size.get(s, 0)
        need = prev + draw(st.integers(1, 6))
        saved = prev if draw(st.booleans()) else draw(st.integers(0, prev))
        size[s] = need
        acc.append(CacheAccess(float(i), s, need, saved))
    lo = max(a.tokens_required for a in acc)
    cap = draw(st.integers(lo, lo + sum(a.tokens_required for a in acc)))
    return CacheAccessTrace(acc), cap


@settings(max_examples=150, deadline=None)
@given(small_instances())
def test_belady_equals_brute_force(inst):
    tr, cap = inst
    oracle = brute_force_min_cost([(a.session, a.tokens_required, a.cached_if_retained) for a in tr.accesses], cap)
    assert belady_replay(tr, cap) == oracle


@settings(max_examples=150, deadline=None)
@given(small_instances(), st.floats(0, 1))
def test_cost_ordering_invariants(inst, reuse):
    tr, cap = inst
    tr = CacheAccessTrace([CacheAccess(a.time, a.session, a.tokens_required, a.cached_if_retained, reuse)
                           for a in tr.accesses])
    opt = belady_replay(tr, cap)
    c = {p: replay_policy(tr, cap, p) for p in Policy if p is not Policy.PrefixLru}
    assert c[Policy.EvictAll] >= c[Policy.Lru] >= opt
    assert c[Policy.WaLru] >= opt
    assert c[Policy.EvictAll] == tr.base_cost()


# ---------------------------------------------------------------- quadratic regeneration

def chain_trace(k, c, reuse=1.0, ttl=math.inf):
    # step i holds i*c tokens; a surviving entry covers all of them
    return CacheAccessTrace([CacheAccess(float(i), 0, i * c, i * c if i > 1 else 0, reuse, ttl)
                             for i in range(1, k + 1)])


@pytest.mark.parametrize("k", range(1, 21))
def test_quadratic_regeneration(k):
    tr = chain_trace(k, 100)
    assert replay_policy(tr, 100 * k, Policy.EvictAll) == chain_regeneration(k, 100, retain=False) == 50 * k * (k + 1)
    assert replay_policy(tr, 100 * k, Policy.WaLru) == chain_regeneration(k, 100, retain=True) == 100
    assert belady_replay(tr, 100 * k) == 100


def test_prefix_lru_credits_shared_prefix_on_misses():
    tr = CacheAccessTrace([CacheAccess(0, 0, 100, 0, shared_tokens=25), CacheAccess(1, 1, 100, 0, shared_tokens=25),
                           CacheAccess(2, 0, 150, 100, shared_tokens=25)])
    assert replay_policy(tr, 150, Policy.Lru) == 350
    assert replay_policy(tr, 150, Policy.PrefixLru) == 75 + 75 + 125


def test_trace_file_round_trip(tmp_path):
    tr = CacheAccessTrace([CacheAccess(0.0, 1, 10, 0, 0.5, math.inf, 2, 3.0), CacheAccess(1.0, 1, 12, 10)], 7)
    write_trace(tmp_path / "t.ndjson", tr)
    again = read_trace(tmp_path / "t.ndjson")
    assert again.accesses == tr.accesses and again.bytes_per_token == 7


# ---------------------------------------------------------------- ratio

def test_competitive_ratio_edges():
    assert competitive_ratio(5, 5) == 1.0
    assert competitive_ratio(0, 0) == 1.0
    assert competitive_ratio(3, 0) == math.inf
    assert competitive_ratio(6, 4) == 1.5


def test_perfect_prediction_matches_optimum():
    from agentsched.simulator.workload import WorkloadSpec, access_trace, generate_workload
    for seed in range(3):
        wl = generate_workload(WorkloadSpec("swebench", n_tasks=4), seed)
        tr = access_trace(wl, predictions="perfect")
        cap = tr.peak_working_set()
        assert replay_policy(tr, cap, Policy.WaLru) == belady_replay(tr, cap)
