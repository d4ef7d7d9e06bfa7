"""Synthetic agent workloads: step counts, token sizes, tool calls, arrivals."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from types import SimpleNamespace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from ..aeg import AegHint, HintStep, ObsLengthEma, build_from_hints, reuse_probability
from ..cache import CacheAccess, CacheAccessTrace, LatencyHistory, TtlConfig, compute_ttl
from ..core import (ConfigError, CostModel, LatencyDistribution, PlannedStep, Task, Tenant,
                    TenantClass, ToolType, default_tools, expected_duration)


class Kind(str, enum.Enum):
    SweBenchLike = "swebench"
    WebArenaLike = "webarena"
    MultiTenant = "multitenant"

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        for k in cls:
            if str(s).lower() in (k.value, k.name.lower()):
                return k
        raise ConfigError("workload.kind", f"unknown kind {s!r}")


# tokens appended by a tool's result
OBS_TOKENS = {
    "CodeExecution": (100, 800),
    "FileOps": (200, 1200),
    "WebApi": (300, 1500),
    "Database": (100, 500),
}

PRESETS = {
    Kind.SweBenchLike: dict(step_mean=37.0, step_max=150, prompt=(2000, 4000), output=(100, 500),
                            tool_mix={"FileOps": 0.5, "CodeExecution": 0.5}),
    Kind.WebArenaLike: dict(step_mean=18.0, step_max=100, prompt=(4000, 8000), output=(50, 200),
                            tool_mix={"WebApi": 0.8, "FileOps": 0.2}),
    Kind.MultiTenant: dict(step_mean=0.0, step_max=100, prompt=(2000, 4000), output=(100, 500),
                           tool_mix={"CodeExecution": 0.3, "FileOps": 0.3, "WebApi": 0.2, "Database": 0.2}),
}

# (class, number of tenants, tasks/min per tenant, steps per task)
TENANT_LAYOUT = [
    (TenantClass.Heavy, 3, 16.0, 100),
    (TenantClass.Medium, 4, 8.0, 30),
    (TenantClass.Light, 3, 4.0, 10),
]


@dataclass
class WorkloadSpec:
    kind: str = "swebench"
    horizon_ms: float = 3_600_000.0
    n_tasks: Optional[int] = None  # stop after this many arrivals
    arrival_rate: float = 8.0  # tasks/min, single-tenant kinds
    rate_scale: float = 1.0  # multiplies every tenant's arrival rate
    step_mean: Optional[float] = None
    step_max: Optional[int] = None
    fixed_steps: Optional[int] = None
    prompt: Optional[Tuple[int, int]] = None
    output: Optional[Tuple[int, int]] = None
    tool_mix: Optional[Dict[str, float]] = None
    tool_cv: Optional[float] = None  # override every tool with a log-normal of this CV
    tool_mean_ms: float = 1200.0  # used with tool_cv
    shared_prefix_fraction: float = 0.25
    slo_factor: float = 1.5
    all_at_once: bool = False  # every task arrives at t=0 (saturation experiments)
    tenants: Optional[List[Tuple[str, int, float, int]]] = None

    def resolved(self) -> "WorkloadSpec":
        k = Kind.parse(self.kind)
        p = PRESETS[k]
        out = WorkloadSpec(**{**asdict(self), "kind": k.value})
        out.step_mean = self.step_mean if self.step_mean is not None else p["step_mean"]
        out.step_max = self.step_max if self.step_max is not None else p["step_max"]
        out.prompt = tuple(self.prompt) if self.prompt is not None else p["prompt"]
        out.output = tuple(self.output) if self.output is not None else p["output"]
        out.tool_mix = dict(self.tool_mix) if self.tool_mix is not None else dict(p["tool_mix"])
        if k is Kind.MultiTenant and out.tenants is None:
            out.tenants = [(c.value, n, r, s) for c, n, r, s in TENANT_LAYOUT]
        out.validate()
        return out

    def validate(self):
        if self.horizon_ms <= 0:
            raise ConfigError("workload.horizon_ms", "must be > 0")
        if self.arrival_rate <= 0 or self.rate_scale <= 0:
            raise ConfigError("workload.arrival_rate", "must be > 0")
        for name in ("prompt", "output"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"workload.{name}", f"invalid range {lo}..{hi}")
        if self.step_max is not None and self.step_max < 1:
            raise ConfigError("workload.step_max", "must be >= 1")
        if self.step_mean and self.step_max and not 1 <= self.step_mean <= self.step_max:
            raise ConfigError("workload.step_mean", "must lie in [1, step_max]")
        if not self.tool_mix or any(v < 0 for v in self.tool_mix.values()) or sum(self.tool_mix.values()) <= 0:
            raise ConfigError("workload.tool_mix", "weights must be nonnegative with positive sum")
        if self.tool_cv is not None and self.tool_cv < 0:
            raise ConfigError("workload.tool_cv", "must be >= 0")
        if not 0 <= self.shared_prefix_fraction < 1:
            raise ConfigError("workload.shared_prefix_fraction", "must be in [0, 1)")
        for i, t in enumerate(self.tenants or []):
            if t[2] <= 0:
                raise ConfigError(f"workload.tenants[{i}].rate", "must be > 0")

    def tool_types(self) -> Dict[str, ToolType]:
        tools = default_tools()
        if self.tool_cv is not None:
            tools = {n: ToolType(n, LatencyDistribution.from_mean_cv(self.tool_mean_ms, self.tool_cv))
                     for n in tools}
        return tools


# ---------------------------------------------------------------- step counts

@lru_cache(maxsize=64)
def truncated_geometric_p(mean: float, kmax: int) -> float:
    """Success probability q so that a geometric on 1..kmax (renormalized) has the given mean."""
    if mean <= 1.0:
        return 1.0
    if mean >= (kmax + 1) / 2 - 1e-9:
        raise ConfigError("workload.step_mean", "too large for truncation point")
    k = np.arange(1, kmax + 1)

    def f(q):
        w = (1 - q) ** (k - 1) * q
        return float((k * w).sum() / w.sum()) - mean

    return brentq(f, 1e-9, 1 - 1e-12)


def step_pmf(mean: float, kmax: int) -> np.ndarray:
    q = truncated_geometric_p(mean, kmax)
    k = np.arange(1, kmax + 1)
    w = (1 - q) ** (k - 1) * q
    return w / w.sum()


def continue_probs(mean: float, kmax: int) -> np.ndarray:
    """Chance of another step after step i (0-based), from the step-count law."""
    pmf = step_pmf(mean, kmax)
    surv = pmf[::-1].cumsum()[::-1]  # P(K >= i+1)
    out = np.zeros(kmax)
    out[:-1] = surv[1:] / surv[:-1]
    return out


def sample_tool_latency(tool: ToolType, rng: np.random.Generator) -> float:
    return tool.latency.sample(rng)


# ---------------------------------------------------------------- generation

def _make_task(tid: int, tenant: int, tclass: str, t_arr: float, steps: int, spec: WorkloadSpec,
               tools: Dict[str, ToolType], rng: np.random.Generator, cm: CostModel,
               cont: Optional[np.ndarray]) -> Task:
    names = sorted(spec.tool_mix)
    w = np.array([spec.tool_mix[n] for n in names], float)
    w /= w.sum()
    plan: List[PlannedStep] = []
    fresh = int(rng.integers(spec.prompt[0], spec.prompt[1] + 1))
    for i in range(steps):
        out = int(rng.integers(spec.output[0], spec.output[1] + 1))
        last = i == steps - 1
        tool = None if last else names[int(rng.choice(len(names), p=w))]
        lat = 0.0 if last else float(sample_tool_latency(tools[tool], rng))
        plan.append(PlannedStep(i, fresh, out, tool, lat))
        if not last:
            lo, hi = OBS_TOKENS.get(tool, (100, 500))
            fresh = int(rng.integers(lo, hi + 1))

    # expected per-node tokens for the duration estimate
    mean_prompt = sum(spec.prompt) / 2
    mean_out = sum(spec.output) / 2
    mean_obs = sum(w[j] * sum(OBS_TOKENS.get(n, (100, 500))) / 2 for j, n in enumerate(names))
    top_tool = names[int(np.argmax(w))]
    n_nodes = steps if cont is None else len(cont)
    hint = []
    for i in range(n_nodes):
        tool = plan[i].tool if i < steps and plan[i].tool else top_tool
        p = (1.0 if i < steps - 1 else None) if cont is None else float(cont[i])
        if i == n_nodes - 1:
            p = None
        hint.append(HintStep(tool, p, tokens=(int(mean_prompt if i == 0 else mean_obs), int(mean_out))))
    aeg = build_from_hints(AegHint(hint))
    task = Task(task_id=tid, tenant_id=tenant, aeg=aeg, submit_time=t_arr, plan=plan,
                tenant_class=tclass,
                shared_prefix_tokens=int(spec.shared_prefix_fraction * plan[0].prompt_tokens))
    task.deadline = t_arr + spec.slo_factor * expected_duration(task, cm, tools)
    return task


def _arrivals(rate_per_min: float, horizon_ms: float, rng, limit=None, at_once=False):
    if at_once:
        return [0.0] * int(limit or 0)
    out, t = [], 0.0
    while True:
        t += rng.exponential(60_000.0 / rate_per_min)
        if t >= horizon_ms or (limit is not None and len(out) >= limit):
            return out
        out.append(t)


def generate_workload(spec: WorkloadSpec, seed: int, cm: CostModel = CostModel()):
    """Arrival-ordered list of (arrival_ms, Task). Deterministic in (spec, seed)."""
    spec = spec.resolved()
    tools = spec.tool_types()
    kind = Kind.parse(spec.kind)
    ss = np.random.SeedSequence(seed)
    arr_rng, task_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    pending = []  # (time, tenant, class, steps)
    tenants: List[Tenant] = []
    if kind is Kind.MultiTenant:
        tid = 0
        for cls_name, count, rate, steps in spec.tenants:
            for _ in range(count):
                tenants.append(Tenant(tid, TenantClass(cls_name), rate * spec.rate_scale))
                for t in _arrivals(rate * spec.rate_scale, spec.horizon_ms, arr_rng):
                    pending.append((t, tid, cls_name, steps))
                tid += 1
        pending.sort(key=lambda x: (x[0], x[1]))
        if spec.n_tasks is not None:
            pending = pending[:spec.n_tasks]
    else:
        tenants.append(Tenant(0, TenantClass.Heavy, spec.arrival_rate))
        times = _arrivals(spec.arrival_rate, spec.horizon_ms, arr_rng, spec.n_tasks, spec.all_at_once)
        pmf = None if spec.fixed_steps else step_pmf(spec.step_mean, spec.step_max)
        for t in times:
            k = spec.fixed_steps or int(task_rng.choice(spec.step_max, p=pmf)) + 1
            pending.append((t, 0, TenantClass.Heavy.value, k))
    cont = None
    if kind is not Kind.MultiTenant and not spec.fixed_steps:
        cont = continue_probs(spec.step_mean, spec.step_max)
    out = []
    for i, (t, ten, cls_name, steps) in enumerate(pending):
        out.append((t, _make_task(i, ten, cls_name, t, steps, spec, tools, task_rng, cm, cont)))
    return out


def tenants_of(spec: WorkloadSpec) -> List[Tenant]:
    spec = spec.resolved()
    if Kind.parse(spec.kind) is not Kind.MultiTenant:
        return [Tenant(0, TenantClass.Heavy, spec.arrival_rate)]
    out, tid = [], 0
    for cls_name, count, rate, _ in spec.tenants:
        for _ in range(count):
            out.append(Tenant(tid, TenantClass(cls_name), rate * spec.rate_scale))
            tid += 1
    return out


# ---------------------------------------------------------------- files

def write_workload(path, spec: WorkloadSpec, seed: int, tasks):
    with open(path, "w") as f:
        f.write(json.dumps({"type": "header", "seed": seed, "spec": asdict(spec.resolved())},
                           sort_keys=True) + "\n")
        for t, task in tasks:
            f.write(json.dumps({"type": "TaskArrive", "t_ms": t, "task": task.to_dict()},
                               sort_keys=True) + "\n")


def read_workload(path):
    with open(path) as f:
        lines = [json.loads(l) for l in f if l.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ConfigError("workload", "missing header line")
    hdr = lines[0]
    spec_d = dict(hdr["spec"])
    for k in ("prompt", "output"):
        if spec_d.get(k) is not None:
            spec_d[k] = tuple(spec_d[k])
    if spec_d.get("tenants") is not None:
        spec_d["tenants"] = [tuple(t) for t in spec_d["tenants"]]
    spec = WorkloadSpec(**spec_d)
    tasks = [(l["t_ms"], Task.from_dict(l["task"])) for l in lines[1:] if l["type"] == "TaskArrive"]
    return spec, hdr["seed"], tasks


# ---------------------------------------------------------------- offline cache traces

def access_trace(tasks, cm: CostModel = CostModel(), predictions: str = "aeg",
                 ttl_cfg: TtlConfig = TtlConfig(), tools: Optional[Dict[str, ToolType]] = None,
                 shared_prefix_fraction: float = 0.25) -> CacheAccessTrace:
    """Cache accesses of the given tasks if each ran without queueing.

    A step's access is at its start; the entry then holds the full context
    including the step's output. ``predictions`` chooses what the online
    side knows: ``"perfect"`` gives exact reuse and unbounded TTL, ``"aeg"``
    derives reuse from the task graph and TTL from observed tool latencies.
    """
    tools = tools or default_tools()
    raw = []  # (time, session, need, cached, tool, tool_ms, task, step index)
    for t0, task in tasks:
        t = t0
        ctx = 0
        prev = 0
        for i, st in enumerate(task.plan):
            need = ctx + st.prompt_tokens + st.output_tokens
            raw.append((t, task.task_id, need, prev, st.tool, st.tool_ms, task, i, ctx + st.prompt_tokens))
            t += cm.prefill_ms(st.prompt_tokens) + cm.decode_ms(st.output_tokens) + st.tool_ms
            ctx = need
            prev = need
    raw.sort(key=lambda r: (r[0], r[1], r[7]))
    hist = LatencyHistory(ttl_cfg.window)
    obs = ObsLengthEma()
    pending_obs = []  # (time_done, tool, ms) revealed once the call has finished
    acc = []
    for (t, sid, need, cached, tool, tool_ms, task, i, prompt_total) in raw:
        while pending_obs and pending_obs[0][0] <= t:
            _, tl, ms, ob = pending_obs.pop(0)
            hist.add(tl, ms)
            obs.update(tl, ob)
        last = tool is None
        busy = cm.prefill_ms(task.plan[i].prompt_tokens) + cm.decode_ms(task.plan[i].output_tokens)
        if last:
            reuse, ttl = 0.0, None  # the task finishing is observable
        elif predictions == "perfect":
            reuse, ttl = 1.0, math.inf
        else:
            cursor = SimpleNamespace(current_node=min(i, len(task.aeg.nodes) - 1), context_tokens=need)
            reuse = reuse_probability(cursor, task.aeg, obs)
            ttl = compute_ttl(hist.get(tool), ttl_cfg, 0.0, tools[tool].latency)
        if not last:
            done = t + busy + tool_ms
            nxt = task.plan[i + 1].prompt_tokens
            pending_obs.append((done, tool, tool_ms, nxt))
            pending_obs.sort(key=lambda x: x[0])
        acc.append(CacheAccess(t, sid, need, cached, reuse, ttl,
                               int(shared_prefix_fraction * prompt_total), busy))
    return CacheAccessTrace(acc)
