"""Domain types shared by every module: graphs, tools, tasks, cache entries, events."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

# 2 (K and V) * 80 layers * 8 kv heads * 128 head dim * 2 bytes (fp16)
BYTES_PER_TOKEN = 2 * 80 * 8 * 128 * 2

Z95 = 1.6448536269514722  # standard normal 0.95 quantile


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class CapacityError(RuntimeError):
    def __init__(self, message: str, worker_id: Optional[int] = None):
        super().__init__(message if worker_id is None else f"worker {worker_id}: {message}")
        self.worker_id = worker_id


# ---------------------------------------------------------------- latency

@dataclass(frozen=True)
class LatencyDistribution:
    family: str = "LogNormal"  # or "Empirical"
    mu: float = 0.0  # log-ms
    sigma: float = 0.0
    samples: tuple = ()

    def __post_init__(self):
        if self.family not in ("LogNormal", "Empirical"):
            raise ConfigError("latency.family", f"unknown family {self.family!r}")
        if self.sigma < 0:
            raise ConfigError("latency.sigma", "must be >= 0")
        if self.family == "Empirical" and not self.samples:
            raise ConfigError("latency.samples", "empirical distribution needs samples")

    @classmethod
    def from_percentiles(cls, p50: float, p95: float) -> "LatencyDistribution":
        """Log-normal whose median and 95th percentile hit the given values."""
        return cls("LogNormal", math.log(p50), math.log(p95 / p50) / Z95)

    @classmethod
    def from_mean_cv(cls, mean: float, cv: float) -> "LatencyDistribution":
        s2 = math.log1p(cv * cv)
        return cls("LogNormal", math.log(mean) - s2 / 2, math.sqrt(s2))

    def median(self) -> float:
        if self.family == "Empirical":
            return float(np.median(self.samples))
        return math.exp(self.mu)

    def mean(self) -> float:
        if self.family == "Empirical":
            return float(np.mean(self.samples))
        return math.exp(self.mu + self.sigma ** 2 / 2)

    def quantile(self, q: float) -> float:
        if self.family == "Empirical":
            return float(np.quantile(self.samples, q))
        from scipy.stats import norm
        return math.exp(self.mu + self.sigma * norm.ppf(q))

    def sample(self, rng: np.random.Generator) -> float:
        if self.family == "Empirical":
            return float(self.samples[rng.integers(len(self.samples))])
        if self.sigma == 0:
            return math.exp(self.mu)
        return float(rng.lognormal(self.mu, self.sigma))

    def to_dict(self):
        d = {"family": self.family, "mu": self.mu, "sigma": self.sigma}
        if self.samples:
            d["samples"] = list(self.samples)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], d.get("mu", 0.0), d.get("sigma", 0.0), tuple(d.get("samples", ())))


@dataclass(frozen=True)
class ToolType:
    name: str
    latency: LatencyDistribution

    def to_dict(self):
        return {"name": self.name, "latency": self.latency.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], LatencyDistribution.from_dict(d["latency"]))


# P50 / P95 / P99 in ms per tool class
TOOL_TABLE = {
    "CodeExecution": (180.0, 2400.0, 28000.0),
    "FileOps": (45.0, 320.0, 1200.0),
    "WebApi": (850.0, 4500.0, 45000.0),
    "Database": (120.0, 890.0, 3500.0),
}


def default_tools() -> Dict[str, ToolType]:
    return {name: ToolType(name, LatencyDistribution.from_percentiles(p50, p95))
            for name, (p50, p95, _) in TOOL_TABLE.items()}


def validate_tools(tools: List[ToolType]) -> Dict[str, ToolType]:
    out = {}
    for i, t in enumerate(tools):
        if t.name in out:
            raise ConfigError(f"tools[{i}].name", f"duplicate tool {t.name!r}")
        out[t.name] = t
    return out


# ---------------------------------------------------------------- graph

@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    prob: float
    retry: bool = False


@dataclass
class AgentExecutionGraph:
    """Probabilistic step graph of one agent task.

    Forward edges form a DAG. Retry edges may point back to an ancestor.
    Whatever probability mass a node does not send along an edge is the
    chance that the task ends there.
    """

    nodes: List[int]
    edges: List[Edge] = field(default_factory=list)
    tool_of: Dict[int, Optional[str]] = field(default_factory=dict)
    terminal: set = field(default_factory=set)
    # optional per-node (fresh prompt tokens, output tokens) estimate
    tokens_of: Dict[int, tuple] = field(default_factory=dict)

    def __post_init__(self):
        self._out: Dict[int, List[Edge]] = {v: [] for v in self.nodes}
        for e in self.edges:
            self._out.setdefault(e.src, []).append(e)

    def successors(self, v: int) -> List[Edge]:
        return self._out.get(v, [])

    def continue_prob(self, v: int) -> float:
        return sum(e.prob for e in self.successors(v))

    def termination_prob(self, v: int) -> float:
        return max(0.0, 1.0 - self.continue_prob(v))

    def root(self) -> int:
        return self.nodes[0]

    def validate(self):
        ids = set(self.nodes)
        if len(ids) != len(self.nodes):
            raise ConfigError("aeg.nodes", "duplicate node id")
        for i, e in enumerate(self.edges):
            if not 0.0 <= e.prob <= 1.0:
                raise ConfigError(f"aeg.edges[{i}].prob", f"{e.prob} outside [0,1]")
            if e.src not in ids or e.dst not in ids:
                raise ConfigError(f"aeg.edges[{i}]", "endpoint not in nodes")
        for v in self.nodes:
            if v in self.terminal and self.successors(v):
                raise ConfigError(f"aeg.terminal[{v}]", "terminal node has outgoing edges")
            if self.continue_prob(v) > 1.0 + 1e-9:
                raise ConfigError(f"aeg.node[{v}]", "outgoing probabilities sum above 1")
        order = self._forward_topo()
        if order is None:
            raise ConfigError("aeg.edges", "forward edges contain a cycle")
        anc = self._forward_ancestors(order)
        for i, e in enumerate(self.edges):
            if e.retry and not (e.dst == e.src or e.dst in anc[e.src]):
                raise ConfigError(f"aeg.edges[{i}]", "retry edge must target an ancestor")
        return self

    def _forward_topo(self):
        indeg = {v: 0 for v in self.nodes}
        for e in self.edges:
            if not e.retry:
                indeg[e.dst] += 1
        ready = sorted(v for v, d in indeg.items() if d == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for e in self.successors(v):
                if e.retry:
                    continue
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
        return order if len(order) == len(self.nodes) else None

    def _forward_ancestors(self, order):
        anc = {v: set() for v in self.nodes}
        for v in order:
            for e in self.successors(v):
                if not e.retry:
                    anc[e.dst] |= anc[v] | {v}
        return anc

    def expected_visits(self, start: Optional[int] = None) -> Dict[int, float]:
        """Expected number of times each node executes, starting at ``start``."""
        start = self.root() if start is None else start
        if not any(e.retry for e in self.edges):
            order = self._forward_topo() or list(self.nodes)
            reach = {v: 0.0 for v in self.nodes}
            reach[start] = 1.0
            for v in order:
                if reach[v]:
                    for e in self.successors(v):
                        reach[e.dst] += reach[v] * e.prob
            return reach
        idx = {v: i for i, v in enumerate(self.nodes)}
        n = len(self.nodes)
        P = np.zeros((n, n))
        for e in self.edges:
            P[idx[e.src], idx[e.dst]] += e.prob
        b = np.zeros(n)
        b[idx[start]] = 1.0
        visits = np.linalg.solve(np.eye(n) - P.T, b)
        return {v: float(visits[idx[v]]) for v in self.nodes}

    def to_dict(self):
        return {
            "nodes": list(self.nodes),
            "edges": [[e.src, e.dst, e.prob, e.retry] for e in self.edges],
            "tool_of": {str(k): v for k, v in sorted(self.tool_of.items())},
            "terminal": sorted(self.terminal),
            "tokens_of": {str(k): list(v) for k, v in sorted(self.tokens_of.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            nodes=list(d["nodes"]),
            edges=[Edge(int(a), int(b), float(p), bool(r)) for a, b, p, r in d["edges"]],
            tool_of={int(k): v for k, v in d.get("tool_of", {}).items()},
            terminal=set(d.get("terminal", ())),
            tokens_of={int(k): tuple(v) for k, v in d.get("tokens_of", {}).items()},
        )

    def __eq__(self, other):
        return isinstance(other, AgentExecutionGraph) and self.to_dict() == other.to_dict()


# ---------------------------------------------------------------- cost model

@dataclass(frozen=True)
class CostModel:
    prefill_rate: float = 5000.0  # tokens/s
    decode_rate: float = 30.0  # tokens/s per request
    instances_per_node: int = 1
    bytes_per_token: int = BYTES_PER_TOKEN

    def __post_init__(self):
        if self.prefill_rate <= 0:
            raise ConfigError("cost_model.prefill_rate", "must be > 0")
        if self.decode_rate <= 0:
            raise ConfigError("cost_model.decode_rate", "must be > 0")
        if self.bytes_per_token <= 0:
            raise ConfigError("cost_model.bytes_per_token", "must be > 0")

    def prefill_ms(self, tokens) -> float:
        return 1000.0 * tokens / self.prefill_rate

    def decode_ms(self, tokens) -> float:
        return 1000.0 * tokens / self.decode_rate


def step_cost(prompt_tokens: int, cached_tokens: int, output_tokens: int, cm: CostModel):
    """Returns (prefill_ms, decode_ms, regen_tokens) for one inference step."""
    if cached_tokens > prompt_tokens:
        raise ValueError("cached_tokens exceeds prompt_tokens")
    regen = prompt_tokens - cached_tokens
    return cm.prefill_ms(regen), cm.decode_ms(output_tokens), regen


# ---------------------------------------------------------------- tasks

class TenantClass(str, enum.Enum):
    Heavy = "Heavy"
    Medium = "Medium"
    Light = "Light"


@dataclass
class Tenant:
    tenant_id: int
    cls: TenantClass
    arrival_rate: float  # tasks/min
    active_tasks: set = field(default_factory=set)

    def __post_init__(self):
        if self.arrival_rate <= 0:
            raise ConfigError(f"tenants[{self.tenant_id}].arrival_rate", "must be > 0")


@dataclass
class PlannedStep:
    """One concrete step of a generated task (what actually happens)."""
    node: int
    prompt_tokens: int  # fresh tokens appended before this step
    output_tokens: int
    tool: Optional[str]  # tool called after the step, None on the last
    tool_ms: float = 0.0


@dataclass
class StepRecord:
    prompt_tokens: int
    output_tokens: int
    tool_wait_ms: float
    regen_tokens: int


@dataclass
class Task:
    task_id: int
    tenant_id: int
    aeg: AgentExecutionGraph
    submit_time: float  # ms
    deadline: float = math.inf
    current_node: int = 0
    context_tokens: int = 0
    steps_done: int = 0
    records: List[StepRecord] = field(default_factory=list)
    plan: List[PlannedStep] = field(default_factory=list)
    tenant_class: str = "Heavy"
    shared_prefix_tokens: int = 0
    finish_time: Optional[float] = None

    def grow_context(self, tokens: int):
        if tokens < 0:
            raise ValueError("context cannot shrink")
        self.context_tokens += tokens

    @property
    def finished(self) -> bool:
        return self.finish_time is not None

    def to_dict(self):
        return {
            "task_id": self.task_id, "tenant_id": self.tenant_id,
            "tenant_class": self.tenant_class, "submit_time": self.submit_time,
            "deadline": self.deadline, "current_node": self.current_node,
            "context_tokens": self.context_tokens, "steps_done": self.steps_done,
            "shared_prefix_tokens": self.shared_prefix_tokens,
            "finish_time": self.finish_time,
            "aeg": self.aeg.to_dict(),
            "records": [[r.prompt_tokens, r.output_tokens, r.tool_wait_ms, r.regen_tokens]
                        for r in self.records],
            "plan": [[p.node, p.prompt_tokens, p.output_tokens, p.tool, p.tool_ms]
                     for p in self.plan],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            task_id=d["task_id"], tenant_id=d["tenant_id"],
            aeg=AgentExecutionGraph.from_dict(d["aeg"]),
            submit_time=d["submit_time"], deadline=d["deadline"],
            current_node=d["current_node"], context_tokens=d["context_tokens"],
            steps_done=d["steps_done"],
            records=[StepRecord(*r) for r in d["records"]],
            plan=[PlannedStep(*p) for p in d["plan"]],
            tenant_class=d["tenant_class"],
            shared_prefix_tokens=d["shared_prefix_tokens"],
            finish_time=d["finish_time"],
        )

    def __eq__(self, other):
        return isinstance(other, Task) and self.to_dict() == other.to_dict()


def expected_duration(task: Task, cm: CostModel, tools: Optional[Dict[str, ToolType]] = None,
                      default_tokens=(0, 0)) -> float:
    """Expected task time in ms with no queueing and no cache loss.

    Each node costs prefill of its fresh prompt plus decode of its output,
    weighted by how often it is expected to run. The median latency of the
    node's tool counts only when another step follows.
    """
    g = task.aeg
    if not g.nodes:
        return 0.0
    tools = tools or default_tools()
    total = 0.0
    for v, n in g.expected_visits(g.root()).items():
        if n <= 0:
            continue
        prompt, output = g.tokens_of.get(v, default_tokens)
        cost = cm.prefill_ms(prompt) + cm.decode_ms(output)
        tool = g.tool_of.get(v)
        if tool is not None and tool in tools:
            cost += g.continue_prob(v) * tools[tool].latency.median()
        total += n * cost
    return total


def expected_context(task: Task, default_tokens=(0, 0)) -> float:
    """Context tokens the task is expected to hold by its last step."""
    g = task.aeg
    if not g.nodes:
        return 0.0
    return sum(n * sum(g.tokens_of.get(v, default_tokens)) for v, n in g.expected_visits(g.root()).items() if n > 0)


# ---------------------------------------------------------------- cache / workers

@dataclass
class CacheEntry:
    session_id: int
    worker_id: int
    tokens: int
    bytes_per_token: int
    last_access: float
    ttl_expiry: Optional[float] = None
    reuse_prob: float = 0.0
    pinned: bool = False  # in use by a running step or an in-flight transfer

    @property
    def bytes(self) -> int:
        return self.tokens * self.bytes_per_token

    def set_ttl(self, now: float, ttl: float):
        if ttl < 0:
            raise ValueError("ttl must be >= 0")
        self.ttl_expiry = now + ttl

    def to_dict(self):
        return {"session_id": self.session_id, "worker_id": self.worker_id,
                "tokens": self.tokens, "bytes_per_token": self.bytes_per_token,
                "last_access": self.last_access, "ttl_expiry": self.ttl_expiry,
                "reuse_prob": self.reuse_prob, "pinned": self.pinned}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class WorkerState:
    worker_id: int
    kv_capacity_bytes: int
    resident: Dict[int, CacheEntry] = field(default_factory=dict)
    queue: list = field(default_factory=list)
    load: float = 0.0
    busy_ms: float = 0.0

    def used_bytes(self) -> int:
        return sum(e.bytes for e in self.resident.values())

    def free_bytes(self) -> int:
        return self.kv_capacity_bytes - self.used_bytes()

    def cached(self, session_id: int) -> bool:
        return session_id in self.resident


# ---------------------------------------------------------------- events

class EventKind(enum.IntEnum):
    # ordinal doubles as the same-time tiebreak: completions before starts
    MigrateDone = 0
    PrefetchDone = 1
    StepDone = 2
    ToolDone = 3
    TaskFinish = 4
    Evict = 5
    TaskArrive = 6
    EpochTick = 7
    Preempt = 8
    Steal = 9
    ToolStart = 10
    PrefetchStart = 11
    StepStartPrefill = 12
    StepStartDecode = 13


@dataclass(frozen=True)
class SimEvent:
    time_us: int
    kind: EventKind
    task_id: int = -1
    seq: int = 0
    payload: tuple = ()  # sorted (key, value) pairs

    def sort_key(self):
        return (self.time_us, int(self.kind), self.task_id, self.seq)

    def get(self, key, default=None):
        for k, v in self.payload:
            if k == key:
                return v
        return default

    def to_dict(self):
        d = {"t_ms": self.time_us / 1000.0, "t_us": self.time_us,
             "kind": self.kind.name, "task": self.task_id, "seq": self.seq}
        d.update(dict(self.payload))
        return d

    @classmethod
    def from_dict(cls, d):
        fixed = {"t_ms", "t_us", "kind", "task", "seq"}
        payload = tuple(sorted((k, v) for k, v in d.items() if k not in fixed))
        return cls(d["t_us"], EventKind[d["kind"]], d["task"], d["seq"], payload)


def make_event(time_us: int, kind: EventKind, task_id: int = -1, seq: int = 0, **payload):
    return SimEvent(int(time_us), kind, task_id, seq, tuple(sorted(payload.items())))
