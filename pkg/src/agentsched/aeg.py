"""Building, inferring and querying agent execution graphs."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .core import AgentExecutionGraph, ConfigError, Edge, Task

END = "<end>"
COLD_START_TASKS = 30


@dataclass
class HintStep:
    tool: Optional[str]
    next_prob: Optional[float] = None  # chain continuation; None on the last step
    branches: Sequence[Tuple[int, float]] = ()  # explicit (dst index, prob) for trees
    retries: Sequence[Tuple[int, float]] = ()  # (ancestor index, prob)
    tokens: Optional[Tuple[int, int]] = None  # (fresh prompt, output) estimate


@dataclass
class AegHint:
    steps: List[HintStep]

    @classmethod
    def react(cls, n_steps: int, continue_prob: float, tool: Optional[str] = None):
        steps = [HintStep(tool, continue_prob) for _ in range(n_steps - 1)]
        steps.append(HintStep(None))
        return cls(steps)


def build_from_hints(hint: AegHint) -> AgentExecutionGraph:
    if not hint.steps:
        raise ConfigError("hint.steps", "empty hint")
    n = len(hint.steps)
    edges: List[Edge] = []
    for i, s in enumerate(hint.steps):
        out = []
        if s.branches:
            out = [(int(d), float(p), False) for d, p in s.branches]
        elif s.next_prob is not None and i + 1 < n:
            out = [(i + 1, float(s.next_prob), False)]
        out += [(int(d), float(p), True) for d, p in s.retries]
        for d, p, _ in out:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"hint.steps[{i}]", f"probability {p} outside [0,1]")
            if not 0 <= d < n:
                raise ConfigError(f"hint.steps[{i}]", f"target {d} out of range")
        if sum(p for _, p, _ in out) > 1.0 + 1e-9:
            raise ConfigError(f"hint.steps[{i}]", "outgoing probabilities sum above 1")
        edges += [Edge(i, d, p, r) for d, p, r in out]
    g = AgentExecutionGraph(
        nodes=list(range(n)),
        edges=edges,
        tool_of={i: s.tool for i, s in enumerate(hint.steps)},
        terminal=set(range(n)) - {e.src for e in edges},
        tokens_of={i: tuple(s.tokens) for i, s in enumerate(hint.steps) if s.tokens},
    )
    return g.validate()


def fig2_example() -> AgentExecutionGraph:
    """The five-step coding-agent graph with two retry loops."""
    return build_from_hints(AegHint([
        HintStep("read_file", 0.95),
        HintStep("edit_code", 0.85),
        HintStep("run_test", 0.70, retries=[(1, 0.30)]),
        HintStep("edit_code", 0.60, retries=[(2, 0.40)]),
        HintStep(None),
    ]))


# ---------------------------------------------------------------- inference

class NotReady:
    """Too few completed tasks to trust inferred structure."""

    def __repr__(self):
        return "NotReady"


NOT_READY = NotReady()


@dataclass
class PatternModel:
    theta_conf: float = 0.7
    tasks_observed: int = 0
    min_tasks: int = COLD_START_TASKS
    counts: Dict[str, Counter] = field(default_factory=lambda: defaultdict(Counter))
    starts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if not 0.0 < self.theta_conf <= 1.0:
            raise ConfigError("pattern.theta_conf", "must be in (0, 1]")

    def observe(self, tools: Sequence[str]):
        if not tools:
            return
        self.tasks_observed += 1
        self.starts[tools[0]] += 1
        for a, b in zip(tools, list(tools[1:]) + [END]):
            self.counts[a][b] += 1

    def probabilities(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for a, c in self.counts.items():
            tot = sum(c.values())
            out[a] = {b: k / tot for b, k in c.items()}
        return out


def _graph_from_probs(start: str, probs: Dict[str, Dict[str, float]], theta: float):
    kept = {a: {b: p for b, p in succ.items() if b != END and p >= theta}
            for a, succ in probs.items()}
    names = [start] + sorted(n for n in set(kept) | {b for s in kept.values() for b in s}
                             if n != start)
    nid = {n: i for i, n in enumerate(names)}
    # depth-first from the start tool; edges back onto the stack become retries
    retry = set()
    state = {}

    def visit(a):
        state[a] = 1
        for b in sorted(kept.get(a, {})):
            if state.get(b) == 1:
                retry.add((a, b))
            elif b not in state:
                visit(b)
        state[a] = 2

    visit(start)
    for n in names:
        if n not in state:
            visit(n)
    edges = [Edge(nid[a], nid[b], p, (a, b) in retry)
             for a in names for b, p in sorted(kept.get(a, {}).items())]
    g = AgentExecutionGraph(
        nodes=list(range(len(names))), edges=edges,
        tool_of={i: n for i, n in enumerate(names)},
        terminal={nid[n] for n in names if not kept.get(n)},
    )
    return g.validate()


def infer_pattern(model: PatternModel, completed_traces: Sequence[Sequence[str]]):
    """Fold new traces into ``model`` and return the inferred graph.

    Nodes are tool types; an edge survives when its empirical transition
    frequency reaches ``theta_conf``. Returns ``NOT_READY`` during cold start.
    """
    for tr in completed_traces:
        model.observe(tr)
    if model.tasks_observed < model.min_tasks:
        return NOT_READY
    start = sorted(model.starts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    return _graph_from_probs(start, model.probabilities(), model.theta_conf)


def edge_set(g: AgentExecutionGraph):
    """Edges as (tool, tool) name pairs, so graphs with different ids compare."""
    return {(g.tool_of[e.src], g.tool_of[e.dst]) for e in g.edges}


def predict_next(g: AgentExecutionGraph, tool: str) -> str:
    by_tool = {t: v for v, t in g.tool_of.items()}
    v = by_tool.get(tool)
    if v is None:
        return END
    succ = g.successors(v)
    if not succ:
        return END
    best = max(succ, key=lambda e: (e.prob, -e.dst))
    return g.tool_of[best.dst] if best.prob >= g.termination_prob(v) else END


def next_step_accuracy(g: AgentExecutionGraph, traces: Sequence[Sequence[str]]) -> float:
    hit = tot = 0
    for tr in traces:
        for a, b in zip(tr, list(tr[1:]) + [END]):
            hit += predict_next(g, a) == b
            tot += 1
    return hit / tot if tot else 0.0


def reanchor(g: AgentExecutionGraph, current: int, observed_tool: Optional[str]) -> int:
    """Move the graph cursor after a step whose tool did not match the prediction.

    Prefer a successor with the observed tool, then any node with it;
    otherwise keep the cursor. Earlier positions are never revisited.
    """
    for e in sorted(g.successors(current), key=lambda e: (-e.prob, e.dst)):
        if g.tool_of.get(e.dst) == observed_tool:
            return e.dst
    for v in g.nodes:
        if g.tool_of.get(v) == observed_tool:
            return v
    return current


# ---------------------------------------------------------------- reuse

def overlap(context_tokens: int, expected_obs_tokens: float) -> float:
    if context_tokens < 0:
        raise ValueError("context_tokens must be >= 0")
    if expected_obs_tokens <= 0:
        return 1.0
    return context_tokens / (context_tokens + expected_obs_tokens)


class ObsLengthEma:
    """Per-tool moving average of observation length in tokens."""

    def __init__(self, alpha: float = 0.2, default: float = 0.0):
        self.alpha = alpha
        self.default = default
        self.est: Dict[str, float] = {}

    def update(self, tool: str, tokens: float):
        prev = self.est.get(tool)
        self.est[tool] = float(tokens) if prev is None else prev + self.alpha * (tokens - prev)

    def get(self, tool: Optional[str]) -> float:
        return self.est.get(tool, self.default)


def reuse_probability(task: Task, graph: AgentExecutionGraph, obs: ObsLengthEma,
                      branch_prefix: Optional[Dict[Tuple[int, int], int]] = None) -> float:
    v = task.current_node
    if v not in graph.tool_of and v not in graph.nodes:
        raise KeyError(f"node {v} not in graph")
    succ = graph.successors(v)
    if not succ:
        return 0.0
    chain_ov = overlap(task.context_tokens, obs.get(graph.tool_of.get(v)))
    total = 0.0
    for e in succ:
        if branch_prefix and (e.src, e.dst) in branch_prefix and task.context_tokens > 0:
            ov = min(1.0, branch_prefix[(e.src, e.dst)] / task.context_tokens)
        else:
            ov = chain_ov
        total += e.prob * ov
    return min(1.0, max(0.0, total))
