"""Agent Fair Share: completion-time urgency, proportional epoch shares, preemption, SLO stats."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import AgentExecutionGraph, CostModel, Task


def _node_cost(g: AgentExecutionGraph, v: int, cm: CostModel) -> float:
    prompt, output = g.tokens_of.get(v, (0, 0))
    return cm.prefill_ms(prompt) + cm.decode_ms(output)


def remaining_cost_table(g: AgentExecutionGraph, cm: CostModel) -> Dict[int, float]:
    """Expected compute still ahead when standing at each node (node included)."""
    key = (cm.prefill_rate, cm.decode_rate)
    cache = getattr(g, "_remain", None)
    if cache is not None and cache[0] == key:
        return cache[1]
    if not any(e.retry for e in g.edges):
        order = g._forward_topo() or list(g.nodes)
        R: Dict[int, float] = {}
        for v in reversed(order):
            R[v] = _node_cost(g, v, cm) + sum(e.prob * R.get(e.dst, 0.0) for e in g.successors(v))
    else:
        idx = {v: i for i, v in enumerate(g.nodes)}
        n = len(g.nodes)
        P = np.zeros((n, n))
        for e in g.edges:
            P[idx[e.src], idx[e.dst]] += e.prob
        c = np.array([_node_cost(g, v, cm) for v in g.nodes])
        r = np.linalg.solve(np.eye(n) - P, c)
        R = {v: float(r[idx[v]]) for v in g.nodes}
    g._remain = (key, R)
    return R


def work_remain(task: Task, graph: Optional[AgentExecutionGraph], cm: CostModel) -> float:
    """Probability-weighted GPU-ms of the steps not yet executed (current node included)."""
    if task.finished:
        return 0.0
    g = graph if graph is not None else task.aeg
    if task.current_node not in g._out:
        return 0.0
    return remaining_cost_table(g, cm)[task.current_node]


def task_urgency(task: Task, now: float, cm: CostModel, epoch_ms: float = 100.0,
                 graph: Optional[AgentExecutionGraph] = None) -> float:
    return work_remain(task, graph, cm) / max(task.deadline - now, epoch_ms)


def afs_score(tasks: Sequence[Task], now: float, cm: CostModel, epoch_ms: float = 100.0) -> float:
    """Tenant urgency: remaining work over time left, summed over its active tasks.

    Time left is floored at one epoch so overdue tasks stay finite but top-ranked.
    """
    return sum(task_urgency(t, now, cm, epoch_ms) for t in tasks if not t.finished)


def allocate_epoch(urgency: Sequence[float], capacity: int) -> List[int]:
    """Integer shares of ``capacity`` proportional to urgency.

    Every tenant with positive urgency gets at least one unit when capacity
    allows; the rest follows largest remainders (ties to the lower index).
    All-zero urgency splits evenly.
    """
    n = len(urgency)
    if n == 0:
        return []
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    u = [float(x) for x in urgency]
    if any(x < 0 for x in u):
        raise ValueError("urgency must be nonnegative")
    total = sum(u)
    if total == 0:
        u, total = [1.0] * n, float(n)
    quota = [x / total * capacity for x in u]
    alloc = [int(math.floor(q)) for q in quota]
    pos = [x > 0 for x in u]
    if sum(pos) <= capacity:
        alloc = [max(a, 1) if p else a for a, p in zip(alloc, pos)]
    left = capacity - sum(alloc)
    while left < 0:
        # only possible after the starvation floor; take back one unit at a time
        # from whoever holds the most above its quota while keeping at least one
        i = min((i for i in range(n) if alloc[i] > 1), key=lambda i: (-(alloc[i] - quota[i]), i))
        alloc[i] -= 1
        left += 1
    rem = [q - math.floor(q) for q in quota]
    order = [i for i in sorted(range(n), key=lambda i: (-rem[i], i)) if pos[i]]
    j = 0
    while left > 0:
        alloc[order[j % len(order)]] += 1
        left -= 1
        j += 1
    return alloc


@dataclass
class AfsState:
    epoch_ms: float = 100.0
    block_ms: float = 500.0
    urgency: Dict[int, float] = field(default_factory=dict)
    service: Dict[int, float] = field(default_factory=dict)  # cumulative GPU-ms per tenant
    credit: Dict[int, float] = field(default_factory=dict)
    history: List[tuple] = field(default_factory=list)  # (epoch, tenant allocations)

    def add_service(self, tenant: int, ms: float):
        if ms < 0:
            raise ValueError("service is nondecreasing")
        self.service[tenant] = self.service.get(tenant, 0.0) + ms


@dataclass(frozen=True)
class Preempt:
    session_id: int
    src: int
    dst: int
    blocked_session: int


def maybe_preempt(workers, urgency_of, now: float, block_ms: float = 500.0, load_of=None,
                  exclude=()) -> List[Preempt]:
    """Preempt at most one low-urgency session per worker per epoch.

    ``workers`` expose ``worker_id``, ``queue`` (items with ``session_id`` and
    ``enqueued_at``) and optionally ``paused`` plus ``memory_blocked``. The
    most urgent request waiting longer than ``block_ms`` looks for a blocker:
    a less urgent request queued ahead of it, or, when the worker is stalled
    on memory, a less urgent session resting in cache between steps. The
    least urgent blocker moves, cache included, to the least-loaded other
    worker if that worker is less loaded. Running steps are never interrupted.
    """
    load_of = load_of or (lambda w: getattr(w, "raw_load", w.load))
    out = []
    taken = set(exclude)
    for w in workers:
        waiting = [r for r in w.queue if now - r.enqueued_at > block_ms]
        if not waiting:
            continue
        blocked = max(waiting, key=lambda r: (urgency_of(r.session_id), -r.enqueued_at, -r.session_id))
        hi = urgency_of(blocked.session_id)
        cands = [r.session_id for r in w.queue
                 if (r.enqueued_at, r.session_id) < (blocked.enqueued_at, blocked.session_id)]
        if getattr(w, "memory_blocked", False):
            cands += sorted(getattr(w, "paused", ()))
        cands = [s for s in cands if urgency_of(s) < hi and s not in taken]
        if not cands:
            continue
        victim = min(cands, key=lambda s: (urgency_of(s), s))
        others = [x for x in workers if x.worker_id != w.worker_id]
        if not others:
            continue
        dst = min(others, key=lambda x: (load_of(x), x.worker_id))
        if load_of(dst) >= load_of(w):
            continue
        taken.add(victim)
        out.append(Preempt(victim, w.worker_id, dst.worker_id, blocked.session_id))
    return out


CLASSES = ("Heavy", "Medium", "Light")


def slo_attainment(finished: Sequence[Task]) -> Dict[str, Optional[float]]:
    """Fraction finishing by deadline per tenant class and overall; None when a group is empty."""
    groups: Dict[str, List[bool]] = {c: [] for c in CLASSES}
    allv = []
    for t in finished:
        ok = t.finish_time is not None and t.finish_time <= t.deadline
        groups.setdefault(t.tenant_class, []).append(ok)
        allv.append(ok)
    out = {c: (sum(v) / len(v) if v else None) for c, v in groups.items()}
    out["Overall"] = sum(allv) / len(allv) if allv else None
    return out
