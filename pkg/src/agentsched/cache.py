"""KV-cache retention: eviction policies, tool-aware TTL, prefetch choice, offline optimum."""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .core import AgentExecutionGraph, CacheEntry, CapacityError, ConfigError, LatencyDistribution, Task


class Policy(str, enum.Enum):
    WaLru = "wa-lru"
    Lru = "lru"
    PrefixLru = "prefix-lru"
    EvictAll = "evict-all"

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        key = str(s).lower().replace("_", "-")
        for p in cls:
            if key in (p.value, p.name.lower()):
                return p
        raise ConfigError("policy", f"unknown policy {s!r}")


@dataclass(frozen=True)
class EvictionWeights:
    alpha: float = 0.3  # staleness
    beta: float = 0.5  # predicted non-reuse
    gamma: float = 0.2  # size

    def __post_init__(self):
        for k in ("alpha", "beta", "gamma"):
            if getattr(self, k) < 0:
                raise ConfigError(f"weights.{k}", "must be >= 0")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ConfigError("weights", "at least one weight must be positive")

    def normalized(self) -> "EvictionWeights":
        s = self.alpha + self.beta + self.gamma
        return EvictionWeights(self.alpha / s, self.beta / s, self.gamma / s)


@dataclass(frozen=True)
class TtlConfig:
    percentile: float = 95.0
    ttl_max: float = 300_000.0  # ms
    low: float = 0.7
    high: float = 0.9
    window: int = 256

    def __post_init__(self):
        if not 0 < self.percentile < 100:
            raise ConfigError("ttl.percentile", "must be in (0, 100)")
        if not 0 <= self.low < self.high <= 1:
            raise ConfigError("ttl.low/high", "need 0 <= low < high <= 1")
        if self.ttl_max <= 0:
            raise ConfigError("ttl.ttl_max", "must be > 0")


def _clamp01(x: float) -> float:
    return 0.0 if x < 0 else 1.0 if x > 1 else x


def eviction_score(entry: CacheEntry, now: float, tau_max: float, size_max: float,
                   weights: EvictionWeights = EvictionWeights()) -> float:
    """Higher means a better eviction candidate. ``now``/``tau_max`` share a time unit."""
    if tau_max <= 0 or size_max <= 0:
        raise ValueError("tau_max and size_max must be positive")
    w = weights.normalized()
    r = _clamp01((now - entry.last_access) / tau_max)
    s = _clamp01(entry.bytes / size_max)
    return w.alpha * r + w.beta * (1.0 - _clamp01(entry.reuse_prob)) + w.gamma * s


def protected(entry: CacheEntry, now: float) -> bool:
    return entry.ttl_expiry is not None and now < entry.ttl_expiry


def rank_victims(entries: Iterable[CacheEntry], policy: Policy, now: float,
                 weights: EvictionWeights = EvictionWeights(),
                 tau_max: Optional[float] = None, size_max: Optional[float] = None) -> List[CacheEntry]:
    entries = list(entries)
    if not entries:
        return []
    if policy is Policy.WaLru:
        if tau_max is None:
            tau_max = max(now - e.last_access for e in entries)
        if size_max is None:
            size_max = max(e.bytes for e in entries)
        tau_max = tau_max if tau_max > 0 else 1.0
        size_max = size_max if size_max > 0 else 1.0
        key = lambda e: (-eviction_score(e, now, tau_max, size_max, weights), e.last_access, e.session_id)
    else:
        key = lambda e: (e.last_access, e.session_id)
    return sorted(entries, key=key)


def select_victims(resident: Dict[int, CacheEntry], bytes_needed: int, policy, now: float,
                   weights: EvictionWeights = EvictionWeights(),
                   tau_max: Optional[float] = None, size_max: Optional[float] = None,
                   pressure: float = 1.0, exclude=()) -> Optional[List[int]]:
    """Sessions to evict, best candidate first, freeing at least ``bytes_needed``.

    Entries still inside their TTL are used only when unprotected ones cannot
    free enough and ``pressure`` is at its hard limit; otherwise returns None
    so the caller can wait. Pinned entries are never chosen.
    """
    if hasattr(resident, "resident"):
        resident = resident.resident
    policy = Policy.parse(policy)
    if bytes_needed <= 0:
        return []
    cands = [e for sid, e in resident.items() if not e.pinned and sid not in exclude]
    if sum(e.bytes for e in cands) < bytes_needed:
        raise CapacityError(f"cannot free {bytes_needed} bytes even by evicting everything")
    free_now = [e for e in cands if not protected(e, now)]
    ranked = rank_victims(free_now, policy, now, weights, tau_max, size_max)
    out, freed = [], 0
    for e in ranked:
        if freed >= bytes_needed:
            break
        out.append(e.session_id)
        freed += e.bytes
    if freed >= bytes_needed:
        return out
    if pressure < 1.0:
        return None
    shielded = [e for e in cands if protected(e, now)]
    for e in rank_victims(shielded, policy, now, weights, tau_max, size_max):
        if freed >= bytes_needed:
            break
        out.append(e.session_id)
        freed += e.bytes
    return out


# ---------------------------------------------------------------- TTL

def memory_pressure(used: float, capacity: float, cfg: TtlConfig = TtlConfig()) -> float:
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    return _clamp01((used / capacity - cfg.low) / (cfg.high - cfg.low))


def percentile_nearest_rank(samples: Sequence[float], p: float) -> float:
    if not len(samples):
        raise ValueError("empty sample")
    s = sorted(samples)
    k = max(1, math.ceil(p / 100.0 * len(s)))
    return float(s[k - 1])


def compute_ttl(history: Sequence[float], cfg: TtlConfig = TtlConfig(), m: float = 0.0,
                fallback: Optional[LatencyDistribution] = None) -> float:
    """Retention window (ms) for a session entering a tool call."""
    if len(history):
        base = percentile_nearest_rank(list(history)[-cfg.window:], cfg.percentile)
    elif fallback is not None:
        base = fallback.quantile(cfg.percentile / 100.0)
    else:
        raise ValueError("no history and no fallback distribution")
    return min(base * (1.0 - 0.5 * _clamp01(m)), cfg.ttl_max)


class LatencyHistory:
    """Sliding window of observed latencies per tool type."""

    def __init__(self, window: int = 256):
        self.window = window
        self.h: Dict[str, deque] = {}

    def add(self, tool: str, ms: float):
        self.h.setdefault(tool, deque(maxlen=self.window)).append(float(ms))

    def get(self, tool: str):
        return self.h.get(tool, ())


# ---------------------------------------------------------------- prefetch

def prefetch_target(task: Task, graph: AgentExecutionGraph) -> Optional[int]:
    succ = graph.successors(task.current_node)
    if not succ:
        return None
    return min(succ, key=lambda e: (-e.prob, e.dst)).dst


# ---------------------------------------------------------------- offline traces

@dataclass(frozen=True)
class CacheAccess:
    time: float  # ms
    session: int
    tokens_required: int  # entry size once this access is served
    cached_if_retained: int  # tokens saved if the entry survived since the last access
    reuse_prob: float = 0.0  # predicted chance of another access (set after this one)
    ttl: Optional[float] = None  # retention window granted after this access, ms
    shared_tokens: int = 0  # globally shared prefix, never regenerated under prefix-lru
    busy_ms: float = 0.0  # the step keeps using the entry this long after the access


@dataclass
class CacheAccessTrace:
    accesses: List[CacheAccess]
    bytes_per_token: int = 1

    def __post_init__(self):
        for a, b in zip(self.accesses, self.accesses[1:]):
            if b.time < a.time:
                raise ValueError("access times must be nondecreasing")

    def validate(self, capacity_bytes: int):
        cap = capacity_bytes // self.bytes_per_token
        for i, a in enumerate(self.accesses):
            if a.tokens_required > cap:
                raise CapacityError(f"access {i} needs {a.tokens_required} tokens > capacity {cap}")

    def next_use(self) -> List[Optional[int]]:
        nxt: List[Optional[int]] = [None] * len(self.accesses)
        last: Dict[int, int] = {}
        for i in range(len(self.accesses) - 1, -1, -1):
            s = self.accesses[i].session
            nxt[i] = last.get(s)
            last[s] = i
        return nxt

    def peak_working_set(self) -> int:
        """Largest total size of sessions between their first and last access, in tokens."""
        last = {}
        for i, a in enumerate(self.accesses):
            last[a.session] = i
        cur: Dict[int, int] = {}
        peak = 0
        total = 0
        for i, a in enumerate(self.accesses):
            total += a.tokens_required - cur.get(a.session, 0)
            cur[a.session] = a.tokens_required
            peak = max(peak, total)
            if last[a.session] == i:
                total -= cur.pop(a.session)
        return peak

    def base_cost(self) -> int:
        return sum(a.tokens_required for a in self.accesses)


def write_trace(path, trace: CacheAccessTrace):
    """One JSON header line, then one line per access."""
    with open(path, "w") as f:
        f.write(json.dumps({"type": "trace", "bytes_per_token": trace.bytes_per_token}) + "\n")
        for a in trace.accesses:
            f.write(json.dumps(asdict(a), sort_keys=True) + "\n")


def read_trace(path) -> CacheAccessTrace:
    with open(path) as f:
        lines = [json.loads(l) for l in f if l.strip()]
    if not lines or lines[0].get("type") != "trace":
        raise ConfigError("trace", "missing header line")
    try:
        acc = [CacheAccess(**d) for d in lines[1:]]
    except TypeError as e:
        raise ConfigError("trace.accesses", str(e)) from None
    return CacheAccessTrace(acc, int(lines[0].get("bytes_per_token", 1)))


def _access_cost(a: CacheAccess, hit: bool, use_prefix: bool = False) -> int:
    saved = a.shared_tokens if use_prefix else 0
    if hit:
        saved = max(saved, a.cached_if_retained)
    return a.tokens_required - saved


def replay_policy(trace: CacheAccessTrace, capacity_bytes: int, policy,
                  weights: EvictionWeights = EvictionWeights()) -> int:
    """Regeneration cost in tokens of an online policy on a recorded trace."""
    policy = Policy.parse(policy)
    trace.validate(capacity_bytes)
    bpt = trace.bytes_per_token
    cap = capacity_bytes
    use_prefix = policy is Policy.PrefixLru
    res: Dict[int, CacheEntry] = {}
    used = 0
    cost = 0
    for a in trace.accesses:
        e = res.get(a.session)
        hit = e is not None
        cost += _access_cost(a, hit, use_prefix)
        size = a.tokens_required
        if hit:
            used -= e.bytes
            del res[a.session]
        need = size * bpt - (cap - used)
        if need > 0:
            for sid in select_victims(res, need, policy, a.time, weights):
                used -= res.pop(sid).bytes
        if policy is Policy.EvictAll:
            continue
        touched = a.time + a.busy_ms
        ne = CacheEntry(a.session, 0, size, bpt, touched, reuse_prob=a.reuse_prob)
        if policy is Policy.WaLru and a.ttl is not None:
            ne.set_ttl(touched, a.ttl)
        res[a.session] = ne
        used += ne.bytes
    return cost


def farthest_next_use(trace: CacheAccessTrace, capacity_bytes: int) -> int:
    """Classic greedy: on overflow evict whatever is needed farthest in the future.

    Optimal when every entry has the same size and every miss the same cost;
    not in general.
    """
    trace.validate(capacity_bytes)
    bpt = trace.bytes_per_token
    nxt = trace.next_use()
    res: Dict[int, tuple] = {}  # session -> (size_bytes, next index)
    used = 0
    cost = 0
    for i, a in enumerate(trace.accesses):
        hit = a.session in res
        cost += _access_cost(a, hit)
        if hit:
            used -= res.pop(a.session)[0]
        size = a.tokens_required * bpt
        order = sorted(res.items(), key=lambda kv: (-(kv[1][1] if kv[1][1] is not None else math.inf), kv[0]))
        for sid, (sz, _) in order:
            if used + size <= capacity_bytes:
                break
            del res[sid]
            used -= sz
        if nxt[i] is not None:
            res[a.session] = (size, nxt[i])
            used += size
    return cost


@dataclass
class OptResult:
    cost: int
    optimal: bool
    lower_bound: float
    retained: List[int] = field(default_factory=list)  # access indices whose entry is kept


def solve_opt(trace: CacheAccessTrace, capacity_bytes: int,
              time_limit: Optional[float] = None) -> OptResult:
    """Minimum regeneration cost with full knowledge of future accesses.

    One binary decision per gap between consecutive accesses of a session:
    keep the entry through the gap (next access is a hit) or drop it right
    after the access. Keeping gaps must never overfill memory at any access.
    """
    trace.validate(capacity_bytes)
    acc = trace.accesses
    bpt = trace.bytes_per_token
    nxt = trace.next_use()
    gaps = [i for i in range(len(acc)) if nxt[i] is not None]
    gid = {i: g for g, i in enumerate(gaps)}
    gain = np.array([acc[nxt[i]].cached_if_retained for i in gaps], dtype=float)
    size = np.array([acc[i].tokens_required * bpt for i in gaps], dtype=float)
    base = trace.base_cost()

    rows = []  # (gap ids, rhs)
    live: Dict[int, int] = {}
    for k, a in enumerate(acc):
        live.pop(a.session, None)
        items = list(live.values())
        room = capacity_bytes - a.tokens_required * bpt
        if size[items].sum() > room:
            rows.append((items, room))
        if nxt[k] is not None:
            live[a.session] = gid[k]

    bind = sorted({g for items, _ in rows for g in items})
    x = np.ones(len(gaps))
    optimal, bound = True, None
    if rows:
        from scipy.optimize import Bounds, LinearConstraint, milp
        from scipy.sparse import csr_matrix
        col = {g: j for j, g in enumerate(bind)}
        r, c, v = [], [], []
        for ri, (items, _) in enumerate(rows):
            for g in items:
                r.append(ri)
                c.append(col[g])
                v.append(size[g])
        A = csr_matrix((v, (r, c)), shape=(len(rows), len(bind)))
        ub = np.array([b for _, b in rows], dtype=float)
        opts = {"mip_rel_gap": 0.0}
        if time_limit is not None:
            opts["time_limit"] = float(time_limit)
        res = milp(-gain[bind], constraints=LinearConstraint(A, -np.inf, ub),
                   integrality=np.ones(len(bind)), bounds=Bounds(0, 1), options=opts)
        if res.x is None:
            raise RuntimeError(f"offline optimum not found: {res.message}")
        sol = np.round(res.x)
        # drop any rounding-induced overfill greedily (never triggers in practice)
        for ri, (items, rhs) in enumerate(rows):
            while sum(size[g] * sol[col[g]] for g in items) > rhs:
                worst = min((g for g in items if sol[col[g]]), key=lambda g: gain[g] / size[g])
                sol[col[worst]] = 0
                optimal = False
        x[bind] = sol
        optimal = optimal and res.status == 0
        dual = res.mip_dual_bound if getattr(res, "mip_dual_bound", None) is not None else res.fun
        free_gain = float(gain.sum() - gain[bind].sum())  # gaps that never compete for memory
        bound = base - free_gain + dual
    cost = int(round(base - float(gain @ x)))
    return OptResult(cost, optimal, float(cost if bound is None else bound),
                     [gaps[g] for g in range(len(gaps)) if x[g]])


def belady_replay(trace: CacheAccessTrace, capacity_bytes: int,
                  time_limit: Optional[float] = None) -> int:
    """Offline-optimal regeneration cost in tokens.

    Raises RuntimeError when a time limit stops the search before
    optimality is proven.
    """
    r = solve_opt(trace, capacity_bytes, time_limit)
    if not r.optimal:
        raise RuntimeError(f"optimum not proven within time limit (best {r.cost}, bound {r.lower_bound:.0f})")
    return r.cost


def competitive_ratio(policy_cost: float, opt_cost: float) -> float:
    """Policy cost over optimal cost. Zero over zero is 1; positive over zero is inf."""
    if opt_cost < 0 or policy_cost < 0:
        raise ValueError("costs must be nonnegative")
    if opt_cost == 0:
        return 1.0 if policy_cost == 0 else math.inf
    return policy_cost / opt_cost
