"""Deterministic discrete-event cluster simulation.

Time is integer microseconds inside the loop. Policy functions receive
milliseconds. Every random draw comes from streams spawned off the run seed,
and simultaneous events are ordered by (time, kind, task, sequence).
"""

from __future__ import annotations

import heapq
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from types import SimpleNamespace
from typing import Dict, List, Optional, Set

import numpy as np

from ..aeg import NOT_READY, ObsLengthEma, PatternModel, infer_pattern, reuse_probability
from ..cache import (EvictionWeights, LatencyHistory, Policy, TtlConfig, compute_ttl, memory_pressure,
                     prefetch_target, select_victims)
from ..core import (CacheEntry, CapacityError, ConfigError, CostModel, EventKind, StepRecord, Task,
                    WorkerState, make_event, default_tools, expected_context)
from ..fairness import AfsState, allocate_epoch, maybe_preempt, work_remain
from ..scheduler import (ClusterState, StealAction, StealConfig, accept_steal, complete_migration,
                         maybe_steal, route)

log = logging.getLogger("agentsched.sim")

COMPONENTS = ("affinity", "eviction", "ttl", "prefetch", "stealing", "afs")


@dataclass
class SimConfig:
    n_workers: int = 4
    max_batch: int = 16
    kv_capacity_gb: float = 180.0  # per worker
    kv_capacity_tokens: Optional[int] = None  # overrides kv_capacity_gb
    policy: str = "wa-lru"
    fairness: str = "afs"  # afs | fcfs | uniform
    steal: bool = True
    prefetch: bool = True
    affinity: bool = True
    ttl: bool = True
    theta: float = 0.8
    alpha: float = 0.3
    beta: float = 0.5
    gamma: float = 0.2
    ttl_percentile: float = 95.0
    ttl_max_ms: float = 300_000.0
    pressure_low: float = 0.7
    pressure_high: float = 0.9
    t_idle_ms: float = 100.0
    r_max: float = 2.0
    migrate_mean_ms: float = 230.0
    migrate_p95_ms: float = 890.0
    epoch_ms: float = 100.0
    preempt_ms: float = 500.0
    afs_window_epochs: float = 20.0  # memory of the served/allocated ratio that orders tenants
    admission: str = "memory"  # open | memory | serial
    admit_fraction: float = 1.0  # memory admission: committed context / total KV
    admit_reserve: str = "mean"  # context a task holds at admission: "current", "mean" or "peak" of its expected growth
    prefill_mode: str = "parallel"  # parallel | serial
    prefix_fraction: float = 0.25
    horizon_ms: float = 7_200_000.0
    warmup_ms: float = 180_000.0
    aeg_source: str = "hints"  # hints | inferred
    theta_conf: float = 0.7
    prefill_rate: float = 5000.0
    decode_rate: float = 30.0
    bytes_per_token: int = CostModel().bytes_per_token
    home_worker: Optional[int] = None  # hot/cold experiments: first steps all land here
    home_fraction: float = 1.0  # share of new sessions sent to home_worker
    dump_afs: bool = False

    def validate(self):
        if self.n_workers < 1:
            raise ConfigError("sim.n_workers", "must be >= 1")
        if self.max_batch < 1:
            raise ConfigError("sim.max_batch", "must be >= 1")
        Policy.parse(self.policy)
        if self.fairness not in ("afs", "fcfs", "uniform"):
            raise ConfigError("sim.fairness", f"unknown fairness {self.fairness!r}")
        if self.admission not in ("open", "memory", "serial"):
            raise ConfigError("sim.admission", f"unknown admission {self.admission!r}")
        if self.admit_reserve not in ("current", "mean", "peak"):
            raise ConfigError("sim.admit_reserve", f"unknown reserve rule {self.admit_reserve!r}")
        if self.prefill_mode not in ("parallel", "serial"):
            raise ConfigError("sim.prefill_mode", f"unknown mode {self.prefill_mode!r}")
        if self.aeg_source not in ("hints", "inferred"):
            raise ConfigError("sim.aeg_source", f"unknown source {self.aeg_source!r}")
        if not 0 < self.theta:
            raise ConfigError("sim.theta", "must be > 0")
        if self.afs_window_epochs < 1:
            raise ConfigError("sim.afs_window_epochs", "must be >= 1")
        if self.epoch_ms <= 0 or self.horizon_ms <= 0:
            raise ConfigError("sim.epoch_ms", "epoch and horizon must be > 0")
        if self.kv_capacity_tokens is not None and self.kv_capacity_tokens <= 0:
            raise ConfigError("sim.kv_capacity_tokens", "must be > 0")
        if self.home_worker is not None and not 0 <= self.home_worker < self.n_workers:
            raise ConfigError("sim.home_worker", "not a worker id")
        EvictionWeights(self.alpha, self.beta, self.gamma)
        self.ttl_config()
        self.steal_config()
        CostModel(self.prefill_rate, self.decode_rate, 1, self.bytes_per_token)
        return self

    def capacity_bytes(self) -> int:
        if self.kv_capacity_tokens is not None:
            return int(self.kv_capacity_tokens) * self.bytes_per_token
        return int(self.kv_capacity_gb * 1e9) // self.bytes_per_token * self.bytes_per_token

    def weights(self):
        return EvictionWeights(self.alpha, self.beta, self.gamma).normalized()

    def ttl_config(self):
        return TtlConfig(self.ttl_percentile, self.ttl_max_ms, self.pressure_low, self.pressure_high)

    def steal_config(self):
        return StealConfig(self.t_idle_ms, self.r_max, self.migrate_mean_ms, self.migrate_p95_ms)

    def cost_model(self):
        return CostModel(self.prefill_rate, self.decode_rate, 1, self.bytes_per_token)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"sim.{k}", "unknown field")
        return cls(**d).validate()


def ablate(cfg: SimConfig, component: str) -> SimConfig:
    """Configuration with one mechanism switched off."""
    if component == "affinity":
        return replace(cfg, affinity=False)
    if component == "eviction":
        return replace(cfg, policy="lru")
    if component == "ttl":
        return replace(cfg, ttl=False)
    if component == "prefetch":
        return replace(cfg, prefetch=False)
    if component == "stealing":
        return replace(cfg, steal=False)
    if component == "afs":
        return replace(cfg, fairness="fcfs")
    raise ConfigError("ablate", f"unknown component {component!r}; expected one of {COMPONENTS}")


def strategy(cfg: SimConfig, name: str) -> SimConfig:
    """Breadth-first, depth-first, or the default hybrid execution order."""
    if name == "bfs":
        return replace(cfg, admission="open", fairness="fcfs", affinity=False, policy="lru",
                       ttl=False, prefetch=False, steal=False)
    if name == "dfs":
        return replace(cfg, admission="serial", fairness="fcfs", policy="lru", ttl=False,
                       prefetch=False, steal=False)
    if name == "hybrid":
        return cfg
    raise ConfigError("strategy", f"unknown strategy {name!r}")


# ---------------------------------------------------------------- state

@dataclass
class Request:
    session_id: int
    tenant_id: int
    enqueued_at: float  # ms
    seq: int


class SimWorker(WorkerState):
    def __init__(self, wid, cap):
        super().__init__(wid, cap)
        self.running: Dict[int, tuple] = {}
        self.paused: Set[int] = set()
        self.raw_load = 0.0
        self.prefill_free_us = 0
        self.used = 0  # bytes, kept incrementally
        self.active_tasks: Set[int] = set()
        self.memory_blocked = False

    def used_bytes(self):
        return self.used


@dataclass
class MetricsReport:
    n_tasks: int = 0
    n_finished: int = 0
    n_unfinished: int = 0
    tct_ms: Dict[int, float] = field(default_factory=dict)
    tct_mean_ms: Optional[float] = None
    tct_std_ms: Optional[float] = None
    throughput_per_min: float = 0.0
    memory_useful_frac: float = 0.0
    memory_used_frac: float = 0.0
    slo: Dict[str, Optional[float]] = field(default_factory=dict)
    evict_rate: Optional[float] = None
    pauses: int = 0
    pauses_evicted: int = 0
    regen_tokens: int = 0
    prefill_tokens: int = 0
    steals: int = 0
    steals_per_task: float = 0.0
    preemptions: int = 0
    prefetches: int = 0
    ttl_calls: int = 0
    ttl_waits: int = 0
    ttl_covered: int = 0
    ttl_coverage: Optional[float] = None
    busy_ms: List[float] = field(default_factory=list)
    utilization: List[float] = field(default_factory=list)
    makespan_ms: float = 0.0
    warmup_ms: float = 0.0
    notes: List[str] = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["tct_ms"] = {str(k): v for k, v in sorted(self.tct_ms.items())}
        return d


# ---------------------------------------------------------------- engine

class Simulation:
    SKIP_AHEAD = 8
    def __init__(self, cfg: SimConfig, workload, seed: int = 0, tools=None, tenants=None):
        self.cfg = cfg.validate()
        self.cm = cfg.cost_model()
        self.policy = Policy.parse(cfg.policy)
        self.weights = cfg.weights()
        self.ttl_cfg = cfg.ttl_config()
        self.steal_cfg = cfg.steal_config()
        self.tools = tools or default_tools()
        ss = np.random.SeedSequence(seed)
        steal_ss, mig_ss, pick_ss = ss.spawn(3)
        self.mig_rng = np.random.default_rng(mig_ss)
        self.pick_rng = np.random.default_rng(pick_ss)
        cap = cfg.capacity_bytes()
        self.workers = [SimWorker(i, cap) for i in range(cfg.n_workers)]
        self.cluster = ClusterState(self.workers, rng=np.random.default_rng(steal_ss))
        self.tasks: Dict[int, Task] = {}
        self.arrivals = []
        for t_ms, task in workload:
            self.tasks[task.task_id] = task
            self.arrivals.append((t_ms, task.task_id))
        self.tenant_ids = sorted({t.tenant_id for t in self.tasks.values()} |
                                 {t.tenant_id for t in (tenants or [])})
        self.heap = []
        self.seq = 0
        self.now = 0
        self.events = []
        self.backlog: List[int] = []
        self.active: Set[int] = set()
        self.where: Dict[int, int] = {}  # session -> worker holding its entry
        self.tool_started: Dict[int, int] = {}  # pause start, cleared when the next step starts
        self.in_tool: Set[int] = set()
        self.pause_evicted: Set[int] = set()
        self.steal_pending: Set[int] = set()
        self.preempt_pending: Set[int] = set()
        self.migrating: Dict[int, tuple] = {}  # session -> (action, request or None)
        self.prefetching: Set[int] = set()
        self.prefetch_gen: Dict[int, int] = {}
        self.prefetch_cands: Dict[int, Dict[int, int]] = {w.worker_id: {} for w in self.workers}
        self.step_info: Dict[int, tuple] = {}
        self.committed = 0  # context tokens held by active tasks (memory admission)
        self._held: Dict[int, int] = {}
        self._reserve: Dict[int, int] = {}
        self.hist = LatencyHistory(self.ttl_cfg.window)
        self.obs = ObsLengthEma()
        self.pattern = PatternModel(cfg.theta_conf)
        self.inferred = NOT_READY
        self.afs = AfsState(cfg.epoch_ms, cfg.preempt_ms)
        # decayed GPU-ms allocated to and consumed by each tenant
        self.afs_alloc: Dict[int, float] = {}
        self.afs_served: Dict[int, float] = {}
        self.afs_frac: Dict[int, float] = {}  # latest allocation as a fraction of capacity
        self.tenant_committed: Dict[int, int] = {}
        self.tenant_urgency: Dict[int, float] = {}
        self.m = MetricsReport()
        self.mem_segments: Dict[int, tuple] = {}  # session -> (start_us, bytes)
        self.useful_byte_us = 0.0
        self.used_byte_us = 0.0
        self._last_mem_us = 0
        self._home_acc = 0.0
        self.afs_dump = []
        self.wake_at: Dict[int, int] = {}
        self._wr: Dict[int, float] = {}
        self._urg_ids = None
        self._tenant_index = {x: k for k, x in enumerate(self.tenant_ids)}
        self.track_service = False
        self.service_trace = []
        self.verbose = os.environ.get("SAGA_SIM_LOG", "").lower() in ("1", "debug", "info", "true")

    # ------------------------------------------------------------ plumbing

    def _push(self, t_us, kind, task_id, data=None):
        self.seq += 1
        heapq.heappush(self.heap, (int(t_us), int(kind), task_id, self.seq, data))

    def _log(self, kind, task_id=-1, **payload):
        self.seq += 1
        ev = make_event(self.now, kind, task_id, self.seq, **payload)
        self.events.append(ev)
        if self.verbose:
            log.info("%s", ev.to_dict())
        return ev

    def now_ms(self):
        return self.now / 1000.0

    @staticmethod
    def us(ms):
        return max(1, int(round(ms * 1000.0)))

    def _account_memory(self):
        dt = self.now - self._last_mem_us
        if dt > 0:
            self.used_byte_us += dt * sum(w.used for w in self.workers)
        self._last_mem_us = self.now

    # entries ---------------------------------------------------------

    def _entry_put(self, w: SimWorker, sid: int, tokens: int, pinned: bool):
        self._account_memory()
        e = w.resident.get(sid)
        if e is None:
            e = CacheEntry(sid, w.worker_id, tokens, self.cfg.bytes_per_token, self.now_ms())
            w.resident[sid] = e
            w.used += e.bytes
            self.mem_segments[sid] = (self.now, e.bytes)
        else:
            w.used += (tokens - e.tokens) * self.cfg.bytes_per_token
            e.tokens = tokens
        e.pinned = pinned
        self.where[sid] = w.worker_id
        return e

    def _segment_close(self, sid, useful: bool):
        seg = self.mem_segments.pop(sid, None)
        if seg is not None and useful:
            self.useful_byte_us += (self.now - seg[0]) * seg[1]

    def _entry_drop(self, w: SimWorker, sid: int, reason: Optional[str]):
        e = w.resident.pop(sid, None)
        if e is None:
            return
        self._account_memory()
        w.used -= e.bytes
        self._segment_close(sid, useful=False)
        if self.where.get(sid) == w.worker_id:
            del self.where[sid]
        w.paused.discard(sid)
        if reason is not None:
            self._log(EventKind.Evict, sid, worker=w.worker_id, tokens=e.tokens, reason=reason, used=w.used)
            if sid in self.tool_started:
                self.pause_evicted.add(sid)
                if reason == "pressure" and self.cfg.prefetch:
                    self._prefetch_register(w, sid)

    # ------------------------------------------------------------ run

    def run(self):
        self.arrivals_left = 0
        for t_ms, tid in self.arrivals:
            if t_ms <= self.cfg.horizon_ms:
                self._push(self.us(t_ms) if t_ms > 0 else 0, EventKind.TaskArrive, tid)
                self.arrivals_left += 1
        if self.arrivals:
            self._push(0, EventKind.EpochTick, -1)
        horizon_us = int(self.cfg.horizon_ms * 1000)
        handlers = {
            EventKind.TaskArrive: self._on_arrive,
            EventKind.StepStartPrefill: self._on_prefill,
            EventKind.StepStartDecode: self._on_decode,
            EventKind.StepDone: self._on_step_done,
            EventKind.ToolStart: self._on_tool_start,
            EventKind.ToolDone: self._on_tool_done,
            EventKind.TaskFinish: self._on_finish,
            EventKind.EpochTick: self._on_epoch,
            EventKind.MigrateDone: self._on_migrate_done,
            EventKind.PrefetchDone: self._on_prefetch_done,
        }
        WAKE = 99
        while self.heap:
            t, kind, tid, _, data = heapq.heappop(self.heap)
            if t > horizon_us:
                self.now = horizon_us
                self.m.notes.append("stopped at horizon")
                break
            self.now = t
            if kind == WAKE:
                self._dispatch(self.workers[data])
                continue
            handlers[EventKind(kind)](tid, data)
        self._account_memory()
        return self.events, self._finalize()

    # ------------------------------------------------------------ arrivals / admission

    def _on_arrive(self, tid, _):
        t = self.tasks[tid]
        self.arrivals_left -= 1
        self._urg_ids = None
        self._log(EventKind.TaskArrive, tid, tenant=t.tenant_id, steps=len(t.plan))
        self.backlog.append(tid)
        self._admit()

    def _backlog_order(self):
        if self.cfg.fairness == "afs" and len(self.backlog) > 1:
            now = self.now_ms()
            self.backlog.sort(key=lambda tid: (self._budget_key(self.tasks[tid].tenant_id),
                                               -self._urgency(tid, now), self.tasks[tid].submit_time, tid))

    def _budget_key(self, tenant):
        """Tenants served least relative to their recent allocation sort first."""
        alloc = self.afs_alloc.get(tenant, 0.0)
        ratio = self.afs_served.get(tenant, 0.0) / alloc if alloc > 0 else math.inf
        return (ratio, -self.tenant_urgency.get(tenant, 0.0), tenant)

    def _admit(self):
        if not self.backlog:
            return
        self._backlog_order()
        total_tokens = self.cfg.n_workers * self.cfg.capacity_bytes() // self.cfg.bytes_per_token
        limit = self.cfg.admit_fraction * total_tokens
        per_tenant = self.cfg.admission == "memory" and self.cfg.fairness == "afs" and self.afs_frac
        k = 0
        while k < len(self.backlog):
            tid = self.backlog[k]
            t = self.tasks[tid]
            first = self._hold_size(t, t.plan[0].prompt_tokens + t.plan[0].output_tokens)
            home = None
            if self.cfg.admission == "memory":
                if self.active and self.committed + first > limit:
                    # the cluster gate is shut; a tenant still inside its share of it may go ahead
                    ten = t.tenant_id
                    if not per_tenant or self.tenant_committed.get(ten, 0) + first > self.afs_frac.get(ten, 0.0) * limit:
                        if not per_tenant:
                            return
                        k += 1
                        continue
            elif self.cfg.admission == "serial":
                free = [w for w in self.workers if not w.active_tasks]
                if not free:
                    return
                home = free[0].worker_id
            self.backlog.pop(k)
            self.active.add(tid)
            self._hold(t, first)
            self._start_task(tid, home)

    def _hold_size(self, t, context):
        if self.cfg.admit_reserve == "current":
            return context
        r = self._reserve.get(t.task_id)
        if r is None:
            r = int(expected_context(t))
            if self.cfg.admit_reserve == "mean":
                r //= 2  # linear growth averages half the final size over the task's life
            self._reserve[t.task_id] = r
        return max(context, r)

    def _hold(self, t, tokens):
        """Set the task's share of committed memory to ``tokens``."""
        d = tokens - self._held.get(t.task_id, 0)
        self._held[t.task_id] = tokens
        self.committed += d
        self.tenant_committed[t.tenant_id] = self.tenant_committed.get(t.tenant_id, 0) + d

    def _start_task(self, tid, home):
        t = self.tasks[tid]
        t.current_node = t.aeg.root()
        self._wr.pop(tid, None)
        self._work(tid)
        if home is None and self.cfg.home_worker is not None:
            # a fixed share of new sessions lands on the hot worker, the rest is routed
            self._home_acc += self.cfg.home_fraction
            if self._home_acc >= 1.0 - 1e-9:
                self._home_acc -= 1.0
                home = self.cfg.home_worker
        if home is not None:
            self.cluster.session_affinity[tid] = home
            self.workers[home].active_tasks.add(tid)
            self._enqueue(self.workers[home], tid)
        else:
            wid = route(tid, self.cluster, self.cfg.theta, self.cfg.affinity)
            self.workers[wid].active_tasks.add(tid)
            self._enqueue(self.workers[wid], tid)

    # ------------------------------------------------------------ queues / dispatch

    def _enqueue(self, w: SimWorker, sid, enqueued_at=None):
        t = self.tasks[sid]
        self.seq += 1
        w.queue.append(Request(sid, t.tenant_id, self.now_ms() if enqueued_at is None else enqueued_at, self.seq))
        self._refresh_load(w)
        self.cluster.idle_since[w.worker_id] = None
        self._dispatch(w)

    def _refresh_load(self, w: SimWorker):
        w.raw_load = (len(w.running) + len(w.queue)) / self.cfg.max_batch
        w.load = min(1.0, w.raw_load)
        if not w.queue:  # nothing waiting: the worker can take stolen work
            if self.cluster.idle_since.get(w.worker_id) is None:
                self.cluster.idle_since[w.worker_id] = self.now_ms()
        else:
            self.cluster.idle_since[w.worker_id] = None

    def _ready(self, w, r: Request):
        return r.session_id not in self.prefetching and r.session_id not in self.migrating

    def _order(self, w: SimWorker) -> List[Request]:
        """Ready requests in the order the fairness policy would serve them."""
        ready = [r for r in w.queue if self._ready(w, r)]
        mode = self.cfg.fairness
        if mode == "fcfs" or len(ready) <= 1:
            return sorted(ready, key=lambda r: (r.enqueued_at, r.seq))
        if mode == "uniform":
            return [ready[i] for i in self.pick_rng.permutation(len(ready))]
        now = self.now_ms()
        rank = {x: k for k, x in enumerate(sorted({r.tenant_id for r in ready}, key=self._budget_key))}
        return sorted(ready, key=lambda r: (rank[r.tenant_id], -self._urgency(r.session_id, now),
                                            r.enqueued_at, r.seq))

    def _dispatch(self, w: SimWorker):
        while len(w.running) < self.cfg.max_batch and w.queue:
            started = False
            # a request that does not fit yet lets the next few in line try
            for r in self._order(w)[:self.SKIP_AHEAD]:
                if self._start_step(w, r):
                    started = True
                    break
            w.memory_blocked = not started and bool(w.queue)
            if not started:
                break
        self._refresh_load(w)
        if self.cfg.prefetch:
            self._maybe_prefetch(w)

    def _evict_for(self, w: SimWorker, need_bytes: int, exclude) -> Optional[bool]:
        """Free ``need_bytes`` on ``w``. True on success, False to wait."""
        if need_bytes <= 0:
            return True
        now = self.now_ms()
        m = memory_pressure(w.used, w.kv_capacity_bytes, self.ttl_cfg)
        try:
            victims = select_victims(w.resident, need_bytes, self.policy if self.policy is not Policy.EvictAll else Policy.Lru,
                                     now, self.weights, pressure=m, exclude=exclude)
        except CapacityError:
            if w.running or any(e.pinned for e in w.resident.values()):
                return False
            raise CapacityError(f"step needs {need_bytes} bytes beyond what eviction can free", w.worker_id)
        if victims is None:
            self.m.ttl_waits += 1
            exp = [e.ttl_expiry for e in w.resident.values() if e.ttl_expiry is not None and e.ttl_expiry > now]
            if exp:
                t_wake = int(math.ceil(min(exp) * 1000.0)) + 1
                if self.wake_at.get(w.worker_id, -1) != t_wake:
                    self.wake_at[w.worker_id] = t_wake
                    self._push(t_wake, 99, -1, w.worker_id)
            return False
        for sid in victims:
            self._entry_drop(w, sid, "pressure")
        return True

    def _start_step(self, w: SimWorker, r: Request) -> bool:
        sid = r.session_id
        t = self.tasks[sid]
        st = t.plan[t.steps_done]
        prompt_total = t.context_tokens + st.prompt_tokens
        after = prompt_total + st.output_tokens
        e = w.resident.get(sid)
        have = e.tokens if e is not None else 0
        bpt = self.cfg.bytes_per_token
        if after * bpt > w.kv_capacity_bytes:
            raise CapacityError(f"session {sid} needs {after} tokens, more than the whole KV cache", w.worker_id)
        if not self._evict_for(w, (after - have) * bpt - (w.kv_capacity_bytes - w.used), {sid}):
            return False
        w.queue.remove(r)
        cached = have
        if self.policy is Policy.PrefixLru:
            cached = max(cached, int(self.cfg.prefix_fraction * prompt_total))
        cached = min(cached, prompt_total)
        if e is not None:
            self._segment_close(sid, useful=True)
        e = self._entry_put(w, sid, after, pinned=True)
        self.mem_segments[sid] = (self.now, e.bytes)
        regen = prompt_total - cached
        pf_ms = self.cm.prefill_ms(regen)
        dec_ms = self.cm.decode_ms(st.output_tokens)
        start = self.now
        if self.cfg.prefill_mode == "serial":
            start = max(self.now, w.prefill_free_us)
            w.prefill_free_us = start + self.us(pf_ms)
        t_dec = start + self.us(pf_ms)
        t_done = t_dec + self.us(dec_ms)
        w.running[sid] = (start, t_done)
        w.paused.discard(sid)
        self.step_info[sid] = (w.worker_id, regen, prompt_total, after, (t_done - start) / 1000.0, st)
        if t.steps_done > 0:
            self.m.pauses += 1
            if sid in self.pause_evicted:
                self.m.pauses_evicted += 1
        self.pause_evicted.discard(sid)
        self.tool_started.pop(sid, None)
        self.m.regen_tokens += max(0, regen - st.prompt_tokens)
        self.m.prefill_tokens += regen
        self.afs.add_service(t.tenant_id, pf_ms + dec_ms)
        if self.cfg.fairness == "afs":
            self.afs_served[t.tenant_id] = self.afs_served.get(t.tenant_id, 0.0) + pf_ms + dec_ms
        self._push(start, EventKind.StepStartPrefill, sid, (w.worker_id, regen, cached, w.used))
        self._push(t_dec, EventKind.StepStartDecode, sid, w.worker_id)
        self._push(t_done, EventKind.StepDone, sid, w.worker_id)
        return True

    def _on_prefill(self, sid, data):
        wid, regen, cached, used = data
        self.steal_pending.discard(sid)
        self.preempt_pending.discard(sid)
        self._log(EventKind.StepStartPrefill, sid, worker=wid, regen=regen, cached=cached, used=used,
                  step=self.tasks[sid].steps_done)

    def _on_decode(self, sid, wid):
        self._log(EventKind.StepStartDecode, sid, worker=wid)

    def _on_step_done(self, sid, wid):
        w = self.workers[wid]
        t = self.tasks[sid]
        _, regen, prompt_total, after, busy, st = self.step_info.pop(sid)
        del w.running[sid]
        w.busy_ms += busy
        e = w.resident[sid]
        e.pinned = False
        e.last_access = self.now_ms()
        self._hold(t, self._hold_size(t, after))
        t.grow_context(after - t.context_tokens)
        t.records.append(StepRecord(st.prompt_tokens, st.output_tokens, st.tool_ms, regen))
        t.steps_done += 1
        t.current_node = min(t.steps_done, len(t.aeg.nodes) - 1)
        self._wr.pop(sid, None)
        self._work(sid)
        self._log(EventKind.StepDone, sid, worker=wid, context=t.context_tokens)
        if t.steps_done >= len(t.plan):
            self._push(self.now + 1, EventKind.TaskFinish, sid, wid)
        else:
            self._push(self.now + 1, EventKind.ToolStart, sid, wid)
        self._refresh_load(w)
        self._dispatch(w)

    # ------------------------------------------------------------ tools

    def _graph_for(self, t: Task):
        if self.cfg.aeg_source == "hints":
            return t.aeg, t.steps_done - 1
        g = self.inferred
        if g is NOT_READY:
            return None, None
        tool = t.plan[t.steps_done - 1].tool
        for v, name in g.tool_of.items():
            if name == tool:
                return g, v
        return None, None

    def _on_tool_start(self, sid, wid):
        t = self.tasks[sid]
        st = t.plan[t.steps_done - 1]
        self._log(EventKind.ToolStart, sid, tool=st.tool, worker=wid)
        self.tool_started[sid] = self.now
        self.in_tool.add(sid)
        w = self.workers[wid]
        # coverage bookkeeping: would this call finish inside the window the TTL rule gives it?
        m_now = memory_pressure(w.used, w.kv_capacity_bytes, self.ttl_cfg)
        ttl_now = compute_ttl(self.hist.get(st.tool), self.ttl_cfg, m_now, self.tools[st.tool].latency)
        self.m.ttl_calls += 1
        self.m.ttl_covered += st.tool_ms <= ttl_now
        e = w.resident.get(sid)
        if e is not None:
            if self.policy is Policy.EvictAll:
                self._entry_drop(w, sid, "request")
            else:
                w.paused.add(sid)
                self._retain(w, e, t, st)
        elif self.cfg.prefetch and sid not in self.where:
            home = self.cluster.session_affinity.get(sid, wid)
            self._prefetch_register(self.workers[home], sid)
        self._push(self.now + self.us(st.tool_ms), EventKind.ToolDone, sid, (wid, st.tool, st.tool_ms))
        self._dispatch(w)

    def _retain(self, w, e, t, st):
        """Reuse estimate and tool-aware TTL for an entry resting through a tool call."""
        g, node = self._graph_for(t)
        if g is None:
            e.reuse_prob = 0.0
            return
        cursor = SimpleNamespace(current_node=node, context_tokens=t.context_tokens)
        e.reuse_prob = reuse_probability(cursor, g, self.obs)
        if self.cfg.ttl:
            m = memory_pressure(w.used, w.kv_capacity_bytes, self.ttl_cfg)
            ttl = compute_ttl(self.hist.get(st.tool), self.ttl_cfg, m, self.tools[st.tool].latency)
            e.set_ttl(self.tool_started.get(t.task_id, self.now) / 1000.0, ttl)

    def _on_tool_done(self, sid, data):
        wid, tool, ms = data
        t = self.tasks[sid]
        self._log(EventKind.ToolDone, sid, tool=tool, ms=round(ms, 3))
        self.in_tool.discard(sid)
        self.hist.add(tool, ms)
        self.obs.update(tool, t.plan[t.steps_done].prompt_tokens)
        src = self.where.get(sid)
        if src is not None:
            self.workers[src].paused.discard(sid)
            # the next request is here, so reuse is no longer a guess
            self.workers[src].resident[sid].reuse_prob = 1.0
        if sid in self.migrating:
            act, _ = self.migrating[sid]
            self.migrating[sid] = (act, True)
            return
        if self.cfg.admission == "serial":
            target = self.cluster.session_affinity[sid]
        else:
            target = route(sid, self.cluster, self.cfg.theta, self.cfg.affinity)
        if src is not None and src != target:
            sw = self.workers[src]
            if sid in self.prefetching:
                self.prefetching.discard(sid)
            self._entry_drop(sw, sid, "reroute")
            self.pause_evicted.add(sid)
            self._dispatch(sw)
        self._move_task(sid, target)
        self._enqueue(self.workers[target], sid)

    def _move_task(self, sid, target):
        for w in self.workers:
            if sid in w.active_tasks and w.worker_id != target:
                w.active_tasks.discard(sid)
        self.workers[target].active_tasks.add(sid)

    def _on_finish(self, sid, wid):
        t = self.tasks[sid]
        t.finish_time = self.now_ms()
        t.current_node = t.aeg.nodes[-1]
        self._wr[sid] = 0.0
        self._urg_ids = None
        w = self.workers[wid]
        if sid in w.resident:
            self._entry_drop(w, sid, None)
        self._log(EventKind.TaskFinish, sid, worker=wid, tct_ms=round(t.finish_time - t.submit_time, 3), used=w.used)
        for x in self.workers:
            x.active_tasks.discard(sid)
        self.cluster.drop_session(sid)
        self.active.discard(sid)
        self._hold(t, 0)
        del self._held[sid]
        self.tool_started.pop(sid, None)
        if self.cfg.aeg_source == "inferred":
            tools = [s.tool for s in t.plan if s.tool is not None]
            r = infer_pattern(self.pattern, [tools] if tools else [])
            self.inferred = r
        self._admit()
        self._dispatch(w)

    # ------------------------------------------------------------ prefetch

    def _prefetch_register(self, w, sid):
        t = self.tasks[sid]
        g, node = self._graph_for(t)
        if g is None:
            return
        if prefetch_target(SimpleNamespace(current_node=node), g) is None:
            return
        st = t.plan[t.steps_done - 1]
        resume = self.tool_started.get(sid, self.now) + self.us(self.tools[st.tool].latency.median())
        self.prefetch_cands[w.worker_id][sid] = resume

    def _maybe_prefetch(self, w: SimWorker):
        cands = self.prefetch_cands[w.worker_id]
        if not cands:
            return
        for sid in sorted(cands, key=lambda s: (cands[s], s)):
            if self.cfg.prefill_mode == "serial" and w.prefill_free_us > self.now:
                return
            t = self.tasks[sid]
            stale = (sid not in self.in_tool or sid in self.where or t.finished
                     or self.cluster.session_affinity.get(sid) != w.worker_id)
            if stale:
                del cands[sid]
                continue
            size = t.context_tokens * self.cfg.bytes_per_token
            if w.used + size > self.ttl_cfg.high * w.kv_capacity_bytes:
                continue
            del cands[sid]
            self._entry_put(w, sid, t.context_tokens, pinned=True)
            self.prefetching.add(sid)
            pf = self.cm.prefill_ms(t.context_tokens)
            self._log(EventKind.PrefetchStart, sid, worker=w.worker_id, tokens=t.context_tokens, used=w.used)
            self.m.prefetches += 1
            self.m.prefill_tokens += t.context_tokens
            done = self.now + self.us(pf)
            if self.cfg.prefill_mode == "serial":
                w.prefill_free_us = done
            self.prefetch_gen[sid] = self.prefetch_gen.get(sid, 0) + 1
            self._push(done, EventKind.PrefetchDone, sid, (w.worker_id, self.prefetch_gen[sid]))

    def _on_prefetch_done(self, sid, data):
        wid, gen = data
        w = self.workers[wid]
        if sid not in self.prefetching or gen != self.prefetch_gen.get(sid):
            # cancelled by a reroute; the entry it filled is gone already
            self._log(EventKind.PrefetchDone, sid, worker=wid, cancelled=True)
            return
        self.prefetching.discard(sid)
        e = w.resident.get(sid)
        self._log(EventKind.PrefetchDone, sid, worker=wid)
        if e is not None:
            e.pinned = False
            e.last_access = self.now_ms()
            if sid in self.in_tool:
                w.paused.add(sid)
                t = self.tasks[sid]
                self._retain(w, e, t, t.plan[t.steps_done - 1])
        self._dispatch(w)

    # ------------------------------------------------------------ epochs

    def _on_epoch(self, _tid, _data):
        now = self.now_ms()
        self._log(EventKind.EpochTick, -1, epoch=self.cluster.epoch_counter)
        self.cluster.epoch_counter += 1
        if self.track_service:
            self.service_trace.append((now, {i: self.afs.service.get(i, 0.0) for i in self.tenant_ids}))
        for w in self.workers:
            self._refresh_load(w)
        if self.cfg.fairness == "afs":
            self._afs_epoch(now)
        if self.cfg.steal and self.cfg.admission != "serial":
            self._steal_round(now)
        if self.active or self.backlog or self.arrivals_left:
            self._push(self.now + self.us(self.cfg.epoch_ms), EventKind.EpochTick, -1)

    def _work(self, tid) -> float:
        w = self._wr.get(tid)
        if w is None:
            w = self._wr[tid] = work_remain(self.tasks[tid], None, self.cm)
            if self._urg_ids is not None and tid in self._urg_pos:
                self._urg_wr[self._urg_pos[tid]] = w
        return w

    def _urgency(self, tid, now) -> float:
        return self._work(tid) / max(self.tasks[tid].deadline - now, self.cfg.epoch_ms)

    def _afs_epoch(self, now):
        if self._urg_ids is None:
            ids_t = sorted(self.active) + sorted(self.backlog)
            self._urg_wr = np.array([self._work(i) for i in ids_t], float)
            self._urg_pos = {tid: k for k, tid in enumerate(ids_t)}
            self._urg_dl = np.array([self.tasks[i].deadline for i in ids_t], float)
            self._urg_ten = np.array([self._tenant_index[self.tasks[i].tenant_id] for i in ids_t], int)
            self._urg_ids = ids_t
        ids_t = self._urg_ids
        u = self._urg_wr / np.maximum(self._urg_dl - now, self.cfg.epoch_ms)
        sums = np.bincount(self._urg_ten, weights=u, minlength=len(self.tenant_ids)) if ids_t else \
            np.zeros(len(self.tenant_ids))
        by_tenant = {x: float(sums[k]) for k, x in enumerate(self.tenant_ids)}
        urg = dict(zip(ids_t, u.tolist()))
        ids = self.tenant_ids
        cap = int(self.cfg.n_workers * self.cfg.max_batch * self.cfg.epoch_ms)
        alloc = allocate_epoch([by_tenant[i] for i in ids], cap)
        self.tenant_urgency = by_tenant
        keep = 1.0 - 1.0 / self.cfg.afs_window_epochs
        for i, a in zip(ids, alloc):
            self.afs_alloc[i] = keep * self.afs_alloc.get(i, 0.0) + a
            self.afs_served[i] = keep * self.afs_served.get(i, 0.0)
            self.afs.credit[i] = self.afs_alloc[i] - self.afs_served[i]
            self.afs_frac[i] = a / cap
        if self.cfg.dump_afs:
            self.afs_dump.append({"t_ms": now, "urgency": {str(i): by_tenant[i] for i in ids},
                                  "alloc": {str(i): a for i, a in zip(ids, alloc)}})
        acts = maybe_preempt(self.workers, lambda s: urg.get(s, 0.0), now, self.cfg.preempt_ms,
                             exclude=self.preempt_pending)
        for p in acts:
            self._preempt(p)

    def _preempt(self, p):
        src = self.workers[p.src]
        sid = p.session_id
        if sid in self.migrating or sid in self.prefetching or sid in src.running:
            return
        req = next((r for r in src.queue if r.session_id == sid), None)
        e = src.resident.get(sid)
        if req is None and e is None:
            return
        self._log(EventKind.Preempt, sid, src=p.src, dst=p.dst, blocked=p.blocked_session)
        self.m.preemptions += 1
        self.preempt_pending.add(sid)
        if req is not None:
            src.queue.remove(req)
        act = StealAction(p.dst, p.src, sid)
        self.cluster.session_affinity[sid] = p.dst
        self._move_task(sid, p.dst)
        self._start_transfer(act, req is not None, e)
        self._refresh_load(src)

    def _start_transfer(self, act: StealAction, has_request: bool, e):
        lat = self.steal_cfg.sample_latency(self.mig_rng, e.bytes if e is not None else 0) if e is not None else 0.0
        self.migrating[act.session_id] = (act, has_request)
        if e is not None:
            e.pinned = True
        self._push(self.now + self.us(lat), EventKind.MigrateDone, act.session_id, act)

    def _steal_round(self, now):
        reserved = set()
        while True:
            act = maybe_steal(self.cluster, self.steal_cfg, now)
            if act is None or act.thief in reserved:
                return
            if act.session_id in self.steal_pending or not accept_steal(act, self.cluster, now):
                return
            v = self.workers[act.victim]
            req = next(r for r in v.queue if r.session_id == act.session_id)
            v.queue.remove(req)
            e = v.resident.get(act.session_id)
            self._log(EventKind.Steal, act.session_id, thief=act.thief, victim=act.victim,
                      tokens=e.tokens if e is not None else 0)
            self.m.steals += 1
            self.steal_pending.add(act.session_id)
            self.cluster.session_affinity[act.session_id] = act.thief
            self._move_task(act.session_id, act.thief)
            self.cluster.idle_since[act.thief] = None
            reserved.add(act.thief)
            self._start_transfer(act, True, e)
            self._refresh_load(v)
            self.cluster.idle_since[act.thief] = None

    def _on_migrate_done(self, sid, act: StealAction):
        _, has_request = self.migrating.pop(sid)
        src, dst = self.workers[act.victim], self.workers[act.thief]
        e = src.resident.get(sid)
        moved = False
        if e is not None:
            e.pinned = False
            ok = True
            try:
                ok = self._evict_for(dst, e.bytes - (dst.kv_capacity_bytes - dst.used), {sid})
            except CapacityError:
                ok = False
            if ok:
                self._account_memory()
                src.used -= e.bytes
                src.paused.discard(sid)
                moved = complete_migration(act, self.cluster, self.now_ms())
                dst.used += e.bytes
                self.where[sid] = dst.worker_id
                if sid in self.in_tool:
                    dst.paused.add(sid)
            else:
                self._entry_drop(src, sid, "migrate-abort")
        self._log(EventKind.MigrateDone, sid, src=act.victim, dst=act.thief, moved=moved, used=dst.used,
                  worker=act.thief)
        if has_request and not self.tasks[sid].finished:
            self._enqueue(dst, sid)
        self._refresh_load(src)
        self._dispatch(src)
        self._dispatch(dst)

    # ------------------------------------------------------------ metrics

    def _finalize(self) -> MetricsReport:
        m = self.m
        cfg = self.cfg
        end_ms = self.now_ms()
        m.makespan_ms = end_ms
        m.warmup_ms = cfg.warmup_ms
        m.n_tasks = len(self.tasks)
        fin = [t for t in self.tasks.values() if t.finished]
        m.n_finished = len(fin)
        m.n_unfinished = m.n_tasks - m.n_finished
        steady = [t for t in fin if t.submit_time >= cfg.warmup_ms]
        if not steady and fin:
            steady = fin
            m.notes.append("no task submitted after warm-up; statistics use all finished tasks")
        m.tct_ms = {t.task_id: round(t.finish_time - t.submit_time, 3) for t in steady}
        if steady:
            arr = np.array(list(m.tct_ms.values()))
            m.tct_mean_ms = float(arr.mean())
            m.tct_std_ms = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        window = max(end_ms - min(cfg.warmup_ms, end_ms / 2), 1e-9)
        done_in = [t for t in fin if t.finish_time >= min(cfg.warmup_ms, end_ms / 2)]
        m.throughput_per_min = len(done_in) / (window / 60_000.0) if end_ms > 0 else 0.0
        from ..fairness import slo_attainment
        m.slo = slo_attainment(steady)
        m.evict_rate = m.pauses_evicted / m.pauses if m.pauses else None
        m.ttl_coverage = m.ttl_covered / m.ttl_calls if m.ttl_calls else None
        m.steals_per_task = m.steals / m.n_tasks if m.n_tasks else 0.0
        m.busy_ms = [round(w.busy_ms, 3) for w in self.workers]
        m.utilization = [min(1.0, w.busy_ms / (cfg.max_batch * end_ms)) if end_ms > 0 else 0.0
                         for w in self.workers]
        total_cap = sum(w.kv_capacity_bytes for w in self.workers) * max(self.now, 1)
        m.memory_useful_frac = min(1.0, self.useful_byte_us / total_cap)
        m.memory_used_frac = min(1.0, self.used_byte_us / total_cap)
        if m.n_unfinished:
            m.notes.append(f"{m.n_unfinished} task(s) unfinished at horizon, excluded from TCT")
        return m


def run(cfg: SimConfig, workload, seed: int = 0, tools=None, tenants=None):
    sim = Simulation(cfg, workload, seed, tools, tenants)
    events, metrics = sim.run()
    return events, metrics, sim
