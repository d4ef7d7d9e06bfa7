"""Session-affinity routing, randomized work stealing and the migration cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import ConfigError, LatencyDistribution, WorkerState, Z95


def lognormal_from_mean_p95(mean: float, p95: float) -> LatencyDistribution:
    """Log-normal with the given mean and 95th percentile.

    Solves s^2/2 - z*s + ln(p95/mean) = 0 for the smaller root. When the
    pair sits at or past the feasible edge (p95/mean <= e^{z^2/2}) the
    discriminant is clamped to zero.
    """
    c = math.log(p95 / mean)
    disc = Z95 * Z95 - 2 * c
    sigma = Z95 - math.sqrt(max(disc, 0.0))
    return LatencyDistribution("LogNormal", math.log(mean) - sigma * sigma / 2, sigma)


@dataclass(frozen=True)
class StealConfig:
    t_idle: float = 100.0  # ms
    r_max: float = 2.0
    migrate_mean_ms: float = 230.0
    migrate_p95_ms: float = 890.0
    bytes_model: bool = False  # latency from size and bandwidth instead of sampling
    bandwidth_gbps: float = 25.0

    def __post_init__(self):
        if self.t_idle <= 0:
            raise ConfigError("steal.t_idle", "must be > 0")
        if self.r_max <= 1:
            raise ConfigError("steal.r_max", "must be > 1")

    def latency_model(self) -> LatencyDistribution:
        if self.migrate_mean_ms <= 0:
            return LatencyDistribution("LogNormal", -math.inf, 0.0)
        return lognormal_from_mean_p95(self.migrate_mean_ms, self.migrate_p95_ms)

    def sample_latency(self, rng: np.random.Generator, nbytes: int = 0) -> float:
        if self.migrate_mean_ms <= 0:
            return 0.0
        if self.bytes_model:
            return nbytes / (self.bandwidth_gbps * 1e9) * 1000.0
        return self.latency_model().sample(rng)


@dataclass
class ClusterState:
    workers: List[WorkerState]
    session_affinity: Dict[int, int] = field(default_factory=dict)
    epoch_counter: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    idle_since: Dict[int, Optional[float]] = field(default_factory=dict)

    def worker(self, wid: int) -> WorkerState:
        return self.workers[wid]

    def drop_session(self, sid: int):
        self.session_affinity.pop(sid, None)


def _load(w) -> float:
    return getattr(w, "raw_load", w.load)


def least_loaded(cluster: ClusterState, exclude=()) -> Optional[int]:
    cands = [w for w in cluster.workers if w.worker_id not in exclude]
    if not cands:
        return None
    return min(cands, key=lambda w: (_load(w), w.worker_id)).worker_id


def route(session_id: int, cluster: ClusterState, theta: float = 0.8, use_affinity: bool = True) -> int:
    """Worker for a session's next step; records the choice as the new affinity."""
    if not cluster.workers:
        raise ConfigError("cluster.workers", "no workers")
    home = cluster.session_affinity.get(session_id) if use_affinity else None
    if home is not None:
        w = cluster.workers[home]
        if min(w.load, 1.0) < theta and w.cached(session_id):
            return home
    wid = least_loaded(cluster)
    cluster.session_affinity[session_id] = wid
    return wid


@dataclass(frozen=True)
class StealAction:
    thief: int
    victim: int
    session_id: int


def _queue_sessions(w) -> List[int]:
    return [getattr(r, "session_id", r) for r in w.queue]


def idle_workers(cluster: ClusterState, now: float, t_idle: float) -> List[int]:
    out = []
    for w in cluster.workers:
        since = cluster.idle_since.get(w.worker_id)
        if since is not None and now - since >= t_idle and not w.queue:
            out.append(w.worker_id)
    return out


def maybe_steal(cluster: ClusterState, cfg: StealConfig, now: float) -> Optional[StealAction]:
    """Propose one steal, or None unless both triggers hold.

    Triggers: some worker has been idle for ``t_idle`` and the max/min load
    ratio exceeds ``r_max``. The victim is drawn uniformly from workers whose
    load exceeds ``r_max`` times the minimum and that have queued work; the
    session taken is the one at the head of the victim's queue.
    """
    thieves = idle_workers(cluster, now, cfg.t_idle)
    if not thieves:
        return None
    loads = [_load(w) for w in cluster.workers]
    lo, hi = min(loads), max(loads)
    ratio = math.inf if lo == 0 and hi > 0 else (hi / lo if lo > 0 else 1.0)
    if ratio <= cfg.r_max:
        return None
    thief = thieves[0]
    victims = [w.worker_id for w in cluster.workers
               if w.worker_id != thief and _load(w) > cfg.r_max * lo and w.queue]
    if not victims:
        return None
    victim = victims[int(cluster.rng.integers(len(victims)))]
    return StealAction(thief, victim, _queue_sessions(cluster.workers[victim])[0])


def accept_steal(action: StealAction, cluster: ClusterState, now: float, t_idle: float = 0.0) -> bool:
    """Acceptance check at the victim: the request must still be queued there
    and the thief must still have nothing waiting."""
    v = cluster.workers[action.victim]
    t = cluster.workers[action.thief]
    if action.session_id not in _queue_sessions(v):
        return False
    return not t.queue


def execute_migration(action: StealAction, cluster: ClusterState, now: float, latency_ms: float):
    """Start moving a stolen session. Returns the completion time, or None when
    the steal is stale and rejected. The source keeps serving meanwhile."""
    if not accept_steal(action, cluster, now):
        return None
    cluster.session_affinity[action.session_id] = action.thief
    return now + latency_ms


def complete_migration(action: StealAction, cluster: ClusterState, now: float) -> bool:
    """Move the entry to the thief. False means it vanished in flight (the
    thief must then prefill the whole context)."""
    src = cluster.workers[action.victim]
    dst = cluster.workers[action.thief]
    e = src.resident.pop(action.session_id, None)
    if e is None:
        return False
    e.worker_id = dst.worker_id
    e.last_access = max(e.last_access, now)
    dst.resident[action.session_id] = e
    return True


def anti_thrash_violations(events) -> List[int]:
    """Sessions stolen twice with no service at their new worker in between."""
    stolen_pending = set()
    bad = []
    for ev in events:
        if isinstance(ev, dict):
            k, sid = ev["kind"], ev["task"]
        else:
            k, sid = ev.kind.name, ev.task_id
        if k == "Steal":
            if sid in stolen_pending:
                bad.append(sid)
            stolen_pending.add(sid)
        elif k in ("StepStartPrefill", "StepDone"):
            stolen_pending.discard(sid)
    return bad
