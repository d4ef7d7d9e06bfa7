"""Event-log audits and result files."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from typing import Dict, List, Sequence

from ..core import SimEvent
from ..scheduler import anti_thrash_violations

_PAIRS = {"StepStartPrefill": "StepDone", "ToolStart": "ToolDone", "PrefetchStart": "PrefetchDone",
          "Steal": "MigrateDone", "Preempt": "MigrateDone"}


def _kind(ev) -> str:
    return ev.kind.name if isinstance(ev, SimEvent) else ev["kind"]


def _task(ev) -> int:
    return ev.task_id if isinstance(ev, SimEvent) else ev["task"]


def _t(ev) -> int:
    return ev.time_us if isinstance(ev, SimEvent) else ev["t_us"]


def _get(ev, key, default=None):
    return ev.get(key, default) if isinstance(ev, SimEvent) else ev.get(key, default)


def audit_order(events: Sequence) -> List[str]:
    """Log times must never go backwards."""
    out = []
    for a, b in zip(events, events[1:]):
        if _t(b) < _t(a):
            out.append(f"time goes back at seq {_get(b, 'seq', '?')}")
    return out


# allowed successor within a task, and whether it must be strictly later
_NEXT = {
    "StepStartPrefill": ("StepStartDecode", True),
    "StepStartDecode": ("StepDone", True),
    "StepDone": ("ToolStart", True),
    "ToolStart": ("ToolDone", True),
    "ToolDone": ("StepStartPrefill", False),  # the next step may start the instant the result lands
}


def audit_causality(events: Sequence) -> List[str]:
    """Per task, every step walks prefill < decode < done < tool start < tool done in time."""
    last: Dict[int, tuple] = {}
    bad = []
    for ev in events:
        k = _kind(ev)
        if k not in _NEXT:
            continue
        sid, t = _task(ev), _t(ev)
        prev = last.get(sid)
        if prev is None:
            if k != "StepStartPrefill":
                bad.append(f"task {sid}: first step event is {k}")
        else:
            pk, pt = prev
            want, strict = _NEXT[pk]
            if k != want or t < pt or (strict and t == pt):
                bad.append(f"task {sid}: {pk}@{pt} then {k}@{t}")
        last[sid] = (k, t)
    return bad


def audit_capacity(events: Sequence, capacity_bytes: int) -> List[str]:
    return [f"worker {_get(ev, 'worker')} holds {_get(ev, 'used')} > {capacity_bytes} at {_t(ev)} us"
            for ev in events if _get(ev, "used") is not None and _get(ev, "used") > capacity_bytes]


def unmatched_starts(events: Sequence) -> Dict[str, int]:
    """Start events without their end (legitimate only when the run hit its horizon)."""
    open_: Dict[str, int] = defaultdict(int)
    for ev in events:
        k = _kind(ev)
        if k in _PAIRS:
            open_[_PAIRS[k]] += 1
        elif k in _PAIRS.values():
            open_[k] -= 1
    return {k: v for k, v in open_.items() if v}


def audit(events: Sequence, capacity_bytes: int) -> Dict[str, list]:
    return {
        "order": audit_order(events),
        "causality": audit_causality(events),
        "capacity": audit_capacity(events, capacity_bytes),
        "anti_thrash": anti_thrash_violations(events),
    }


def service_deviation(trace) -> List[float]:
    """Squared spread of cumulative service around the equal share, per epoch.

    ``trace`` holds (t_ms, {tenant: service_ms}) snapshots. With equal
    workloads every tenant's fair share is the mean.
    """
    out = []
    for _, svc in trace:
        if not svc:
            out.append(0.0)
            continue
        mean = sum(svc.values()) / len(svc)
        out.append(sum((v - mean) ** 2 for v in svc.values()))
    return out


def write_events(path, events):
    with open(path, "w") as f:
        for ev in events:
            f.write(json.dumps(ev.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_events(path) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


_SCALARS = ("n_tasks", "n_finished", "n_unfinished", "tct_mean_ms", "tct_std_ms", "throughput_per_min",
            "memory_useful_frac", "memory_used_frac", "evict_rate", "pauses", "pauses_evicted",
            "regen_tokens", "prefill_tokens", "steals", "steals_per_task", "preemptions", "prefetches", "ttl_coverage",
            "makespan_ms")


def flat_row(metrics) -> Dict[str, object]:
    d = metrics.to_dict() if hasattr(metrics, "to_dict") else dict(metrics)
    row = {k: d.get(k) for k in _SCALARS}
    for c, v in (d.get("slo") or {}).items():
        row[f"slo_{c}"] = v
    for i, b in enumerate(d.get("busy_ms") or []):
        row[f"busy_ms_w{i}"] = b
    return row


def write_metrics(json_path, csv_path, metrics, config: dict, version: str, extra=None):
    doc = {"version": version, "config": config, "metrics": metrics.to_dict()}
    if extra:
        doc.update(extra)
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    row = flat_row(metrics)
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
