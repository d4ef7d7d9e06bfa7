"""Command-line entry point: ``agentsched {generate,run,experiment,ratio,aeg,audit}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, fields

from . import __version__
from .aeg import fig2_example
from .core import CapacityError, ConfigError
from .simulator.engine import SimConfig, ablate, run, strategy
from .simulator.metrics import audit, read_events, write_events, write_metrics
from .simulator.workload import WorkloadSpec, generate_workload, read_workload, tenants_of, write_workload

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4

ABLATE_ALIASES = {"session-affinity": "affinity", "affinity": "affinity", "eviction": "eviction",
                  "wa-lru": "eviction", "ttl": "ttl", "prefetch": "prefetch", "stealing": "stealing",
                  "work-stealing": "stealing", "afs": "afs"}


def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path):
    """JSON or TOML document with optional ``workload`` and ``sim`` tables."""
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            with open(path, "rb") as f:
                doc = tomllib.load(f)
        else:
            with open(path) as f:
                doc = json.load(f)
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e.strerror}") from None
    except ValueError as e:  # JSON and TOML decode errors both derive from ValueError
        raise ConfigError("config", f"cannot parse {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a table/object")
    for k in doc:
        if k not in ("workload", "sim"):
            raise ConfigError(k, "unknown section; expected 'workload' or 'sim'")
    return doc


def _workload_spec(args, doc=None) -> WorkloadSpec:
    d = dict((doc or {}).get("workload", {}))
    if getattr(args, "kind", None):
        d["kind"] = args.kind
    if getattr(args, "horizon", None) is not None:
        d["horizon_ms"] = args.horizon * 1000.0
    for flag, key in (("n_tasks", "n_tasks"), ("rate", "arrival_rate"), ("rate_scale", "rate_scale"),
                      ("tool_cv", "tool_cv")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    known = {f.name for f in fields(WorkloadSpec)}
    for k in d:
        if k not in known:
            raise ConfigError(f"workload.{k}", "unknown field")
    for k in ("prompt", "output"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return WorkloadSpec(**d).resolved()


def _sim_config(args, doc=None) -> SimConfig:
    d = dict((doc or {}).get("sim", {}))
    known = {f.name for f in fields(SimConfig)}
    for k in d:
        if k not in known:
            raise ConfigError(f"sim.{k}", "unknown field")
    flag_map = {"policy": "policy", "fairness": "fairness", "theta": "theta", "alpha": "alpha", "beta": "beta",
                "gamma": "gamma", "t_idle": "t_idle_ms", "r_max": "r_max", "workers": "n_workers",
                "max_batch": "max_batch", "kv_gb": "kv_capacity_gb", "admission": "admission",
                "prefill_mode": "prefill_mode", "aeg_source": "aeg_source"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "ttl_max", None) is not None:
        d["ttl_max_ms"] = args.ttl_max * 1000.0
    if getattr(args, "sim_horizon", None) is not None:
        d["horizon_ms"] = args.sim_horizon * 1000.0
    for flag, key in (("no_steal", "steal"), ("no_affinity", "affinity"), ("no_ttl", "ttl"),
                      ("no_prefetch", "prefetch")):
        if getattr(args, flag, False):
            d[key] = False
    if getattr(args, "dump_afs", False):
        d["dump_afs"] = True
    cfg = SimConfig(**d)
    for a in getattr(args, "ablate", None) or []:
        if a not in ABLATE_ALIASES:
            raise ConfigError("ablate", f"unknown component {a!r}; choose from {sorted(ABLATE_ALIASES)}")
        cfg = ablate(cfg, ABLATE_ALIASES[a])
    if getattr(args, "strategy", None):
        cfg = strategy(cfg, args.strategy)
    return cfg.validate()


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    doc = load_config(args.config) if args.config else None
    spec = _workload_spec(args, doc)
    tasks = generate_workload(spec, args.seed)
    out = args.out or f"workload-{spec.kind}-seed{args.seed}.ndjson"
    write_workload(out, spec, args.seed, tasks)
    print(f"wrote {len(tasks)} tasks to {out}")
    return EXIT_OK


def cmd_run(args):
    doc = load_config(args.config) if args.config else None
    cfg = _sim_config(args, doc)
    if args.workload:
        spec, wseed, tasks = read_workload(args.workload)
        spec = spec.resolved()
    else:
        spec = _workload_spec(args, doc)
        tasks = generate_workload(spec, args.seed, cfg.cost_model())
    events, metrics, sim = run(cfg, tasks, args.seed, tools=spec.tool_types(), tenants=tenants_of(spec))
    os.makedirs(args.out, exist_ok=True)
    write_events(os.path.join(args.out, "events.ndjson"), events)
    resolved = {"workload": asdict(spec), "sim": asdict(cfg), "seed": args.seed}
    extra = {"audit": {k: len(v) for k, v in audit(events, cfg.capacity_bytes()).items()}}
    write_metrics(os.path.join(args.out, "metrics.json"), os.path.join(args.out, "metrics.csv"),
                  metrics, resolved, version_string(), extra)
    if cfg.dump_afs:
        with open(os.path.join(args.out, "afs.ndjson"), "w") as f:
            for rec in sim.afs_dump:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    m = metrics
    tct = f"{m.tct_mean_ms / 1000:.1f}s" if m.tct_mean_ms is not None else "n/a"
    ev = f"{m.evict_rate:.3f}" if m.evict_rate is not None else "n/a"
    print(f"tasks {m.n_finished}/{m.n_tasks} finished  TCT {tct}  throughput {m.throughput_per_min:.2f}/min  "
          f"evict rate {ev}  steals {m.steals}  -> {args.out}")
    return EXIT_OK


def cmd_experiment(args):
    from .experiments import format_table, get_preset, run_preset, write_summary
    seeds = None
    if args.seeds:
        seeds = range(int(args.seeds)) if args.seeds.isdigit() else [int(s) for s in args.seeds.split(",")]
    kw = {}
    if args.cv:
        if args.preset != "tool-variance":
            raise ConfigError("cv", "--cv applies only to the tool-variance preset")
        kw["cvs"] = tuple(float(x) for x in args.cv.split(","))
    preset = get_preset(args.preset, seeds, **kw)
    out = args.out or os.path.join("results", preset.name)

    def progress(cell, seed):
        logging.getLogger("agentsched").info("done %s seed %s", cell, seed)

    results = run_preset(preset, out, args.jobs, progress)
    rows = write_summary(preset, results, out)
    print(format_table(rows))
    print(f"summary written to {out}/{preset.name}.csv")
    return EXIT_OK


def cmd_ratio(args):
    from .cache import Policy, competitive_ratio, read_trace, replay_policy, solve_opt, write_trace
    if args.trace:
        if args.capacity is None:
            raise ConfigError("capacity", "--capacity (tokens) is required with a trace file")
        tr = read_trace(args.trace)
        cap = int(args.capacity) * tr.bytes_per_token
        opt = solve_opt(tr, cap, args.time_limit)
        costs = {p.name: replay_policy(tr, cap, p) for p in Policy}
    else:
        from .experiments import ratio_instance
        tr, cap, opt, costs = ratio_instance(args.seed, args.n_tasks, args.time_limit)
        if args.capacity is not None:
            cap = int(args.capacity) * tr.bytes_per_token
            opt = solve_opt(tr, cap, args.time_limit)
            costs = {p.name: replay_policy(tr, cap, p) for p in Policy}
    if args.save_trace:
        write_trace(args.save_trace, tr)
    note = "proven" if opt.optimal else f"best found, lower bound {opt.lower_bound:.0f}"
    print(f"# {len(tr.accesses)} accesses, capacity {cap // tr.bytes_per_token} tokens, OPT {note}",
          file=sys.stderr)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["policy", "cost", "ratio"])
    w.writerow(["OPT", opt.cost, "1.000000"])
    for name in ("EvictAll", "Lru", "PrefixLru", "WaLru"):
        w.writerow([name, costs[name], f"{competitive_ratio(costs[name], opt.cost):.6f}"])
    return EXIT_OK


def cmd_aeg(args):
    if args.workload:
        _, _, tasks = read_workload(args.workload)
        match = [t for _, t in tasks if t.task_id == args.task]
        if not match:
            raise ConfigError("task", f"no task {args.task} in {args.workload}")
        g = match[0].aeg
    else:
        g = fig2_example()
    print(json.dumps(g.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_audit(args):
    events = read_events(args.events)
    cap = int(args.capacity_gb * 1e9) if args.capacity_gb else None
    res = audit(events, cap if cap is not None else float("inf"))
    bad = 0
    for k, v in res.items():
        print(f"{k:<12} {'ok' if not v else f'{len(v)} violation(s)'}")
        bad += len(v)
    return EXIT_OK if not bad else EXIT_RUNTIME


# ---------------------------------------------------------------- parser

def _add_workload_flags(p):
    p.add_argument("--kind", choices=["swebench", "webarena", "multitenant"])
    p.add_argument("--horizon", type=float, help="arrival horizon in seconds")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--rate", type=float, help="tasks/min for single-tenant kinds")
    p.add_argument("--rate-scale", type=float, help="multiplies every tenant's rate")
    p.add_argument("--tool-cv", type=float, help="replace tool latencies by log-normals with this CV")


def build_parser():
    ap = argparse.ArgumentParser(prog="agentsched", description="Agent-workflow cluster scheduling simulator")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="write a reproducible workload file")
    _add_workload_flags(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="simulate one configuration")
    r.add_argument("workload", nargs="?", help="workload file from 'generate' (else generated from flags)")
    _add_workload_flags(r)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--config")
    r.add_argument("--policy", choices=["wa-lru", "lru", "prefix-lru", "evict-all"])
    r.add_argument("--fairness", choices=["afs", "fcfs", "uniform"])
    r.add_argument("--strategy", choices=["bfs", "dfs", "hybrid"])
    r.add_argument("--admission", choices=["open", "memory", "serial"])
    r.add_argument("--prefill-mode", choices=["parallel", "serial"])
    r.add_argument("--aeg-source", choices=["hints", "inferred"])
    r.add_argument("--no-steal", action="store_true")
    r.add_argument("--no-affinity", action="store_true")
    r.add_argument("--no-ttl", action="store_true")
    r.add_argument("--no-prefetch", action="store_true")
    r.add_argument("--ablate", action="append", metavar="COMPONENT",
                   help=f"switch one component off: {', '.join(sorted(ABLATE_ALIASES))}")
    r.add_argument("--theta", type=float)
    r.add_argument("--alpha", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--gamma", type=float)
    r.add_argument("--ttl-max", type=float, help="seconds")
    r.add_argument("--t-idle", type=float, help="ms")
    r.add_argument("--r-max", type=float)
    r.add_argument("--workers", type=int)
    r.add_argument("--max-batch", type=int)
    r.add_argument("--kv-gb", type=float, help="KV capacity per worker in GB")
    r.add_argument("--sim-horizon", type=float, help="simulation horizon in seconds")
    r.add_argument("--dump-afs", action="store_true")
    r.add_argument("--out", default="run-out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("experiment", help="run a multi-seed preset")
    e.add_argument("preset", choices=["e2e", "ablation", "ratio", "fairness", "strategy", "stealing",
                                      "sensitivity", "tool-variance", "pattern"])
    e.add_argument("--seeds", help="count (e.g. 10) or comma list (e.g. 0,3,7)")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--cv", help="comma list of CVs for tool-variance")
    e.add_argument("--out")
    e.set_defaults(func=cmd_experiment)

    q = sub.add_parser("ratio", help="online policies against the exact offline optimum on one trace")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--n-tasks", type=int, default=20)
    q.add_argument("--time-limit", type=float, default=30.0)
    q.add_argument("--trace", help="access trace file (else one is generated from --seed)")
    q.add_argument("--capacity", type=int, help="capacity in tokens (default: half the peak working set)")
    q.add_argument("--save-trace", help="also write the trace used")
    q.set_defaults(func=cmd_ratio)

    a = sub.add_parser("aeg", help="inspect execution graphs")
    asub = a.add_subparsers(dest="aeg_cmd", required=True)
    d = asub.add_parser("dump", help="print a graph as JSON (the built-in example if no workload given)")
    d.add_argument("--workload")
    d.add_argument("--task", type=int, default=0)
    d.set_defaults(func=cmd_aeg)

    u = sub.add_parser("audit", help="check an event log for causality, capacity and anti-thrash violations")
    u.add_argument("events")
    u.add_argument("--capacity-gb", type=float)
    u.set_defaults(func=cmd_audit)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("SAGA_SIM_LOG", "warning").upper()
    if level in ("1", "TRUE"):
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
