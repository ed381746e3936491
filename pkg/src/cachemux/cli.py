"""Command-line front end.

Each subcommand writes into a scratch directory beside ``--out`` and moves
the files into place only when everything succeeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .caching import CacheState
from .engine import RunSpec, simulate_reference
from .estimation import EstimatorState
from .multiplexing import ConfigurationError
from .simulation import (
    ExperimentConfig,
    RunSummary,
    build_catalog,
    lower_bound_experiment,
    run_experiment,
    run_table,
)
from .workload import TraceError, TraceExhausted, draw_streams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("cachemux")

STEP_HEADER = ("t", "query", "hit", "model", "realized_cost", "cum_cost", "cum_regret")
SERIES_HEADER = ("t", "cost_mean", "cost_std", "regret_mean", "regret_std")


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


def parse_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Read and validate a TOML experiment config; unknown keys are rejected."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if raw.get("catalog", {}).get("path"):
        trace = Path(raw["catalog"]["path"])
        if not trace.is_absolute():
            raw["catalog"]["path"] = str((path.parent / trace).resolve())
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            msgs.append(f"{where}: {err['msg']}")
        raise ConfigError(f"{path}: " + "; ".join(msgs)) from None


def slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def _write_steps(path: Path, summary: RunSummary, fmt: str) -> None:
    r = summary.first
    cum_cost, cum_regret = r.cum_cost, r.cum_regret
    rows = [(t + 1, int(r.query[t]), int(r.hit[t]), "" if r.model[t] < 0 else int(r.model[t]),
             float(r.realized[t]), float(cum_cost[t]), float(cum_regret[t])) for t in range(r.horizon)]
    if fmt == "json":
        with open(path / "steps.json", "w", encoding="utf-8") as fh:
            json.dump([dict(zip(STEP_HEADER, row)) for row in rows], fh)
        return
    with open(path / "steps.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_HEADER)
        w.writerows(rows)


def _write_series(path: Path, summary: RunSummary, fmt: str) -> None:
    cols = (np.arange(1, summary.horizon + 1), summary.cost_mean, summary.cost_std,
            summary.regret_mean, summary.regret_std)
    if fmt == "json":
        with open(path / "series.json", "w", encoding="utf-8") as fh:
            json.dump({h: c.tolist() for h, c in zip(SERIES_HEADER, cols)}, fh)
        return
    with open(path / "series.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_HEADER)
        for row in zip(*cols):
            w.writerow([int(row[0]), *(float(x) for x in row[1:])])


def _dump_trace(path: Path, config: ExperimentConfig, summary: RunSummary, policy, dump_cache: bool,
                dump_estimators: bool) -> None:
    """Per-step cache contents and estimates for trial 0, replayed on the reference engine."""
    cache_rows, est_rows = [], []
    if config.mode == "offline":
        r = summary.first
        cache_rows.append({"t": 0, "entries": list(r.final_cache)})
        est_rows.append({"t": 0, **r.estimator})
    else:
        catalog = build_catalog(config.catalog, config.seed, 0)
        streams = draw_streams(catalog, config.horizon, config.seed, 0)
        spec = RunSpec(policy.selector.build(catalog.num_models), policy.cache, config.capacity,
                       delta=config.delta, source=config.source)

        def on_step(t: int, q: int, hit: bool, cache: CacheState, est: EstimatorState) -> None:
            if dump_cache:
                cache_rows.append({"t": t + 1, "entries": sorted(cache.entries)})
            if dump_estimators and not hit:
                est_rows.append({"t": t + 1, "query": q, "plugin": est.plugin_costs()[q].tolist(),
                                 "lcb": est.lcb_costs()[q].tolist(), "count": est.obs_counts[q].tolist()})

        simulate_reference(catalog, streams, spec, on_step)
    if dump_cache:
        with open(path / "cache.jsonl", "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(row) + "\n" for row in cache_rows)
    if dump_estimators:
        with open(path / "estimators.jsonl", "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(row) + "\n" for row in est_rows)


def _emit_runs(tmp: Path, config: ExperimentConfig, summaries: dict[str, RunSummary], args) -> None:
    policies = {p.name: p for p in config.resolved_policies()}
    for name, summary in summaries.items():
        sub = tmp / slug(name)
        sub.mkdir()
        _write_steps(sub, summary, args.format)
        _write_series(sub, summary, args.format)
        if args.dump_cache or args.dump_estimators:
            _dump_trace(sub, config, summary, policies[name], args.dump_cache, args.dump_estimators)
    _write_json(tmp / "summary.json", {
        "config": config.model_dump(mode="json"),
        "policies": {name: s.to_dict() for name, s in summaries.items()},
    })


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(args, **fixed) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    config = parse_config(args.config, {"seed": args.seed, "trials": args.trials, **fixed})
    return config


def cmd_simulate(args, mode: str) -> None:
    config = _load(args, mode=mode)
    if args.command == "trace-run" and config.catalog.kind != "trace":
        raise ConfigError("trace-run needs catalog.kind = \"trace\"")
    staging = _staging(args.out)
    summaries = run_experiment(config)
    with staging as tmp:
        _emit_runs(tmp, config, summaries, args)
    for name, s in summaries.items():
        log.info("%s: cumulative cost %.2f, regret %.2f", name, s.cumulative_cost, s.cumulative_regret)


def cmd_table(args) -> None:
    config = _load(args)
    staging = _staging(args.out)
    table = run_table(config)
    with staging as tmp:
        _write_json(tmp / "summary.json", {"config": config.model_dump(mode="json"), **table.to_dict()})
        (tmp / "table.txt").write_text(table.render(), encoding="utf-8")
    sys.stdout.write(table.render())


def cmd_lower_bound(args) -> None:
    if args.horizon < 1:
        raise UsageError("--horizon must be positive")
    gap = args.horizon ** -0.5 if args.gap is None else args.gap
    if not 0 <= gap < 0.5:
        raise UsageError("--gap must lie in [0, 0.5)")
    trials = args.trials or 100
    staging = _staging(args.out)
    res = lower_bound_experiment(gap, args.horizon, trials, seed=args.seed or 0)
    m1, m2 = res.mean_regrets
    with staging as tmp:
        _write_json(tmp / "summary.json", {
            "gap": gap, "horizon": args.horizon, "trials": trials,
            "mean_regret": [m1, m2], "max_regret": res.max_regret,
            "max_regret_over_sqrt_T": res.max_regret / np.sqrt(args.horizon),
        })
    log.info("max mean regret %.3f", res.max_regret)


class _staging:
    """Context manager yielding a scratch directory that replaces files in ``out`` on success."""

    def __init__(self, out: str):
        if not out:
            raise UsageError("--out is required")
        self.out = Path(out)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".cachemux-", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if not self.out.exists():
            os.replace(self.tmp, self.out)
            return False
        for item in self.tmp.iterdir():
            dest = self.out / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            os.replace(item, dest)
        self.tmp.rmdir()
        return False


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cachemux", description="Cost-aware caching and model multiplexing simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--trials", type=int, help="override the number of trials")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="step and series file format")
        p.add_argument("--dump-cache", action="store_true", help="write per-step cache contents for trial 0")
        p.add_argument("--dump-estimators", action="store_true", help="write per-step estimates for trial 0")
        return p

    common(sub.add_parser("simulate-online", help="online caching and selection"))
    common(sub.add_parser("simulate-offline", help="fit offline, deploy frozen"))
    common(sub.add_parser("trace-run", help="online run over a cost trace"))
    common(sub.add_parser("table", help="grid of preset columns over alpha and cost ratio"))
    lb = common(sub.add_parser("lower-bound", help="two-point lower-bound instance"))
    lb.add_argument("--gap", type=float, default=None, help="cost gap (default 1/sqrt(T))")
    lb.add_argument("--horizon", type=int, default=10000)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CACHEMUX_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "lower-bound":
            cmd_lower_bound(args)
        elif args.command == "table":
            cmd_table(args)
        else:
            cmd_simulate(args, "offline" if args.command == "simulate-offline" else "online")
    except (UsageError, ConfigError, ConfigurationError, TraceError) as exc:
        sys.stderr.write(f"cachemux: error: {exc}\n")
        return 1
    except (OSError, TraceExhausted, ValueError, RuntimeError) as exc:
        sys.stderr.write(f"cachemux: runtime error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
