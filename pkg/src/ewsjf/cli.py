"""Command line entry point: ``ewsjf {generate,run,metaopt,partition}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from ewsjf.engine import SCHEDULERS, write_backlog_csv, write_metrics_csv
from ewsjf.exceptions import ConfigError
from ewsjf.experiment import RunConfig, run_sweep
from ewsjf.metaopt import run_meta_loop, write_convergence_csv, write_trials_csv
from ewsjf.partitioner import QueuePartition, refine_and_prune
from ewsjf.workload import WorkloadConfig, generate_mixed_workload, load_trace, save_trace

log = logging.getLogger("ewsjf")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    workload_path = getattr(args, "workload_config", None)
    if workload_path:
        cfg = replace(cfg, workload=WorkloadConfig.from_dict(_read_json(workload_path)))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _trace_for(args, cfg: RunConfig):
    if getattr(args, "trace", None):
        return load_trace(args.trace)
    return generate_mixed_workload(cfg.workload)


def cmd_generate(args) -> int:
    cfg = load_run_config(args)
    path = _out_dir(cfg) / "trace.jsonl"
    save_trace(generate_mixed_workload(cfg.workload), path)
    print(f"wrote {cfg.workload.total_requests} requests to {path}")
    return 0


def format_summary(rows) -> str:
    header = f"{'Scheduler':<10}{'Rate':>8}{'Time (s)':>12}{'Req/s':>10}{'Tok/s':>12}{'TTFT short':>12}  Status"
    lines = [header, "-" * len(header)]
    for row in rows:
        if row["status"] == "ok":
            lines.append(
                f"{row['scheduler']:<10}{row['arrival_rate']:>8.2f}{row['elapsed']:>12.1f}"
                f"{row['req_per_s']:>10.2f}{row['tok_per_s']:>12.1f}{row['ttft_mean_short']:>12.3f}  ok"
            )
        else:
            lines.append(f"{row['scheduler']:<10}{row['arrival_rate']:>8.2f}{'':>56}  failed")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = load_run_config(args)
    if args.scheduler:
        cfg = replace(cfg, schedulers=tuple(dict.fromkeys(args.scheduler)))
    if args.rates:
        cfg = replace(cfg, arrival_rates=tuple(args.rates))
    trace = load_trace(args.trace) if args.trace else None
    partition = QueuePartition.load(args.partition) if args.partition else None
    if trace is not None and args.generate:
        raise ConfigError("--trace and --generate are mutually exclusive")

    result = run_sweep(cfg, trace, partition)
    out = _out_dir(cfg)
    write_metrics_csv(result.rows, out / "metrics.csv")
    for (scheduler, rate), report in result.reports.items():
        write_backlog_csv(report.backlog_trace, out / f"backlog_{scheduler}_{rate:g}.csv")
    print(format_summary(result.rows))
    for failure in result.failures:
        print(f"run failed: {failure}", file=sys.stderr)
    return 1 if result.failures else 0


def cmd_metaopt(args) -> int:
    cfg = load_run_config(args)
    settings = cfg.metaopt
    if args.trials is not None:
        settings = replace(settings, trials=args.trials)
    if args.bounds:
        settings = replace(settings, bounds=_read_json(args.bounds))
    trace = _trace_for(args, cfg)
    result = run_meta_loop(
        trace,
        cfg.engine,
        bounds=settings.resolved_bounds(),
        trials=settings.trials,
        cfg=cfg.reward,
        seed=settings.seed,
        n_init=settings.n_init,
        surrogate=settings.surrogate,
        base=cfg.meta_params,
    )
    out = _out_dir(cfg)
    write_trials_csv(result.history, out / "trials.csv")
    write_convergence_csv(result.convergence, out / "convergence.csv")
    (out / "best_meta_params.json").write_text(json.dumps(result.best.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"best reward {result.best_reward:.4f} after {settings.trials} trials")
    return 0


def cmd_partition(args) -> int:
    cfg = load_run_config(args)
    trace = _trace_for(args, cfg)
    params = replace(cfg.partition_params, alpha=cfg.meta_params.alpha, max_queues=cfg.meta_params.max_queues)
    partition = refine_and_prune(trace.prompt_lens, params)
    path = _out_dir(cfg) / "partition.json"
    partition.save(path)
    for q in partition:
        print(f"{q.id:<16}[{q.min_len}, {q.max_len}]  n={q.count}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides workload and meta-optimizer seeds")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ewsjf", description="Adaptive multi-queue LLM request scheduling simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic JSONL trace")
    p.add_argument("--workload-config", help="JSON file with workload fields")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", parents=[common], help="compare schedulers over an arrival-rate sweep")
    p.add_argument("--trace", help="replay this JSONL trace instead of generating")
    p.add_argument("--generate", action="store_true", help="generate one trace per sweep rate (default)")
    p.add_argument("--workload-config", help="JSON file with workload fields")
    p.add_argument("--partition", help="pin the multi-queue policy to this partition JSON")
    p.add_argument("--scheduler", action="append", choices=SCHEDULERS, help="repeatable; defaults to the config sweep")
    p.add_argument("--rates", type=float, nargs="+", help="arrival rates to sweep")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metaopt", parents=[common], help="tune meta-parameters by Bayesian optimization")
    p.add_argument("--trials", type=int)
    p.add_argument("--bounds", help="JSON object of name -> [lo, hi]")
    p.add_argument("--trace", help="replay this JSONL trace instead of generating")
    p.set_defaults(func=cmd_metaopt)

    p = sub.add_parser("partition", parents=[common], help="learn a queue partition from a trace")
    p.add_argument("--trace", help="JSONL trace; generated from the config if omitted")
    p.set_defaults(func=cmd_partition)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
