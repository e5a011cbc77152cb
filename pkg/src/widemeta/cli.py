"""Command-line entry point: ``widemeta <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_config
from .experiment import (MetricsWriter, cost_report, evaluate_algorithm, load_grid, load_pools,
                         load_reports, make_test_tasks, output_lock, report, run, run_id, sweep_acu,
                         train_model, write_reports)
from .nn import load_checkpoint, save_checkpoint


def cmd_train(args):
    cfg = load_config(args.config)
    out = Path(args.output or cfg.output_dir)
    train_pool, _ = load_pools(cfg)
    with output_lock(out):
        metrics = MetricsWriter(out / "metrics.csv", run_id(cfg))
        for seed in cfg.seeds:
            (out / f"seed{seed}").mkdir(exist_ok=True)
            for alg in sorted({"ANIL" if a == "MAC" else a for a in cfg.algorithms}):
                m = train_model(cfg, alg, train_pool, seed,
                                on_log=lambda lg, a=alg, s=seed: metrics.row(
                                    s, "train", lg.iteration, a, lg.probe_accuracy, lg.meta_loss, lg.wall_ms))
                path = out / f"seed{seed}" / f"{alg}.ckpt"
                save_checkpoint(m, path)
                print(path)


def cmd_eval(args):
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    _, test_pool = load_pools(cfg)
    seed = cfg.seeds[0]
    clean, blurred = make_test_tasks(cfg, test_pool, seed)
    tasks, cond = (blurred, "blurred") if args.blur else (clean, "clean")
    algorithms = [args.algorithm] if args.algorithm else ["ANIL", "MAC"] if args.blur else ["ANIL"]
    records = [evaluate_algorithm(cfg, alg, model, tasks, cond, seed) for alg in algorithms]
    text, _ = report(records)
    print(text, end="")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        write_reports(records, out)


def cmd_sweep(args):
    cfg = load_config(args.config)
    spec = load_grid(args.grid)
    seed = cfg.seeds[0]
    train_pool, test_pool = load_pools(cfg)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else train_model(cfg, "ANIL", train_pool, seed)
    _, blurred = make_test_tasks(cfg, test_pool, seed)
    res = sweep_acu(cfg, spec, model, blurred, seed)
    print(res.table(), end="")
    if args.output:
        Path(args.output).write_text(json.dumps({
            "rows": [{"plan": list(p), "accuracy": a} for p, a in res.rows],
            "best_plan": list(res.best_plan), "best_accuracy": res.best_accuracy,
            "anil_accuracy": res.anil_accuracy,
            "opt_plan": list(res.opt_plan), "opt_accuracy": res.opt_accuracy}, indent=1) + "\n")


def cmd_report(args):
    text, csv_text = report(load_reports(args.inputs))
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text)


def cmd_cost(args):
    cfg = load_config(args.config)
    rows, text = cost_report(cfg)
    print(json.dumps(rows, indent=1) if args.json else text, end="\n" if args.json else "")


def cmd_run(args):
    cfg = load_config(args.config)
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    run(cfg)
    print((Path(cfg.output_dir) / "report.txt").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="widemeta", description="Meta-learning with additional connection units.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="meta-train models and write checkpoints")
    s.add_argument("--config", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on meta-test tasks")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--blur", action="store_true", help="evaluate on Gaussian-blurred tasks")
    s.add_argument("--algorithm", choices=["FOMAML", "ANIL", "MAC"])
    s.add_argument("--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("widen-sweep", help="grid-search ACU plans on blurred tasks")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--output")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="tabulate reports.json files")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("cost", help="forward/backward cost of M, M' and M'_deep")
    s.add_argument("--config", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("run", help="train, evaluate and report in one go")
    s.add_argument("--config", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"widemeta: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
