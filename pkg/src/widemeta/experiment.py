"""Experiment runner: train, evaluate, sweep ACU plans, tabulate results."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ConfigurationError
from .config import ConfigError, ExperimentConfig, dump_config
from .data import (ClassPool, Episode, blur_episode, data_root, load_image_tree, load_split_tree,
                   rotate_augment, sample_episode, split_pool, synth_glyph_pool, discover_classes)
from .meta import (EvalReport, episode_stream, evaluate, mac_meta_test,
                   meta_train, task_seed)
from .nn import Model, build_model, cost_estimate, replace_config, save_checkpoint
from .widening import MAX_ACU, WidenPlan

log = logging.getLogger(__name__)

METRICS_HEADER = ["run_id", "seed", "phase", "iteration", "algorithm", "mean_accuracy", "meta_loss", "wall_ms"]
ROW_ORDER = ["MAML(first-order)", "ANIL", "MAC_best", "MAC_opt", "MAC", "MAC_deep"]
ALIASES = {"FOMAML": "MAML(first-order)"}
FOOTER = ("MAML(first-order): rows labelled MAML are produced by first-order MAML "
          "(query gradient taken at the adapted parameters).")


class ReportError(ValueError):
    pass


class BudgetError(ValueError):
    pass


class OutputLockedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data and tasks
# ---------------------------------------------------------------------------

def load_pools(cfg: ExperimentConfig) -> tuple[ClassPool, ClassPool]:
    d = cfg.data
    if d.source == "synthetic":
        pool = synth_glyph_pool(d.synth)
        train, test = split_pool(pool, d.n_train_classes, np.random.default_rng(d.split_seed))
    else:
        root = data_root(d.root)
        if not root:
            raise ConfigError("data.root (or WIDEMETA_DATA) is required for on-disk datasets")
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"data root {root} does not exist")
        if (root.parent / "train.split").is_file() and (root.parent / "test.split").is_file():
            train, test = load_split_tree(root, cfg.model.image_size, d.channels, d.invert)
        else:
            ids = discover_classes(root)
            rng = np.random.default_rng(d.split_seed)
            pool = load_image_tree(root, cfg.model.image_size, d.channels, ids, d.invert)
            train, test = split_pool(pool, d.n_train_classes, rng)
    if d.rotate:
        train, test = rotate_augment(train), rotate_augment(test)
    if set(train.classes) & set(test.classes):
        raise ConfigError("meta-train and meta-test classes overlap")
    return train, test


def make_test_tasks(cfg: ExperimentConfig, test_pool: ClassPool, seed: int) -> tuple[list[Episode], list[Episode]]:
    """Clean and blurred meta-test episodes (same images, blurred copy)."""
    n_way = cfg.model.n_way
    clean, blurred = [], []
    for i in range(cfg.eval.n_task_batches):
        rng = np.random.default_rng(task_seed(seed, 1_000_000 + i))
        ep = sample_episode(test_pool, n_way, cfg.episode.k_shot, cfg.episode.eval_queries, rng)
        clean.append(ep)
        blurred.append(blur_episode(ep, cfg.blur, rng))
    return clean, blurred


def run_id(cfg: ExperimentConfig) -> str:
    return hashlib.sha1(dump_config(cfg).encode()).hexdigest()[:12]


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockedError(f"{out} is in use by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


class MetricsWriter:
    def __init__(self, path: Path, rid: str):
        self.path, self.rid = path, rid
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    def row(self, seed, phase, iteration, algorithm, mean_accuracy=None, meta_loss=None, wall_ms=0.0):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([self.rid, seed, phase, iteration, algorithm,
                                    "" if mean_accuracy is None else repr(float(mean_accuracy)),
                                    "" if meta_loss is None else repr(float(meta_loss)),
                                    f"{wall_ms:.1f}"])


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

def train_model(cfg: ExperimentConfig, algorithm: str, train_pool: ClassPool, seed: int,
                model_cfg=None, on_log=None) -> Model:
    mcfg = model_cfg or cfg.model
    m = build_model(mcfg, np.random.default_rng(task_seed(seed, 0)))
    meta = replace(cfg.meta, algorithm=algorithm, seed=seed)
    stream = episode_stream(train_pool, mcfg.n_way, cfg.episode.k_shot, cfg.episode.train_queries,
                            task_seed(seed, 1))
    return meta_train(m, stream, meta, log_every=cfg.log_every, on_log=on_log)


def _snapshot(cfg: ExperimentConfig, algorithm: str, condition: str, seed: int) -> dict:
    return {"algorithm": algorithm, "condition": condition, "seed": seed,
            "n_way": cfg.model.n_way, "k_shot": cfg.episode.k_shot}


def evaluate_algorithm(cfg: ExperimentConfig, algorithm: str, model: Model, tasks: Sequence[Episode],
                       condition: str, seed: int, plan: WidenPlan | None = None,
                       unfreeze_modules: tuple[int, ...] = ()) -> EvalReport:
    snap = _snapshot(cfg, algorithm, condition, seed)
    if algorithm.startswith("MAC"):
        return mac_meta_test(model, plan or cfg.plan(seed, model.n_modules), tasks,
                             cfg.eval.inner("acu_and_head"), workers=cfg.eval.workers,
                             acu_init=cfg.widen.acu_init, unfreeze_modules=unfreeze_modules,
                             train_hidden_zero_blocks=cfg.widen.train_hidden_zero_blocks, config=snap)
    scope = "all_params" if algorithm == "FOMAML" else "head_only"
    return evaluate(model, tasks, cfg.eval.inner(scope), seed=seed, workers=cfg.eval.workers, config=snap)


def run(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> list[EvalReport]:
    """Full pipeline for every seed: meta-train, evaluate, write artifacts.

    FOMAML and ANIL are evaluated on clean and blurred meta-test tasks; MAC
    (widening the ANIL-trained model) on blurred tasks.  Writes per-seed
    checkpoints, ``metrics.csv``, ``reports.json`` and the seed-averaged
    ``report.txt`` / ``report.csv``.
    """
    out = Path(output_dir or cfg.output_dir)
    rid = run_id(cfg)
    records: list[EvalReport] = []
    train_pool, test_pool = load_pools(cfg)
    with output_lock(out):
        (out / "config.cfg").write_text(dump_config(cfg))
        metrics = MetricsWriter(out / "metrics.csv", rid)
        for seed in cfg.seeds:
            sdir = out / f"seed{seed}"
            sdir.mkdir(exist_ok=True)
            clean, blurred = make_test_tasks(cfg, test_pool, seed)
            trained: dict[str, Model] = {}
            need_anil = "MAC" in cfg.algorithms or "ANIL" in cfg.algorithms
            to_train = [a for a in ("FOMAML", "ANIL") if a in cfg.algorithms or (a == "ANIL" and need_anil)]
            for alg in to_train:
                log.info("seed %s: meta-training %s", seed, alg)
                trained[alg] = train_model(
                    cfg, alg, train_pool, seed,
                    on_log=lambda lg, a=alg: metrics.row(seed, "train", lg.iteration, a,
                                                         lg.probe_accuracy, lg.meta_loss, lg.wall_ms))
                save_checkpoint(trained[alg], sdir / f"{alg}.ckpt")
            jobs = []
            for alg in ("FOMAML", "ANIL"):
                if alg in cfg.algorithms:
                    jobs += [(alg, trained[alg], clean, "clean"), (alg, trained[alg], blurred, "blurred")]
            if "MAC" in cfg.algorithms:
                jobs.append(("MAC", trained["ANIL"], blurred, "blurred"))
            for alg, model, tasks, cond in jobs:
                t0 = time.perf_counter()
                rep = evaluate_algorithm(cfg, alg, model, tasks, cond, seed)
                records.append(rep)
                metrics.row(seed, "eval", cfg.meta.iterations, f"{alg}:{cond}", rep.mean, None,
                            (time.perf_counter() - t0) * 1e3)
            if cfg.widen.deep:
                deep_cfg = replace_config(cfg.model, depth_variant="deep6")
                deep = train_model(cfg, "ANIL", train_pool, seed, model_cfg=deep_cfg)
                save_checkpoint(deep, sdir / "ANIL_deep6.ckpt")
                t0 = time.perf_counter()
                rep = evaluate_algorithm(cfg, "MAC_deep", deep, blurred, "blurred", seed,
                                         plan=cfg.plan(seed, 6), unfreeze_modules=(5, 6))
                records.append(rep)
                metrics.row(seed, "eval", cfg.meta.iterations, "MAC_deep:blurred", rep.mean, None,
                            (time.perf_counter() - t0) * 1e3)
        write_reports(records, out)
    return records


def write_reports(records: Sequence[EvalReport], out: Path) -> None:
    (out / "reports.json").write_text(json.dumps([r.as_dict() for r in records], indent=1) + "\n")
    text, csv_text = report(records)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(csv_text)


def load_reports(paths: Iterable[str | Path]) -> list[EvalReport]:
    out = []
    for p in paths:
        p = Path(p)
        files = [p / "reports.json"] if p.is_dir() else [p]
        for f in files:
            if not f.is_file():
                raise FileNotFoundError(f"no reports.json at {p}")
            for d in json.loads(f.read_text()):
                out.append(EvalReport(**d))
    return out


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def _label(rep: EvalReport) -> str:
    alg = rep.config.get("algorithm", "?")
    return ALIASES.get(alg, alg)


def report(records: Sequence[EvalReport]) -> tuple[str, str]:
    """Seed-averaged comparison table as (plain text, CSV).

    One row per (algorithm, condition); accuracy in percent and the
    difference to ANIL under the same condition.
    """
    if not records:
        raise ReportError("no records to report")
    settings = {(r.config.get("n_way"), r.config.get("k_shot")) for r in records}
    if len(settings) > 1:
        raise ReportError(f"records mix task settings {sorted(settings, key=str)}; report them separately")
    n_way, k_shot = settings.pop()
    setting = f"{n_way}-way {k_shot}-shot"
    groups: dict[tuple[str, str], list[EvalReport]] = {}
    for r in records:
        groups.setdefault((_label(r), r.config.get("condition", "")), []).append(r)

    def order(key):
        name, cond = key
        rank = ROW_ORDER.index(name) if name in ROW_ORDER else len(ROW_ORDER)
        return (cond != "blurred", cond, rank, name)

    rows = []
    means = {k: float(np.mean([r.mean for r in v])) * 100.0 for k, v in groups.items()}
    for key in sorted(groups, key=order):
        name, cond = key
        anil = means.get(("ANIL", cond))
        delta = None if anil is None or name == "ANIL" else means[key] - anil
        seeds = sorted({s for r in groups[key] for s in r.seeds_used})
        rows.append((name, cond, means[key], delta, len(groups[key]), seeds))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "condition", "setting", "accuracy_pct", "delta_vs_anil_pct", "n_seeds"])
    for name, cond, acc, delta, n, _ in rows:
        w.writerow([name, cond, setting, repr(acc), "" if delta is None else repr(delta), n])

    head = f"{'Method':<20} {'Condition':<9} {setting:>14} {'Δ vs ANIL':>10} {'seeds':>5}"
    lines = [head, "-" * len(head)]
    for name, cond, acc, delta, n, _ in rows:
        d = "" if delta is None else f"{delta:+.2f}"
        lines.append(f"{name:<20} {cond:<9} {acc:>14.2f} {d:>10} {n:>5}")
    if any(r[0] == "MAML(first-order)" for r in rows):
        lines += ["", FOOTER]
    return "\n".join(lines) + "\n", buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["accuracy_pct"] = float(r["accuracy_pct"])
        r["delta_vs_anil_pct"] = float(r["delta_vs_anil_pct"]) if r["delta_vs_anil_pct"] else None
        r["n_seeds"] = int(r["n_seeds"])
    return rows


# ---------------------------------------------------------------------------
# ACU sweeps
# ---------------------------------------------------------------------------

POSITIONS = ("initial_layers", "end_layers", "all_layers")


@dataclass
class SweepSpec:
    position: str = "all_layers"
    z_candidates: tuple[tuple[int, ...], ...] = ((0, 10),) * 4
    budget: int = 64

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise ConfigurationError(f"position must be one of {POSITIONS}, got {self.position!r}")
        if len(self.z_candidates) != 4:
            raise ConfigurationError("z_candidates needs one candidate set per conv module (4)")
        for layer, cands in enumerate(self.z_candidates, start=1):
            bad = [z for z in cands if z < 0 or z > MAX_ACU]
            if bad:
                raise ConfigurationError(f"layer {layer}: candidates {bad} outside [0, {MAX_ACU}]")

    def plans(self) -> list[tuple[int, ...]]:
        sets = [tuple(dict.fromkeys(c)) for c in self.z_candidates]
        if self.position == "initial_layers":
            sets[2] = sets[3] = (0,)
        elif self.position == "end_layers":
            sets[0] = sets[1] = (0,)
        return list(itertools.product(*sets))


def load_grid(path) -> SweepSpec:
    from .config import parse_lines
    kv = parse_lines(Path(path).read_text())
    allowed = {"position", "budget", "z1", "z2", "z3", "z4"}
    unknown = set(kv) - allowed
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    cands = tuple(tuple(int(x) for x in kv.get(f"z{i}", "0").split(",")) for i in range(1, 5))
    return SweepSpec(kv.get("position", "all_layers"), cands, int(kv.get("budget", 64)))


@dataclass
class SweepResult:
    rows: list[tuple[tuple[int, ...], float]]
    best_plan: tuple[int, ...]
    best_accuracy: float
    anil_accuracy: float
    opt_plan: tuple[int, ...]
    opt_accuracy: float

    def table(self) -> str:
        lines = [f"{'plan':<22} {'accuracy_pct':>12}"]
        for plan, acc in self.rows:
            lines.append(f"{str(list(plan)):<22} {acc * 100:>12.2f}")
        lines += ["", f"{'ANIL':<22} {self.anil_accuracy * 100:>12.2f}",
                  f"{'MAC_best ' + str(list(self.best_plan)):<22} {self.best_accuracy * 100:>12.2f}",
                  f"{'MAC_opt ' + str(list(self.opt_plan)):<22} {self.opt_accuracy * 100:>12.2f}"]
        return "\n".join(lines) + "\n"


def sweep_acu(cfg: ExperimentConfig, spec: SweepSpec, model: Model, tasks: Sequence[Episode],
              seed: int) -> SweepResult:
    """Evaluate every candidate plan on the same tasks with one trained model."""
    plans = spec.plans()
    if len(plans) > spec.budget:
        raise BudgetError(f"grid has {len(plans)} plans but budget is {spec.budget}; "
                          f"raise budget to at least {len(plans)}")
    inner = cfg.eval.inner("acu_and_head")
    rows = []
    for z in plans:
        rep = mac_meta_test(model, WidenPlan(z, seed), tasks, inner, workers=cfg.eval.workers,
                            acu_init=cfg.widen.acu_init)
        rows.append((tuple(z), rep.mean))
    best_i = int(np.argmax([acc for _, acc in rows]))
    anil = evaluate(model, tasks, cfg.eval.inner("head_only"), seed=seed, workers=cfg.eval.workers)
    opt = tuple(cfg.widen.z)
    opt_acc = dict(rows).get(opt)
    if opt_acc is None:
        opt_acc = mac_meta_test(model, WidenPlan(opt, seed), tasks, inner, workers=cfg.eval.workers,
                                acu_init=cfg.widen.acu_init).mean
    return SweepResult(rows, rows[best_i][0], rows[best_i][1], anil.mean, opt, opt_acc)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def cost_report(cfg: ExperimentConfig) -> tuple[list[dict], str]:
    """Forward multiplies and adapted-parameter counts for M, M' and M'_deep."""
    z = tuple(cfg.widen.z)
    deep_cfg = replace_config(cfg.model, depth_variant="deep6")
    variants = [
        ("M (ANIL)", cost_estimate(cfg.model, None, "anil")),
        ("M' (MAC)", cost_estimate(cfg.model, list(z), "mac")),
        ("M'_deep (MAC_deep)", cost_estimate(deep_cfg, list(z) + [0, 0], "mac_deep")),
    ]
    rows = [{"variant": name, "forward_mults": c.forward_mults,
             "trainable_grad_count": c.trainable_grad_count} for name, c in variants]
    lines = [f"{'variant':<20} {'forward_mults':>14} {'trainable_grads':>16}"]
    for r in rows:
        lines.append(f"{r['variant']:<20} {r['forward_mults']:>14,} {r['trainable_grad_count']:>16,}")
    return rows, "\n".join(lines) + "\n"
