"""Episodic meta-training (first-order MAML, ANIL) and meta-testing (ANIL, MAC).

All meta-gradients are first order: the outer gradient is the query-loss
gradient evaluated at the task-adapted parameters and applied to the
meta-parameters.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .autodiff import (ConfigurationError, ContractError, Tape, Tensor, backward, sgd_step,
                       softmax_cross_entropy)
from .data import ClassPool, Episode, sample_episode
from .nn import HEAD, Model, features, forward, head_logits
from .widening import WidenPlan, widen

SCOPES = ("all_params", "head_only", "acu_and_head")
ALGORITHMS = ("FOMAML", "ANIL", "MAC")


@dataclass
class InnerConfig:
    steps: int = 1
    alpha: float = 0.4
    scope: str = "all_params"
    per_group_lr: dict[str, float] | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"inner steps must be >= 0, got {self.steps}")
        if self.alpha < 0:
            raise ConfigurationError(f"inner alpha must be >= 0, got {self.alpha}")
        if self.scope not in SCOPES:
            raise ConfigurationError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.per_group_lr and set(self.per_group_lr) - {"body", "head"}:
            raise ConfigurationError(f"per_group_lr groups are 'body' and 'head': {self.per_group_lr}")

    def lr_for(self, name: str) -> float:
        group = "head" if name in HEAD else "body"
        if self.per_group_lr and group in self.per_group_lr:
            return self.per_group_lr[group]
        return self.alpha


@dataclass
class MetaConfig:
    iterations: int = 2000
    meta_batch: int = 8
    eta: float = 0.01
    algorithm: str = "ANIL"
    inner: InnerConfig = field(default_factory=InnerConfig)
    seed: int = 0
    outer_loss_reduction: str = "sum"

    def __post_init__(self):
        if self.meta_batch < 1:
            raise ConfigurationError(f"meta_batch must be >= 1, got {self.meta_batch}")
        if self.eta < 0:
            raise ConfigurationError(f"eta must be >= 0, got {self.eta}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.outer_loss_reduction not in ("sum", "mean"):
            raise ConfigurationError("outer_loss_reduction must be 'sum' or 'mean'")

    @property
    def train_scope(self) -> str:
        # MAC meta-trains exactly like ANIL
        return "all_params" if self.algorithm == "FOMAML" else "head_only"


@dataclass
class EvalReport:
    per_task_accuracy: list[float]
    mean: float
    std: float
    n_tasks: int
    seeds_used: list[int]
    config: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], seeds: Sequence[int], config: dict | None = None):
        if not len(accs):
            raise ContractError("cannot build a report from zero tasks")
        a = np.asarray(accs, dtype=np.float64)
        return cls([float(v) for v in a], float(a.mean()), float(a.std()), len(a),
                   [int(s) for s in seeds], dict(config or {}))

    def as_dict(self) -> dict:
        return asdict(self)


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    lg = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if lg.ndim != 2 or lg.shape[0] != labels.shape[0]:
        raise ContractError(f"logits {lg.shape} vs labels {labels.shape}")
    return float(np.mean(np.argmax(lg, axis=1) == labels))


def task_seed(seed: int, index: int) -> int:
    """Deterministic per-task seed, independent of execution order."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def scope_masks(m: Model, scope: str) -> dict[str, np.ndarray]:
    if scope not in SCOPES:
        raise ConfigurationError(f"unknown scope {scope!r}")
    if scope == "acu_and_head" and not m.widened:
        raise ConfigurationError("scope 'acu_and_head' needs a widened model")
    if scope == "head_only":
        return {n: (m.masks[n] if n in HEAD else np.zeros_like(m.masks[n])) for n in m.params}
    return m.masks


def _step(params, grads, masks, cfg: InnerConfig):
    if not cfg.per_group_lr:
        return sgd_step(params, grads, cfg.alpha, masks)
    out = dict(params)
    for group in ("body", "head"):
        names = [n for n in params if (n in HEAD) == (group == "head")]
        if names:
            lr = cfg.lr_for(names[0])
            out.update(sgd_step({n: params[n] for n in names}, grads, lr, masks))
    return out


def _batch(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def inner_adapt(m: Model, support, cfg: InnerConfig,
                loss_fn: Callable[[Tensor, np.ndarray], Tensor] = softmax_cross_entropy,
                trace: list[float] | None = None) -> Model:
    """Adapt a copy of ``m`` with ``cfg.steps`` full-batch gradient steps on ``support``.

    Only parameters selected by both the scope and the model's masks move.
    When nothing outside the head can move, body features are computed once
    and reused across steps (same arithmetic as the full forward).
    ``trace`` receives the support loss before each step and after the last.
    """
    x, y = support
    x = Tensor(np.asarray(_batch(x).data, dtype=m.dtype))
    masks = scope_masks(m, cfg.scope)
    trainable = {n for n, mk in masks.items() if mk.any()}
    params = dict(m.params)
    head_only = trainable <= set(HEAD)

    if head_only:
        feats = features(m, x)
        head = {n: params[n] for n in HEAD}

        def loss_at(p):
            return loss_fn(head_logits(m, feats, p), y)
        tracked = head
    else:
        def loss_at(p):
            return loss_fn(forward(m.with_params(p), x), y)
        tracked = params

    for _ in range(cfg.steps):
        with Tape():
            loss = loss_at(tracked)
        grads = backward(loss, {n: tracked[n] for n in trainable})
        if trace is not None:
            trace.append(float(loss.data))
        tracked = _step(tracked, grads, masks, cfg)
    if trace is not None:
        trace.append(float(loss_at(tracked).data))
    params.update(tracked)
    return m.with_params(params)


def query_loss(m: Model, episode: Episode) -> Tensor:
    return softmax_cross_entropy(forward(m, Tensor(episode.query_x.astype(m.dtype))), episode.query_y)


def meta_loss(adapted: Sequence[Model], episodes: Sequence[Episode]) -> float:
    """Sum over tasks of each adapted model's query cross-entropy."""
    if len(adapted) != len(episodes):
        raise ContractError(f"{len(adapted)} models for {len(episodes)} episodes")
    return float(sum(float(query_loss(m, ep).data) for m, ep in zip(adapted, episodes)))


def task_gradient(m: Model, episode: Episode, inner: InnerConfig):
    """Adapt on support, then differentiate the query loss at the adapted point.

    Returns (gradients for every parameter, query loss, query accuracy).
    """
    adapted = inner_adapt(m, episode.support, inner)
    with Tape():
        logits = forward(adapted, Tensor(episode.query_x.astype(m.dtype)))
        loss = softmax_cross_entropy(logits, episode.query_y)
    grads = backward(loss, adapted.params)
    return grads, float(loss.data), accuracy(logits, episode.query_y)


def _outer_step(m: Model, episodes: Sequence[Episode], cfg: MetaConfig):
    inner = InnerConfig(cfg.inner.steps, cfg.inner.alpha, cfg.train_scope, cfg.inner.per_group_lr)
    total: dict[str, np.ndarray] | None = None
    losses, accs = [], []
    for ep in episodes:
        g, loss, acc = task_gradient(m, ep, inner)
        losses.append(loss)
        accs.append(acc)
        if total is None:
            total = {n: v.astype(np.float64) for n, v in g.items()}
        else:
            for n, v in g.items():
                total[n] += v
    if cfg.outer_loss_reduction == "mean":
        total = {n: v / len(episodes) for n, v in total.items()}
    total = {n: v.astype(m.params[n].dtype) for n, v in total.items()}
    new = sgd_step(m.params, total, cfg.eta, m.masks)
    return m.with_params(new), float(sum(losses)), float(np.mean(accs))


def outer_update_fomaml(m: Model, episodes: Sequence[Episode], cfg: MetaConfig) -> Model:
    """One first-order outer step over a batch of episodes (returns a new model)."""
    if cfg.algorithm not in ("FOMAML", "ANIL", "MAC"):
        raise ConfigurationError(f"unsupported algorithm {cfg.algorithm}")
    return _outer_step(m, episodes, cfg)[0]


def episode_stream(pool: ClassPool, n_way: int, k_shot: int, q_queries: int,
                   seed: int) -> Iterator[Episode]:
    rng = np.random.default_rng(seed)
    while True:
        yield sample_episode(pool, n_way, k_shot, q_queries, rng)


@dataclass
class TrainLog:
    iteration: int
    meta_loss: float
    probe_accuracy: float
    wall_ms: float


def meta_train(m: Model, task_stream: Iterable[Episode], cfg: MetaConfig,
               log_every: int = 100, on_log: Callable[[TrainLog], None] | None = None) -> Model:
    """Run ``cfg.iterations`` outer updates, drawing ``meta_batch`` episodes each.

    Every ``log_every`` iterations (and at the last one) ``on_log`` receives
    the batch meta-loss and the mean query accuracy of the adapted models.
    """
    it = iter(task_stream)
    start = time.perf_counter()
    for i in range(1, cfg.iterations + 1):
        batch = [next(it) for _ in range(cfg.meta_batch)]
        m, loss, acc = _outer_step(m, batch, cfg)
        if on_log is not None and (i % log_every == 0 or i == cfg.iterations):
            on_log(TrainLog(i, loss, acc, (time.perf_counter() - start) * 1e3))
    return m


def _run_tasks(fn: Callable[[int], float], n: int, workers: int) -> list[float]:
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def evaluate(m: Model, tasks: Sequence[Episode], cfg: InnerConfig, seed: int = 0,
             workers: int = 1, config: dict | None = None) -> EvalReport:
    """Adapt to each task's support set and score its query set."""
    if not tasks:
        raise ContractError("evaluate() needs at least one task")

    def one(i):
        ep = tasks[i]
        adapted = inner_adapt(m, ep.support, cfg)
        return accuracy(forward(adapted, ep.query_x.astype(m.dtype)), ep.query_y)

    accs = _run_tasks(one, len(tasks), workers)
    snap = {"scope": cfg.scope, "steps": cfg.steps, "alpha": cfg.alpha, **(config or {})}
    return EvalReport.from_accuracies(accs, [seed], snap)


def mac_meta_test(m: Model, plan: WidenPlan, tasks: Sequence[Episode], cfg: InnerConfig,
                  workers: int = 1, acu_init: str = "standard_normal",
                  unfreeze_modules: tuple[int, ...] = (), train_hidden_zero_blocks: bool = False,
                  on_task: Callable | None = None, config: dict | None = None) -> EvalReport:
    """Meta-test with ACUs: per task, widen a fresh copy, adapt ACUs + head, score.

    New ACU weights are drawn independently for every task from a seed
    derived from ``plan.seed`` and the task index.  ``on_task(i, widened,
    adapted, report)`` is called after each task when given.
    """
    if not tasks:
        raise ContractError("mac_meta_test() needs at least one task")
    if len(plan.z) != m.n_modules:
        raise ConfigurationError(f"plan has {len(plan.z)} entries but model has {m.n_modules} modules")
    if cfg.scope != "acu_and_head":
        cfg = InnerConfig(cfg.steps, cfg.alpha, "acu_and_head", cfg.per_group_lr)

    def one(i):
        ep = tasks[i]
        wide, report = widen(m, WidenPlan(plan.z, task_seed(plan.seed, i)), acu_init=acu_init,
                             train_hidden_zero_blocks=train_hidden_zero_blocks,
                             unfreeze_modules=unfreeze_modules)
        adapted = inner_adapt(wide, ep.support, cfg)
        acc = accuracy(forward(adapted, ep.query_x.astype(m.dtype)), ep.query_y)
        if on_task is not None:
            on_task(i, wide, adapted, report)
        return acc

    accs = _run_tasks(one, len(tasks), workers)
    snap = {"scope": cfg.scope, "steps": cfg.steps, "alpha": cfg.alpha,
            "plan": list(plan.z), **(config or {})}
    return EvalReport.from_accuracies(accs, [plan.seed], snap)
