"""Widen a meta-trained network with additional connection units (ACUs).

Each conv module ``l`` gains ``z_l`` output filters.  Its weight becomes the
block matrix::

    [ theta*_l   0    ]   old filters: meta-trained rows, zero from new inputs
    [ W_l1       W_l2 ]   new filters: random rows over old and new inputs

and the head gains zero columns for the new features, so the widened network
initially computes exactly the same logits as the base network.  The
returned masks confine adaptation to the ACU rows and the head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigurationError, Tensor
from .nn import HEAD, Model, feature_sizes, module_outputs

MAX_ACU = 50
ACU_INITS = ("standard_normal", "scaled")


@dataclass(frozen=True)
class WidenPlan:
    z: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "z", tuple(int(v) for v in self.z))
        if any(v < 0 for v in self.z):
            raise ConfigurationError(f"ACU counts must be non-negative: {list(self.z)}")
        if any(v > MAX_ACU for v in self.z):
            raise ConfigurationError(f"ACU counts are capped at {MAX_ACU} per layer: {list(self.z)}")

    @classmethod
    def zeros(cls, n_modules: int, seed: int = 0) -> "WidenPlan":
        return cls((0,) * n_modules, seed)

    @property
    def is_empty(self) -> bool:
        return not any(self.z)


# Named plans (filters added per conv module).
PRESETS = {
    "mac_opt_omniglot_text": (45, 35, 20, 10),
    "mac_opt_omniglot_caption": (50, 40, 25, 20),
    "mac_opt_miniimagenet": (50, 40, 25, 20),
}


@dataclass(frozen=True)
class Block:
    """A rectangular region of one parameter tensor."""
    param: str
    rows: tuple[int, int]
    cols: tuple[int, int] | None = None
    label: str = ""

    def index(self):
        r = slice(*self.rows)
        return (r,) if self.cols is None else (r, slice(*self.cols))

    def __str__(self):
        cols = "" if self.cols is None else f", {self.cols[0]}:{self.cols[1]}"
        return f"{self.param}[{self.rows[0]}:{self.rows[1]}{cols}]{' ' + self.label if self.label else ''}"


@dataclass
class WidenReport:
    old_filters: list[int]
    new_filters: list[int]
    frozen: list[Block] = field(default_factory=list)
    trainable: list[Block] = field(default_factory=list)
    zero_blocks: list[Block] = field(default_factory=list)

    @property
    def frozen_names(self) -> list[str]:
        return sorted({b.param for b in self.frozen})

    @property
    def trainable_names(self) -> list[str]:
        return sorted({b.param for b in self.trainable})


def widen(m: Model, plan: WidenPlan, acu_init: str = "standard_normal",
          train_hidden_zero_blocks: bool = False,
          unfreeze_modules: tuple[int, ...] = ()) -> tuple[Model, WidenReport]:
    """Return the widened model ``M'`` and a block-level report.

    ``unfreeze_modules`` (1-based) marks whole modules trainable, which is how
    the deep variant adapts its two extra modules.  ``train_hidden_zero_blocks``
    lets the hidden [old-out, new-in] zero blocks adapt as well.
    """
    if acu_init not in ACU_INITS:
        raise ConfigurationError(f"acu_init must be one of {ACU_INITS}")
    n = m.n_modules
    if len(plan.z) != n:
        raise ConfigurationError(f"plan has {len(plan.z)} entries but model has {n} conv modules")
    if m.widened:
        raise ConfigurationError("model is already widened")
    cfg = m.config
    rng = np.random.default_rng(plan.seed)
    dtype = m.dtype
    params: dict[str, Tensor] = {}
    masks: dict[str, np.ndarray] = {}
    report = WidenReport(old_filters=[], new_filters=[])

    def put(name, data, mask):
        params[name] = Tensor(data.astype(dtype, copy=False), requires_grad=True, name=name)
        masks[name] = mask

    c_old, c_new = cfg.in_channels, cfg.in_channels
    for i in range(1, n + 1):
        z = plan.z[i - 1]
        w_old = m.params[f"conv{i}.weight"].data
        f_old, _, k, _ = w_old.shape
        f_new = f_old + z
        report.old_filters.append(f_old)
        report.new_filters.append(f_new)
        fully = i in unfreeze_modules

        w = np.zeros((f_new, c_new, k, k), dtype=dtype)
        w[:f_old, :c_old] = w_old
        wmask = np.zeros(w.shape, dtype=np.uint8)
        if z:
            fan_in = c_new * k * k
            std = 1.0 if acu_init == "standard_normal" else np.sqrt(2.0 / fan_in)
            w[f_old:] = rng.standard_normal((z, c_new, k, k)) * std
            wmask[f_old:] = 1
        if train_hidden_zero_blocks:
            wmask[:f_old, c_old:] = 1
        if fully:
            wmask[:] = 1
        wname = f"conv{i}.weight"
        put(wname, w, wmask)
        (report.trainable if fully else report.frozen).append(Block(wname, (0, f_old), (0, c_old), "meta-trained"))
        if c_new > c_old:
            blk = Block(wname, (0, f_old), (c_old, c_new), "zero")
            if fully or train_hidden_zero_blocks:
                report.trainable.append(blk)
            else:
                report.frozen.append(blk)
                report.zero_blocks.append(blk)
        if z:
            report.trainable.append(Block(wname, (f_old, f_new), (0, c_old), "W1"))
            if c_new > c_old:
                report.trainable.append(Block(wname, (f_old, f_new), (c_old, c_new), "W2"))

        b_old = m.params[f"conv{i}.bias"].data
        b = np.concatenate([b_old, rng.standard_normal(z) * (1.0 if acu_init == "standard_normal" else 0.0)])
        bmask = np.concatenate([np.full(f_old, int(fully), np.uint8), np.ones(z, np.uint8)])
        put(f"conv{i}.bias", b, bmask)

        gamma = np.concatenate([m.params[f"bn{i}.gamma"].data, np.ones(z)])
        beta = np.concatenate([m.params[f"bn{i}.beta"].data, np.zeros(z)])
        put(f"bn{i}.gamma", gamma, bmask.copy())
        put(f"bn{i}.beta", beta, bmask.copy())
        for pname in (f"conv{i}.bias", f"bn{i}.gamma", f"bn{i}.beta"):
            (report.trainable if fully else report.frozen).append(Block(pname, (0, f_old), None, "meta-trained"))
            if z:
                report.trainable.append(Block(pname, (f_old, f_new), None, "ACU"))
        c_old, c_new = f_old, f_new

    s = feature_sizes(cfg)[-1]
    hw = m.params["head.weight"].data
    flat_old = hw.shape[1]
    flat_new = c_new * s * s
    head_w = np.zeros((hw.shape[0], flat_new), dtype=dtype)
    # channel-major flatten puts every old channel ahead of the new ones
    head_w[:, :flat_old] = hw
    put("head.weight", head_w, np.ones(head_w.shape, np.uint8))
    put("head.bias", m.params["head.bias"].data.copy(), np.ones(hw.shape[0], np.uint8))
    report.trainable.append(Block("head.weight", (0, hw.shape[0]), (0, flat_new), "head"))
    report.trainable.append(Block("head.bias", (0, hw.shape[0]), None, "head"))

    ordered = {name: params[name] for name in m.params}
    ordered_masks = {name: masks[name] for name in m.params}
    return Model(cfg, ordered, ordered_masks, list(plan.z)), report


def old_channel_diffs(base: Model, widened: Model, batch) -> list[float]:
    """Max |difference| of the base channels of every module's activation."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=base.dtype))
    xw = Tensor(x.data.astype(widened.dtype))
    diffs = []
    for a, b in zip(module_outputs(base, x), module_outputs(widened, xw)):
        c = a.shape[1]
        diffs.append(float(np.max(np.abs(b.data[:, :c].astype(np.float64) - a.data))))
    return diffs


def verify_function_preservation(base: Model, widened: Model, batch, tol: float = 1e-6) -> float:
    """Max |logit difference| between the two models on ``batch``.

    Raises AssertionError if any base-channel activation deviates by more
    than ``tol``; the logits themselves are only measured.
    """
    from .nn import forward
    diffs = old_channel_diffs(base, widened, batch)
    for depth, d in enumerate(diffs, start=1):
        if d > tol:
            raise AssertionError(f"module {depth}: base-channel activations differ by {d:.3g} > {tol}")
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    a = forward(base, x.astype(base.dtype)).data
    b = forward(widened, x.astype(widened.dtype)).data
    return float(np.max(np.abs(a.astype(np.float64) - b)))


@dataclass
class FrozenCheck:
    passed: bool
    offending: str | None = None

    def __bool__(self):
        return self.passed


def assert_frozen(before: Model, after: Model, report: WidenReport) -> FrozenCheck:
    """Check that every frozen block is bit-identical and zero blocks are exactly zero."""
    for blk in report.frozen:
        a = before.params[blk.param].data[blk.index()]
        b = after.params[blk.param].data[blk.index()]
        if a.shape != b.shape or a.tobytes() != b.tobytes():
            return FrozenCheck(False, str(blk))
    for blk in report.zero_blocks:
        if np.any(after.params[blk.param].data[blk.index()] != 0):
            return FrozenCheck(False, str(blk))
    return FrozenCheck(True)


def acu_param_names(m: Model) -> list[str]:
    return [n for n in m.params if n not in HEAD and m.masks[n].any()]
