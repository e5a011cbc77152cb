"""The conv-module classifier: build, run, clone, serialize, cost-count.

Parameter names are ``conv{i}.weight``, ``conv{i}.bias``, ``bn{i}.gamma``,
``bn{i}.beta`` for modules ``i = 1..n`` and ``head.weight``, ``head.bias``.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import (ConfigurationError, DimensionError, Tensor, affine, batchnorm2d,
                       conv2d, conv_output_size, flatten, relu)

DEPTH_MODULES = {"standard4": 4, "deep6": 6}
MAGIC = b"WMETA1\0"
HEAD = ("head.weight", "head.bias")


class CheckpointParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class CheckpointIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    image_size: int = 28
    n_way: int = 5
    base_filters: int = 64
    depth_variant: str = "standard4"
    stride: int = 2
    kernel: int = 3
    padding: int = 1

    @property
    def n_modules(self) -> int:
        return DEPTH_MODULES[self.depth_variant]

    def validate(self) -> "ModelConfig":
        if self.depth_variant not in DEPTH_MODULES:
            raise ConfigurationError(f"unknown depth_variant {self.depth_variant!r}")
        if self.n_way < 2:
            raise ConfigurationError(f"n_way must be >= 2, got {self.n_way}")
        if min(self.in_channels, self.image_size, self.base_filters, self.stride, self.kernel) < 1:
            raise ConfigurationError(f"non-positive dimension in {self}")
        if self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel must be odd, got {self.kernel}")
        module_geometry(self)
        return self


def module_geometry(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(stride, output spatial size) for each conv module.

    The four standard modules must not collapse; the two extra modules of the
    deep variant fall back to stride 1 where stride 2 would.
    """
    size = cfg.image_size
    out = []
    for i in range(cfg.n_modules):
        stride = cfg.stride
        nxt = conv_output_size(size, cfg.kernel, stride, cfg.padding)
        if nxt < 1:
            if i < 4:
                raise ConfigurationError(
                    f"spatial size collapses at module {i + 1} (input {size}, config {cfg})")
            stride = 1
            nxt = conv_output_size(size, cfg.kernel, 1, cfg.padding)
            if nxt < 1:
                raise ConfigurationError(f"spatial size collapses at module {i + 1}")
        out.append((stride, nxt))
        size = nxt
    return out


def feature_sizes(cfg: ModelConfig) -> list[int]:
    return [s for _, s in module_geometry(cfg)]


class Model:
    """Conv-module network with a named parameter map and trainability masks.

    ``acu`` holds the number of extra filters each module carries on top of
    ``config.base_filters``; it is ``None`` until the model has been widened.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], masks: dict[str, np.ndarray],
                 acu: list[int] | None = None):
        self.config = config
        self.params = params
        self.masks = masks
        self.acu = list(acu) if acu is not None else None
        self.strides = [s for s, _ in module_geometry(config)]

    @property
    def n_modules(self) -> int:
        return self.config.n_modules

    @property
    def widened(self) -> bool:
        return self.acu is not None

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def names(self) -> list[str]:
        return list(self.params)

    def body_names(self) -> list[str]:
        return [n for n in self.params if n not in HEAD]

    def count_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def count_trainable(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    def astype(self, dtype) -> "Model":
        out = clone_model(self)
        for name, p in out.params.items():
            p.data = p.data.astype(dtype)
        return out

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        """Shallow copy sharing masks/config but holding ``params``."""
        out = Model.__new__(Model)
        out.config, out.masks, out.acu, out.strides = self.config, self.masks, self.acu, self.strides
        out.params = dict(params)
        return out


def _param_order(n_modules: int) -> list[str]:
    names = []
    for i in range(1, n_modules + 1):
        names += [f"conv{i}.weight", f"conv{i}.bias", f"bn{i}.gamma", f"bn{i}.beta"]
    return names + list(HEAD)


def expected_shapes(cfg: ModelConfig, acu: list[int] | None = None) -> dict[str, tuple[int, ...]]:
    acu = acu or [0] * cfg.n_modules
    k, F = cfg.kernel, cfg.base_filters
    shapes = {}
    c_in = cfg.in_channels
    for i in range(cfg.n_modules):
        f_out = F + acu[i]
        shapes[f"conv{i + 1}.weight"] = (f_out, c_in, k, k)
        shapes[f"conv{i + 1}.bias"] = (f_out,)
        shapes[f"bn{i + 1}.gamma"] = (f_out,)
        shapes[f"bn{i + 1}.beta"] = (f_out,)
        c_in = f_out
    last = feature_sizes(cfg)[-1]
    shapes["head.weight"] = (cfg.n_way, c_in * last * last)
    shapes["head.bias"] = (cfg.n_way,)
    return shapes


def build_model(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Fresh model: He-normal conv/head weights, zero biases, BN (1, 0), all masks one."""
    cfg.validate()
    params = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    masks = {n: np.ones(p.shape, dtype=np.uint8) for n, p in params.items()}
    return Model(cfg, params, masks)


def _check_input(m: Model, batch: Tensor):
    cfg = m.config
    want = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if batch.data.ndim != 4 or batch.shape[1:] != want:
        raise DimensionError(f"batch shape {batch.shape} does not match model input (B, {want})")


def module_outputs(m: Model, batch: Tensor, params: dict[str, Tensor] | None = None) -> list[Tensor]:
    """Post-ReLU activation of every conv module."""
    p = m.params if params is None else params
    _check_input(m, batch)
    h = batch
    outs = []
    for i, stride in enumerate(m.strides, start=1):
        h = conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride, m.config.padding)
        h = relu(batchnorm2d(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"]))
        outs.append(h)
    return outs


def features(m: Model, batch: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
    """Flattened body output that feeds the head."""
    return flatten(module_outputs(m, batch, params)[-1])


def head_logits(m: Model, feats: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
    p = m.params if params is None else params
    return affine(feats, p["head.weight"], p["head.bias"])


def forward(m: Model, batch) -> Tensor:
    batch = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=m.dtype))
    return head_logits(m, features(m, batch))


def clone_model(m: Model) -> Model:
    params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=p.name) for n, p in m.params.items()}
    masks = {n: mk.copy() for n, mk in m.masks.items()}
    return Model(m.config, params, masks, m.acu)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def _config_block(m: Model) -> str:
    lines = [f"model.{f.name}={getattr(m.config, f.name)}" for f in fields(ModelConfig)]
    lines.append("model.acu=" + ("" if m.acu is None else ",".join(str(z) for z in m.acu)))
    return "\n".join(lines) + "\n"


def checkpoint_bytes(m: Model) -> bytes:
    entries = []
    for name in m.params:
        entries.append((name, m.params[name].data.astype("<f4"), "f"))
    for name in m.params:
        entries.append((name + ".mask", m.masks[name].astype(np.uint8), "u"))
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(entries))
    for name, arr, _ in entries:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    buf += _config_block(m).encode("utf-8")
    return bytes(buf)


def save_checkpoint(m: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(m))


def _parse_config_block(text: str) -> tuple[ModelConfig, list[int]]:
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"config line without '=': {line!r}")
        kv[key.strip()] = val.strip()
    kw = {}
    for f in fields(ModelConfig):
        raw = kv[f"model.{f.name}"]
        kw[f.name] = raw if f.type in ("str", str) else int(raw)
    acu = [int(z) for z in kv["model.acu"].split(",")] if kv.get("model.acu") else None
    return ModelConfig(**kw), acu


def _looks_like_config(tail: bytes) -> bool:
    try:
        _parse_config_block(tail.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, KeyError):
        return False
    return True


def load_checkpoint_bytes(data: bytes) -> Model:
    if not data.startswith(MAGIC):
        raise CheckpointParseError("bad magic bytes", 0)
    pos = len(MAGIC)

    def need(n):
        if pos + n > len(data):
            raise CheckpointParseError(f"truncated: needed {n} bytes, {len(data) - pos} left", pos)

    need(4)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries: dict[str, np.ndarray] = {}
    for idx in range(count):
        start = pos
        try:
            need(2)
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            need(nlen)
            try:
                name = data[pos:pos + nlen].decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointParseError("parameter name is not UTF-8", pos) from None
            pos += nlen
            need(1)
            rank = data[pos]
            pos += 1
            need(4 * rank)
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            is_mask = name.endswith(".mask")
            width = 1 if is_mask else 4
            need(n * width)
            arr = np.frombuffer(data, dtype=np.uint8 if is_mask else "<f4", count=n, offset=pos)
            pos += n * width
        except CheckpointParseError:
            if idx > 0 and _looks_like_config(data[start:]):
                raise CheckpointIntegrityError(
                    f"header declares {count} entries but file contains {idx}") from None
            raise
        if name in entries:
            raise CheckpointIntegrityError(f"duplicate entry {name!r}")
        entries[name] = arr.reshape(dims).copy()
    try:
        cfg, acu = _parse_config_block(data[pos:].decode("utf-8"))
    except UnicodeDecodeError:
        raise CheckpointParseError("config block is not UTF-8", pos) from None
    except (ValueError, KeyError) as exc:
        raise CheckpointParseError(f"malformed config block: {exc}", pos) from None
    cfg.validate()
    shapes = expected_shapes(cfg, acu)
    want = set(shapes) | {n + ".mask" for n in shapes}
    if set(entries) != want:
        missing, extra = sorted(want - set(entries)), sorted(set(entries) - want)
        raise CheckpointIntegrityError(f"entry names disagree with config: missing {missing}, unexpected {extra}")
    params, masks = {}, {}
    for name in _param_order(cfg.n_modules):
        for key in (name, name + ".mask"):
            if entries[key].shape != shapes[name]:
                raise CheckpointIntegrityError(
                    f"{key}: shape {entries[key].shape} but config implies {shapes[name]}")
        params[name] = Tensor(entries[name].astype(np.float32), requires_grad=True, name=name)
        masks[name] = entries[name + ".mask"]
    return Model(cfg, params, masks, acu)


def load_checkpoint(path) -> Model:
    return load_checkpoint_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

@dataclass
class CostEstimate:
    forward_mults: int
    trainable_grad_count: int
    layer_mults: list[int]
    mode: str

    def as_dict(self):
        return asdict(self)


COST_MODES = ("fomaml", "anil", "mac", "mac_deep")


def cost_estimate(cfg: ModelConfig, widen: list[int] | None = None, mode: str = "anil",
                  batch: int = 1) -> CostEstimate:
    """Multiply counts of one forward pass and the number of updated scalars.

    Conv layer cost is ``k*k*C_in*F_out*H'*W'*B``; the head adds
    ``in_features*n_way*B``.  ``mode`` selects which parameters adapt:
    ``anil`` head only, ``mac`` head plus ACU parameters (new filter rows,
    biases and BN affine terms), ``mac_deep`` additionally the last two
    modules, ``fomaml`` everything.
    """
    if mode not in COST_MODES:
        raise ConfigurationError(f"unknown cost mode {mode!r}; expected one of {COST_MODES}")
    z = list(widen) if widen is not None else [0] * cfg.n_modules
    if len(z) != cfg.n_modules:
        raise ConfigurationError(f"widen plan has {len(z)} entries for {cfg.n_modules} modules")
    shapes = expected_shapes(cfg, z)
    sizes = feature_sizes(cfg)
    k, F = cfg.kernel, cfg.base_filters
    layer_mults = []
    c_in = cfg.in_channels
    for i, s in enumerate(sizes):
        f_out = F + z[i]
        layer_mults.append(k * k * c_in * f_out * s * s * batch)
        c_in = f_out
    head_in = shapes["head.weight"][1]
    layer_mults.append(head_in * cfg.n_way * batch)

    head = head_in * cfg.n_way + cfg.n_way
    c_in = cfg.in_channels
    acu_count = 0
    for i in range(cfg.n_modules):
        acu_count += z[i] * (c_in * k * k) + 3 * z[i]
        c_in = F + z[i]
    if mode == "fomaml":
        trainable = sum(int(np.prod(s)) for s in shapes.values())
    elif mode == "anil":
        trainable = head
    elif mode == "mac":
        trainable = head + acu_count
    else:
        if cfg.n_modules < 6:
            raise ConfigurationError("mac_deep cost mode needs the deep6 variant")
        # modules 5 and 6 are fully trainable; do not double count their ACU rows
        extra = 0
        for i in (5, 6):
            extra += sum(int(np.prod(shapes[f"{p}{i}.{q}"]))
                         for p, q in (("conv", "weight"), ("conv", "bias"), ("bn", "gamma"), ("bn", "beta")))
        c_in = cfg.in_channels
        acu_first4 = 0
        for i in range(4):
            acu_first4 += z[i] * (c_in * k * k) + 3 * z[i]
            c_in = F + z[i]
        trainable = head + acu_first4 + extra
    return CostEstimate(int(sum(layer_mults)), int(trainable), layer_mults, mode)


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Parameter count of an unwidened model, in closed form."""
    k, F, C = cfg.kernel, cfg.base_filters, cfg.in_channels
    n = cfg.n_modules
    conv = (k * k * C * F + F) + (n - 1) * (k * k * F * F + F)
    bn = 2 * F * n
    last = feature_sizes(cfg)[-1]
    head = cfg.n_way * F * last * last + cfg.n_way
    return conv + bn + head


def replace_config(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
