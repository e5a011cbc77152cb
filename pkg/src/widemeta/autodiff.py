"""Dense tensors with first-order reverse-mode differentiation.

Operations append records to the active :class:`Tape` (if one is open and any
input participates in differentiation).  :func:`backward` walks the tape in
reverse exactly once and returns gradients keyed by parameter name.

    with Tape():
        loss = softmax_cross_entropy(affine(x, W, b), labels)
    grads = backward(loss)
"""
from __future__ import annotations

import threading
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer or model configuration cannot produce a valid result."""


class DegenerateBatchError(ValueError):
    """Too few values per channel to define a batch variance."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    ``name`` identifies trainable leaves in the returned gradient map.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_state = threading.local()


class Tape:
    """Ordered log of operations for one forward pass.

    Open it as a context manager around the forward computation.  A tape is
    consumed by a single :func:`backward` call.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        for t in inputs:
            if t._tape is not None and t._tape is not tape:
                raise ContractError("operand belongs to a different tape")
        out._tape = tape
        tape.records.append(_Record(tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# elementwise helpers
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record((a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _record((a,), a.data * c, lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    return _record((a,), np.asarray(a.data.sum(), dtype=a.dtype),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``out[b, o] = sum_i W[o, i] * x[b, i] + b[o]``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1 \
            or x.shape[1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise DimensionError(
            f"affine: x {x.shape} incompatible with W {W.shape} / b {b.shape}")
    out = (_acc(x.data) @ _acc(W.data).T + b.data).astype(x.dtype, copy=False)

    def backward_fn(g):
        return g @ W.data, g.T @ x.data, g.sum(axis=0)

    return _record((x, W, b), out, backward_fn)


def _acc(a: np.ndarray) -> np.ndarray:
    # Forward products accumulate in float64 and round once to the storage
    # dtype, so results do not depend on BLAS blocking of the reduction axis.
    return a.astype(np.float64, copy=False)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded input B×C×Hp×Wp  ->  (B·ho·wo) × (C·k·k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    B, C = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, C * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding (im2col + one matrix product)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape}, {w.shape}")
    B, C, H, W_ = x.shape
    F, Cw, k, k2 = w.shape
    if Cw != C or k != k2 or b.shape != (F,):
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size {k} must be odd")
    ho = conv_output_size(H, k, stride, padding)
    wo = conv_output_size(W_, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"conv2d: output size {ho}x{wo} from input {H}x{W_}, k={k}, stride={stride}, padding={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(F, -1)
    out = (_acc(cols) @ _acc(wmat).T + b.data).astype(x.dtype, copy=False)
    out = out.reshape(B, ho, wo, F).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (gmat.T @ cols).reshape(w.shape) if w.tracked else None
        gb = gmat.sum(axis=0)
        gx = None
        if x.tracked:
            gcols = (gmat @ wmat).reshape(B, ho, wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W_] if padding else gxp
        return gx, gw, gb

    return _record((x, w, b), np.ascontiguousarray(out), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _record((x,), out, lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Per-channel standardization with the current batch's statistics."""
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    B, C, H, W_ = x.shape
    m = B * H * W_
    if m < 2:
        raise DegenerateBatchError(f"batchnorm2d: {m} value(s) per channel, need at least 2")
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.data.reshape(1, C, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

    def backward_fn(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.tracked:
            gxhat = g * g4
            gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return _record((x, gamma, beta), out.astype(x.dtype, copy=False), backward_fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, N = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= N):
        raise IndexError(f"label out of range [0, {N}): {labels.tolist()}")
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def backward_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B)).astype(logits.dtype, copy=False),

    return _record((logits,), np.asarray(loss, dtype=logits.dtype), backward_fn)


# ---------------------------------------------------------------------------
# differentiation and updates
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse pass over ``loss``'s tape.

    Returns a map from parameter name to gradient array for every named leaf
    with ``requires_grad``.  When ``params`` is given, every trainable entry of
    it appears in the result (zeros if ``loss`` does not depend on it).
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    grads: dict[str, np.ndarray] = {}
    if tape is not None:
        if tape.consumed:
            raise ContractError("tape already consumed by a previous backward()")
        tape.consumed = True
        adj: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        for rec in reversed(tape.records):
            g = adj.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward_fn(g)):
                if gi is None or not t.tracked:
                    continue
                key = id(t)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
                if t._tape is None and t.requires_grad and t.name is not None:
                    grads[t.name] = adj[key]
        tape.records.clear()
        for name, g in grads.items():
            grads[name] = np.asarray(g)
    if params is not None:
        out = {}
        for name, p in params.items():
            if not p.requires_grad:
                continue
            g = grads.get(name)
            out[name] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False).reshape(p.shape)
        return out
    return grads


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
             mask: Mapping[str, np.ndarray] | None = None) -> dict[str, Tensor]:
    """``p <- p - lr * (g * mask)``; returns a new parameter map.

    Parameters with no gradient entry, or with an all-zero mask, are passed
    through as the same objects.
    """
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"sgd_step: gradient {g.shape} vs parameter {name} {p.shape}")
        m = None if mask is None else mask.get(name)
        if m is not None:
            m = np.asarray(m)
            if m.shape != p.shape:
                raise DimensionError(f"sgd_step: mask {m.shape} vs parameter {name} {p.shape}")
            if not m.any():
                out[name] = p
                continue
            g = g * m
        new = Tensor((p.data - lr * g).astype(p.dtype, copy=False), requires_grad=p.requires_grad, name=p.name)
        if m is not None:
            # frozen coordinates keep their exact bits even where lr*0 would flip -0.0
            new.data = np.where(m.astype(bool), new.data, p.data)
        out[name] = new
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``p`` (evaluated in float64)."""
    p = np.array(p, dtype=np.float64)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(p))
        flat[i] = orig - eps
        fm = float(f(p))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
