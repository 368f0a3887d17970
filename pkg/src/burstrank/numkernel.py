"""Minimal dense numeric kernel.

Float64 tensors, the handful of layer primitives the ranking heads need,
reverse-mode gradients on an explicit tape, SGD with momentum and weight
decay, a finite-difference gradient checker, and the BRK1 checkpoint format.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError, NumericFault

CHECKPOINT_MAGIC = b"BRK1"
CHECKPOINT_VERSION = 1


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericFault(f"non-finite values in output of {op}")


class Tensor:
    """A float64 array plus an optional tape node id."""

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: int | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node={self.node})"


class Parameter:
    """A trainable value with its gradient and momentum buffer.

    The three arrays always share one shape.
    """

    __slots__ = ("name", "value", "grad", "momentum")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Records primitive ops in execution order for reverse-mode backprop.

    A tape is single-threaded. Backward visits nodes in exact reverse
    execution order and accumulates gradients into the Parameters it
    encounters (optionally restricted to an allowed set, which is how
    frozen networks are kept frozen).
    """

    def __init__(self):
        # node = (parent_ids, vjp, param); leaves have vjp=None.
        self._nodes: list[tuple[tuple, Callable | None, Parameter | None]] = []
        self._param_ids: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, param: Parameter) -> int:
        nid = self._param_ids.get(id(param))
        if nid is None:
            self._nodes.append(((), None, param))
            nid = len(self._nodes) - 1
            self._param_ids[id(param)] = nid
        return nid

    def record(self, parents: Sequence[int | None], vjp: Callable) -> int:
        self._nodes.append((tuple(parents), vjp, None))
        return len(self._nodes) - 1

    def backward(self, loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
        """Accumulate d(loss)/d(param) into .grad for each reachable Parameter.

        When `params` is given, only those parameters receive gradient;
        all others are left bit-identical (frozen-network contract).
        """
        if loss.node is None:
            raise InputError("loss tensor was not recorded on this tape")
        allowed = None if params is None else {id(p) for p in params}
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for nid in range(len(self._nodes) - 1, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            parents, vjp, param = self._nodes[nid]
            if param is not None:
                if allowed is None or id(param) in allowed:
                    param.grad += g
                continue
            for pid, pg in zip(parents, vjp(g)):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg


def _coerce(tape: Tape | None, x) -> tuple[np.ndarray, int | None]:
    """Turn a Tensor/Parameter/array-like into (float64 array, node id)."""
    if isinstance(x, Parameter):
        return x.value, (tape.leaf(x) if tape is not None else None)
    if isinstance(x, Tensor):
        return x.data, x.node
    return np.asarray(x, dtype=np.float64), None


def _result(tape: Tape | None, op: str, out: np.ndarray,
            parents: Sequence[int | None], vjp: Callable) -> Tensor:
    _check_finite(op, out)
    if tape is not None and any(p is not None for p in parents):
        return Tensor(out, tape.record(parents, vjp))
    return Tensor(out)


def pointwise_conv(tape: Tape | None, x, weights, bias) -> Tensor:
    """1x1 convolution: out[k,h,w] = sum_c weights[k,c]*x[c,h,w] + bias[k]."""
    xd, xn = _coerce(tape, x)
    wd, wn = _coerce(tape, weights)
    bd, bn = _coerce(tape, bias)
    if xd.ndim != 3 or wd.ndim != 2 or bd.ndim != 1:
        raise InputError("pointwise_conv expects x:(C,H,W), weights:(K,C), bias:(K,)")
    c, h, w = xd.shape
    k = wd.shape[0]
    if wd.shape[1] != c or bd.shape[0] != k:
        raise InputError(
            f"pointwise_conv shape mismatch: x has {c} channels, "
            f"weights {wd.shape}, bias {bd.shape}")
    x2 = xd.reshape(c, h * w)
    out = (wd @ x2 + bd[:, None]).reshape(k, h, w)

    def vjp(g: np.ndarray):
        g2 = g.reshape(k, h * w)
        gx = (wd.T @ g2).reshape(c, h, w) if xn is not None else None
        gw = g2 @ x2.T if wn is not None else None
        gb = g2.sum(axis=1) if bn is not None else None
        return gx, gw, gb

    return _result(tape, "pointwise_conv", out, (xn, wn, bn), vjp)


def relu(tape: Tape | None, x) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    xd, xn = _coerce(tape, x)
    out = np.maximum(xd, 0.0)
    mask = xd > 0
    return _result(tape, "relu", out, (xn,), lambda g: (g * mask,))


def global_avg_pool(tape: Tape | None, x) -> Tensor:
    """Mean over the spatial dims of a (C,H,W) tensor."""
    xd, xn = _coerce(tape, x)
    if xd.ndim != 3:
        raise InputError("global_avg_pool expects a (C,H,W) tensor")
    c, h, w = xd.shape
    out = xd.reshape(c, h * w).mean(axis=1)
    inv = 1.0 / (h * w)

    def vjp(g: np.ndarray):
        return (np.broadcast_to((g * inv)[:, None, None], (c, h, w)).copy(),)

    return _result(tape, "global_avg_pool", out, (xn,), vjp)


def dense(tape: Tape | None, x, weights, bias) -> Tensor:
    """Affine map: out = weights @ x + bias."""
    xd, xn = _coerce(tape, x)
    wd, wn = _coerce(tape, weights)
    bd, bn = _coerce(tape, bias)
    if xd.ndim != 1 or wd.ndim != 2:
        raise InputError("dense expects x:(N,), weights:(M,N), bias:(M,)")
    if wd.shape[1] != xd.shape[0] or bd.shape[0] != wd.shape[0]:
        raise InputError(
            f"dense shape mismatch: x {xd.shape}, weights {wd.shape}, bias {bd.shape}")
    out = wd @ xd + bd

    def vjp(g: np.ndarray):
        gx = wd.T @ g if xn is not None else None
        gw = np.outer(g, xd) if wn is not None else None
        gb = g if bn is not None else None
        return gx, gw, gb

    return _result(tape, "dense", out, (xn, wn, bn), vjp)


def add(tape: Tape | None, a, b) -> Tensor:
    ad, an = _coerce(tape, a)
    bd, bn = _coerce(tape, b)
    if ad.shape != bd.shape:
        raise InputError(f"add shape mismatch: {ad.shape} vs {bd.shape}")
    return _result(tape, "add", ad + bd, (an, bn), lambda g: (g, g))


def sub(tape: Tape | None, a, b) -> Tensor:
    ad, an = _coerce(tape, a)
    bd, bn = _coerce(tape, b)
    if ad.shape != bd.shape:
        raise InputError(f"sub shape mismatch: {ad.shape} vs {bd.shape}")
    return _result(tape, "sub", ad - bd, (an, bn), lambda g: (g, -g))


def concat(tape: Tape | None, a, b) -> Tensor:
    """Concatenate two 1-D tensors."""
    ad, an = _coerce(tape, a)
    bd, bn = _coerce(tape, b)
    if ad.ndim != 1 or bd.ndim != 1:
        raise InputError("concat expects 1-D tensors")
    n = ad.shape[0]
    return _result(tape, "concat", np.concatenate([ad, bd]), (an, bn),
                   lambda g: (g[:n], g[n:]))


def absolute(tape: Tape | None, x) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    xd, xn = _coerce(tape, x)
    sign = np.sign(xd)
    return _result(tape, "absolute", np.abs(xd), (xn,), lambda g: (g * sign,))


def affine(tape: Tape | None, x, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with constant scalars."""
    xd, xn = _coerce(tape, x)
    return _result(tape, "affine", scale * xd + shift, (xn,),
                   lambda g: (g * scale,))


def total(tape: Tape | None, x) -> Tensor:
    """Sum of all entries, as a shape-(1,) tensor."""
    xd, xn = _coerce(tape, x)
    out = np.array([xd.sum()])

    def vjp(g: np.ndarray):
        return (np.full(xd.shape, g[0]),)

    return _result(tape, "total", out, (xn,), vjp)


def mean_all(tape: Tape | None, xs: Sequence) -> Tensor:
    """Mean of a non-empty list of shape-(1,) tensors, as one tape node."""
    if not xs:
        raise InputError("mean_all needs at least one term")
    coerced = [_coerce(tape, x) for x in xs]
    inv = 1.0 / len(coerced)
    out = np.array([sum(d[0] for d, _ in coerced) * inv])
    parents = tuple(n for _, n in coerced)

    def vjp(g: np.ndarray):
        return tuple(g * inv for _ in coerced)

    return _result(tape, "mean_all", out, parents, vjp)


def hinge(tape: Tape | None, margin: float, diff) -> Tensor:
    """max(0, margin - diff) on a shape-(1,) score difference."""
    return relu(tape, affine(tape, diff, -1.0, margin))


def sgd_step(params: Iterable[Parameter], lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0005) -> None:
    """Classic coupled SGD: buf <- m*buf + (grad + wd*value); value -= lr*buf.

    Gradients are zeroed afterwards.
    """
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericFault(f"non-finite gradient for parameter {p.name!r}")
        p.momentum *= momentum
        p.momentum += p.grad + weight_decay * p.value
        p.value -= lr * p.momentum
        p.zero_grad()


def grad_check(build_loss: Callable[[Tape | None], Tensor],
               params: Sequence[Parameter],
               eps: float = 1e-4) -> dict:
    """Compare tape gradients with central finite differences.

    `build_loss(tape)` must rebuild the same scalar loss from scratch on
    every call (on the given tape, or pure when tape is None). Returns a
    report with per-parameter and overall max relative error. Entries where
    both gradients are below 1e-7 count as exact agreement.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(build_loss(tape), params)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    per_param: dict[str, float] = {}
    for p in params:
        a = analytic[p.name]
        worst = 0.0
        flat = p.value.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = build_loss(None).item()
            flat[i] = orig - eps
            f_lo = build_loss(None).item()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            ai = a.reshape(-1)[i]
            denom = max(abs(ai), abs(numeric))
            rel = 0.0 if denom < 1e-7 else abs(ai - numeric) / denom
            worst = max(worst, rel)
        per_param[p.name] = worst
    max_rel = max(per_param.values()) if per_param else 0.0
    return {"max_rel_err": max_rel, "per_param": per_param}


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    """Write a named parameter table in the BRK1 binary format."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, arr in named.items():
        a = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(a).all():
            raise NumericFault(f"refusing to checkpoint non-finite parameter {name!r}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a BRK1 parameter table; exact round-trip of save_checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        ndim, = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        n_vals = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n_vals), dtype="<f8").reshape(shape).copy()
        if not np.isfinite(arr).all():
            raise FormatError(f"{path}: non-finite values in parameter {name!r}")
        named[name] = arr
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after parameter table")
    return named
