"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations execute eagerly on numpy arrays and record themselves onto a
:class:`Tape`; creation order is topological order, so the backward sweep
visits each node exactly once in reverse.  The operation set is the minimal
closure needed by the encoders, discriminators and losses in this package:
embedding lookup, same-padded 1-D convolution, masked/piecewise max-pooling,
tanh/relu/sigmoid/log/exp, affine maps, softmax, elementwise arithmetic,
sum/mean reductions, gradient reversal, inverted dropout and clamping.

All computation is in 64-bit reals so that central finite differences
(:func:`grad_check`) agree with analytic gradients to tight tolerances.
"""

from __future__ import annotations

import struct

import numpy as np


class DiffcoreError(Exception):
    """Base class for tape and shape errors."""


class ShapeError(DiffcoreError):
    pass


class NonFiniteError(DiffcoreError):
    pass


class Tape:
    """Ordered record of executed operations.

    A tape is single-threaded: build a fresh one per forward pass.  Distinct
    tapes over disjoint ParamStores may run concurrently.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _register(self, t: "Tensor") -> int:
        nid = len(self.nodes)
        self.nodes.append(t)
        return nid

    def backward(self, output: "Tensor", seed=None) -> None:
        """Propagate d(output)/d(node), contracted with ``seed``, to all nodes.

        ``seed`` defaults to ones of the output's shape.  Raises if the tape
        has not been run (no nodes) or the seed shape mismatches.
        """
        if not self.nodes:
            raise DiffcoreError("backward before forward: tape has no nodes")
        if output.tape is not self:
            raise DiffcoreError("output tensor does not belong to this tape")
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} != output shape {output.data.shape}")
        for node in self.nodes:
            node.grad = None
        output.grad = seed.copy()
        for node in reversed(self.nodes[: output.nid + 1]):
            if node.grad is None or node._bwd is None:
                continue
            node._bwd(node.grad)


class Tensor:
    """One tape node: a float64 array plus its backward rule."""

    __slots__ = ("data", "grad", "tape", "nid", "_bwd", "op")

    def __init__(self, data, tape: Tape, bwd=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.tape = tape
        self._bwd = bwd
        self.op = op
        self.nid = tape._register(self)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value at node {self.nid} (op={op})")

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(nid={self.nid}, op={self.op}, shape={self.data.shape})"

    # operator sugar; scalars and arrays are promoted to constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.tape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.tape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.tape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.tape))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.tape), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.tape))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.tape), self)

    def __neg__(self):
        return neg(self)


class ParamStore:
    """Named registry of trainable arrays with same-shaped gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise DiffcoreError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite initial value for parameter {name!r}")
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return sorted(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ShapeError(
                f"parameter {name!r}: shape {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr.copy()

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self._values[name].copy())
        return out

    def copy_from(self, other: "ParamStore") -> None:
        """Overwrite values with ``other``'s (shapes and names must match)."""
        if self.names() != other.names():
            raise DiffcoreError("parameter name sets differ")
        for name in self.names():
            self.set_value(name, other.value(name))

    def tensor(self, tape: Tape, name: str) -> Tensor:
        """Leaf node whose backward accumulates into this store's grad slot."""
        value = self._values[name]
        slot = self._grads[name]

        def bwd(g):
            slot[...] += g

        return Tensor(value, tape, bwd=bwd, op=f"param:{name}")

    # -- checkpoint format: per entry (sorted by name), u32 name length,
    #    utf-8 name, u32 ndim, u32 dims, float64 little-endian payload.
    MAGIC = b"RLPS0001"

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<I", len(self._values)))
            for name in self.names():
                arr = self._values[name]
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            magic = fh.read(len(cls.MAGIC))
            if magic != cls.MAGIC:
                raise DiffcoreError(f"{path}: not a parameter checkpoint")
            (count,) = struct.unpack("<I", fh.read(4))
            for _ in range(count):
                (nlen,) = struct.unpack("<I", fh.read(4))
                name = fh.read(nlen).decode("utf-8")
                (ndim,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
                n = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
                store.add(name, data)
        return store


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise DiffcoreError("cannot mix tensors from different tapes")
        return x
    return constant(tape, x)


def constant(tape: Tape, value) -> Tensor:
    """Leaf with no gradient sink (weights, masks, labels as data)."""
    return Tensor(value, tape, bwd=None, op="const")


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, a.tape, bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, a.tape, bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, a.tape, bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, a.tape, bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return Tensor(-a.data, a.tape, bwd, "neg")


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return Tensor(out_data, a.tape, bwd, "tanh")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return Tensor(out_data, a.tape, bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for stability; exact at float64
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return Tensor(out_data, a.tape, bwd, "sigmoid")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)  # non-finite results raise in Tensor()

    def bwd(g):
        _accum(a, g / a.data)

    return Tensor(out_data, a.tape, bwd, "log")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return Tensor(out_data, a.tape, bwd, "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only where not clipped."""
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, g * inside)

    return Tensor(out_data, a.tape, bwd, "clamp")


# ---------------------------------------------------------------------------
# linear algebra and structured ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(out_data, a.tape, bwd, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for a batch of row vectors."""
    return add(matmul(x, w), b)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors, as a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot {a.data.shape} . {b.data.shape}")
    out_data = np.dot(a.data, b.data)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor(out_data, a.tape, bwd, "dot")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids of any integer shape S yields shape S + (width,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}")
    out_data = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        _accum(table, dt)

    return Tensor(out_data, table.tape, bwd, "embedding")


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 1-D convolution over position axis.

    x: (B, L, W) input, kernel: (C, k, W) with odd k, bias: (C,).
    Returns (B, L, C).  Positions outside [0, L) contribute zeros.
    """
    B, L, W = x.data.shape
    C, k, W2 = kernel.data.shape
    if W != W2:
        raise ShapeError(f"conv input width {W} != kernel width {W2}")
    if k % 2 != 1:
        raise ShapeError(f"kernel size {k} must be odd")
    if L < 1:
        raise ShapeError("sequence shorter than 1")
    pad = k // 2
    xp = np.zeros((B, L + 2 * pad, W))
    xp[:, pad:pad + L, :] = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B,L,W,k)
    out_data = np.einsum("blwk,ckw->blc", win, kernel.data) + bias.data

    def bwd(g):
        _accum(kernel, np.einsum("blwk,blc->ckw", win, g))
        _accum(bias, g.sum(axis=(0, 1)))
        dxp = np.zeros_like(xp)
        for t in range(k):
            dxp[:, t:t + L, :] += np.einsum("blc,cw->blw", g, kernel.data[:, t, :])
        _accum(x, dxp[:, pad:pad + L, :])

    return Tensor(out_data, x.tape, bwd, "conv1d")


_NEG = -1e300  # sentinel for masked-out positions in max pooling


def masked_maxpool(x: Tensor, mask) -> Tensor:
    """Per-channel max over positions where mask is true.

    x: (B, L, C), mask: bool (B, L).  Rows whose mask is empty pool to 0 and
    receive no gradient.  Gradient routes to the first position attaining
    the max.
    """
    B, L, C = x.data.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, L):
        raise ShapeError(f"mask shape {mask.shape} != {(B, L)}")
    masked = np.where(mask[:, :, None], x.data, _NEG)
    arg = masked.argmax(axis=1)  # (B, C)
    any_valid = mask.any(axis=1)  # (B,)
    raw = np.take_along_axis(masked, arg[:, None, :], axis=1)[:, 0, :]
    out_data = np.where(any_valid[:, None], raw, 0.0)

    def bwd(g):
        dx = np.zeros_like(x.data)
        gv = np.where(any_valid[:, None], g, 0.0)
        np.put_along_axis(dx, arg[:, None, :], gv[:, None, :], axis=1)
        _accum(x, dx)

    return Tensor(out_data, x.tape, bwd, "maxpool")


def piecewise_maxpool(x: Tensor, p1, p2, lengths) -> Tensor:
    """Three-way segment max pooling: [0, p1], (p1, p2], (p2, length).

    x: (B, L, C); p1, p2, lengths: int arrays (B,).  Empty segments pool to
    0.  Returns (B, 3C) with segments concatenated in order.
    """
    B, L, C = x.data.shape
    pos = np.arange(L)[None, :]
    p1 = np.asarray(p1)[:, None]
    p2 = np.asarray(p2)[:, None]
    ln = np.asarray(lengths)[:, None]
    valid = pos < ln
    seg_masks = [
        (pos <= p1) & valid,
        (pos > p1) & (pos <= p2) & valid,
        (pos > p2) & valid,
    ]
    pieces = [masked_maxpool(x, m) for m in seg_masks]
    return concat(pieces, axis=1)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tape = tensors[0].tape
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return Tensor(out_data, tape, bwd, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(out_data, a.tape, bwd, "reshape")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis (max-shifted, exact at float64)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - inner))

    return Tensor(out_data, a.tape, bwd, "softmax")


def take_rows(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor; returns shape (B,)."""
    idx = np.asarray(idx)
    B = a.data.shape[0]
    out_data = a.data[np.arange(B), idx]

    def bwd(g):
        da = np.zeros_like(a.data)
        da[np.arange(B), idx] = g
        _accum(a, da)

    return Tensor(out_data, a.tape, bwd, "take_rows")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, a.tape, bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims),
               constant(a.tape, 1.0 / n))


def grl(a: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, backward scales by exactly -lam."""
    if lam < 0:
        raise DiffcoreError(f"gradient reversal coefficient must be >= 0, got {lam}")

    def bwd(g):
        _accum(a, (-lam) * g)

    return Tensor(a.data.copy(), a.tape, bwd, "grl")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None,
            train: bool) -> Tensor:
    """Inverted dropout; identity when train is false or rate is 0."""
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise DiffcoreError("dropout in training mode requires an rng")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        _accum(a, g * keep)

    return Tensor(a.data * keep, a.tape, bwd, "dropout")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(build, params: ParamStore, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` re-executes the (deterministic, dropout-free) graph from the
    current values in ``params`` and returns its scalar output tensor; it is
    called twice per parameter entry with perturbed values.  The relative
    error is |analytic - numeric| / max(1e-12, |analytic| + |numeric|),
    maximized over every entry of every parameter.
    """
    out = build()
    if out.data.shape != ():
        raise ShapeError(f"grad_check needs a scalar output, got {out.data.shape}")
    params.zero_grads()
    out.tape.backward(out)
    analytic = {name: params.grad(name).copy() for name in params.names()}
    worst = 0.0
    for name in params.names():
        value = params.value(name)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(build().data)
            flat[i] = orig - epsilon
            f_minus = float(build().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
