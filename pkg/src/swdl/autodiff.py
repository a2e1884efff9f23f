"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tensor` records the node that produced it (parents plus a
backward closure). ``Tensor.backward`` walks the recorded graph in reverse
topological order, visiting every node once. The operator set is closed:
3D convolution and its stride-k transpose, relu, channel softmax, add,
scale, batch slicing and the separable resampling/smoothing operators used
by the pyramid. Loss modules define their own fused nodes through
:meth:`Tensor.from_op`.
"""
from __future__ import annotations

import contextlib
import json
import struct
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import volume as vk
from .errors import ArgumentError, ParseError, StateError

# -- global precision -----------------------------------------------------

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


def set_precision(mode: str) -> None:
    """Select 'float32' (training) or 'float64' (verification) globally."""
    global _DTYPE
    if mode not in ("float32", "float64"):
        raise ArgumentError(f"unknown precision {mode!r}")
    _DTYPE = np.dtype(mode).type


@contextlib.contextmanager
def precision(mode: str):
    old = np.dtype(_DTYPE).name
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


# -- op-count instrumentation ----------------------------------------------

_counter: Counter | None = None
_tags: list[str] = []


@contextlib.contextmanager
def count_ops():
    """Count every executed op as ``'<tag>/<op>'`` while the block runs."""
    global _counter
    old, _counter = _counter, Counter()
    try:
        yield _counter
    finally:
        _counter = old


@contextlib.contextmanager
def op_scope(tag: str):
    _tags.append(tag)
    try:
        yield
    finally:
        _tags.pop()


def record(op: str) -> None:
    if _counter is not None:
        _counter[f"{'.'.join(_tags) or 'root'}/{op}"] += 1


# -- tensors ----------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data, parents, backward, op: str) -> "Tensor":
        """Create a node. ``backward(g)`` returns one gradient per parent (or None)."""
        record(op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if not np.all(np.isfinite(data)):
            raise StateError(f"non-finite values produced by {op}")
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, a):
        if isinstance(a, Tensor):
            raise ArgumentError("only scalar multiplication is supported")
        return scale(self, a)

    __rmul__ = __mul__

    def backward(self) -> None:
        if self.data.size != 1:
            raise ArgumentError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g.astype(p.data.dtype, copy=False) if p.grad is None else p.grad + g
            # interior grads are not needed once routed to the parents
            node.grad = None
            node._backward = None
            node._parents = ()


class Parameter(Tensor):
    """A trainable leaf with its own SGD momentum buffer."""

    __slots__ = ("momentum", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.momentum = np.zeros_like(self.data)
        self.name = name


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise and routing ops ----------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ArgumentError(f"add shape mismatch {x.shape} vs {y.shape}")
    return Tensor.from_op(x.data + y.data, (x, y), lambda g: (g, g), "add")


def scale(x: Tensor, a: float) -> Tensor:
    a = float(a)
    return Tensor.from_op(x.data * x.data.dtype.type(a), (x,), lambda g: (g * g.dtype.type(a),), "scale")


class _MaskTape:
    """ReLU active sets recorded on one pass and replayed, in call order, on later passes."""

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.pos = 0
        self.recording = True

    def rewind(self) -> None:
        self.recording, self.pos = False, 0

    def next(self, pos: np.ndarray) -> np.ndarray:
        if self.recording:
            self.masks.append(pos)
            return pos
        if self.pos >= len(self.masks) or self.masks[self.pos].shape != pos.shape:
            raise StateError("replayed computation diverged from the recorded one")
        pos = self.masks[self.pos]
        self.pos += 1
        return pos


_relu_tape: _MaskTape | None = None


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    if _relu_tape is not None:
        pos = _relu_tape.next(pos)
    return Tensor.from_op(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,), "relu")


def softmax_channel(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(s, (x,), backward, "softmax")


def take(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the batch axis."""
    n = x.shape[0]

    def backward(g):
        full = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return Tensor.from_op(x.data[start:stop].copy(), (x,), backward, "take")


def concat_batch(xs: Sequence[Tensor]) -> Tensor:
    sizes = np.cumsum([0] + [t.shape[0] for t in xs])

    def backward(g):
        return tuple(g[a:b] for a, b in zip(sizes[:-1], sizes[1:]))

    return Tensor.from_op(np.concatenate([t.data for t in xs]), tuple(xs), backward, "concat")


def inner(x: Tensor, c) -> Tensor:
    """Scalar <x, c> against a constant array; turns any op into a scalar probe."""
    c = np.asarray(c, dtype=x.data.dtype)
    if c.shape != x.shape:
        raise ArgumentError(f"inner shape mismatch {x.shape} vs {c.shape}")
    return Tensor.from_op(np.array(np.vdot(x.data, c), dtype=x.data.dtype), (x,), lambda g: (g * c,), "inner")


# -- separable linear grid ops (pyramid building blocks) ---------------------

def _separable_node(x: Tensor, mats, op: str) -> Tensor:
    mats = [m.astype(x.data.dtype) for m in mats]
    mats_t = [np.ascontiguousarray(m.T) for m in mats]
    out = vk.apply_separable(x.data, mats)
    return Tensor.from_op(out, (x,), lambda g: (vk.apply_separable(g, mats_t),), op)


def resample(x: Tensor, target_shape) -> Tensor:
    """Trilinear resampling of the last three axes (half-pixel centers)."""
    target_shape = tuple(int(n) for n in target_shape)
    if tuple(x.shape[-3:]) == target_shape:
        return x
    mats = [vk.resample_matrix(a, b) for a, b in zip(x.shape[-3:], target_shape)]
    return _separable_node(x, mats, "resample")


def smooth(x: Tensor, kernel: vk.GaussianKernel = vk.DEFAULT_KERNEL) -> Tensor:
    kernel.validate()
    mats = [vk.smooth_matrix(n, kernel.taps) for n in x.shape[-3:]]
    return _separable_node(x, mats, "smooth")


# -- convolutions ---------------------------------------------------------

_COL_CACHE_BYTES = 64 * 2 ** 20


def _triple(v) -> tuple[int, int, int]:
    return (v, v, v) if np.isscalar(v) else tuple(int(a) for a in v)


def _im2col(xp: np.ndarray, k, s, out_sp) -> np.ndarray:
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, :: s[0], :: s[1], :: s[2]][:, :, : out_sp[0], : out_sp[1], : out_sp[2]]
    c = xp.shape[1]
    # rows ordered (c, kd, kh, kw) to match w.reshape(O, -1)
    return win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(c * k[0] * k[1] * k[2], -1)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of (N, C, D, H, W) with weights (O, C, kd, kh, kw)."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ArgumentError("conv3d expects rank-5 input and weight")
    n, c, *sp = x.shape
    o, ci, *k = w.shape
    if ci != c:
        raise ArgumentError(f"conv3d channel mismatch: input {c}, weight {ci}")
    if b is not None and b.shape != (o,):
        raise ArgumentError(f"conv3d bias shape {b.shape} != ({o},)")
    s, p = _triple(stride), _triple(padding)
    out_sp = tuple((a + 2 * pp - kk) // ss + 1 for a, pp, kk, ss in zip(sp, p, k, s))
    if min(out_sp) < 1:
        raise ArgumentError(f"conv3d output would be empty for input {tuple(sp)}")
    wm = w.data.reshape(o, -1)
    pointwise = tuple(k) == (1, 1, 1) and s == (1, 1, 1) and p == (0, 0, 0)

    def columns():
        if pointwise:
            return x.data.transpose(1, 0, 2, 3, 4).reshape(c, -1)
        xp = np.pad(x.data, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
        return _im2col(xp, k, s, out_sp)

    cols = columns()
    y = wm @ cols
    # keep the column matrix for backward unless it is large
    if cols.nbytes > _COL_CACHE_BYTES:
        cols = None
    if b is not None:
        y += b.data[:, None]
    out = np.ascontiguousarray(y.reshape((o, n) + out_sp).transpose(1, 0, 2, 3, 4))

    def backward(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(o, -1)
        gw = gb = gx = None
        if w.requires_grad:
            gw = (gm @ (columns() if cols is None else cols).T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            gcol = (wm.T @ gm).reshape((c,) + tuple(k) + (n,) + out_sp)
            if pointwise:
                gx = np.ascontiguousarray(gcol.reshape((c, n) + out_sp).transpose(1, 0, 2, 3, 4))
            else:
                padded = [a + 2 * pp for a, pp in zip(sp, p)]
                gxp = np.zeros((n, c, *padded), dtype=g.dtype)
                for i in range(k[0]):
                    for j in range(k[1]):
                        for l in range(k[2]):
                            gxp[:, :,
                                i: i + s[0] * out_sp[0]: s[0],
                                j: j + s[1] * out_sp[1]: s[1],
                                l: l + s[2] * out_sp[2]: s[2]] += gcol[:, i, j, l].transpose(1, 0, 2, 3, 4)
                gx = gxp[:, :, p[0]: p[0] + sp[0], p[1]: p[1] + sp[1], p[2]: p[2] + sp[2]]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transpose of a stride-k, kernel-k, unpadded conv3d.

    ``w`` has shape (C_in, C_out, k, k, k); spatial dims grow by ``stride``.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ArgumentError("conv_transpose3d expects rank-5 input and weight")
    n, c, d, h, wd = x.shape
    ci, o, *k = w.shape
    if ci != c:
        raise ArgumentError(f"conv_transpose3d channel mismatch: input {c}, weight {ci}")
    if tuple(k) != (stride,) * 3:
        raise ArgumentError("conv_transpose3d supports kernel size == stride only")
    if b is not None and b.shape != (o,):
        raise ArgumentError(f"conv_transpose3d bias shape {b.shape} != ({o},)")
    kk = stride
    xm = x.data.transpose(1, 0, 2, 3, 4).reshape(c, -1)
    wm = w.data.reshape(c, -1)
    y = (wm.T @ xm).reshape(o, kk, kk, kk, n, d, h, wd)
    out = y.transpose(4, 0, 5, 1, 6, 2, 7, 3).reshape(n, o, d * kk, h * kk, wd * kk)
    if b is not None:
        out = out + b.data[None, :, None, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gy = g.reshape(n, o, d, kk, h, kk, wd, kk).transpose(1, 3, 5, 7, 0, 2, 4, 6).reshape(o * kk ** 3, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wm @ gy).reshape(c, n, d, h, wd).transpose(1, 0, 2, 3, 4))
        if w.requires_grad:
            gw = (xm @ gy.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward, "conv_transpose3d")


# -- optimizer ----------------------------------------------------------------

def sgd_step(params: Iterable[Parameter], lr: float = 0.01, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """g = grad + wd*w;  buf = momentum*buf + g;  w -= lr*buf;  then clear grads."""
    params = list(params)
    for prm in params:
        if prm.grad is None:
            raise StateError(f"parameter {prm.name or '?'} has no gradient")
    for prm in params:
        dt = prm.data.dtype.type
        g = prm.grad + dt(weight_decay) * prm.data
        prm.momentum *= dt(momentum)
        prm.momentum += g
        prm.data -= dt(lr) * prm.momentum
        prm.grad = None


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- finite-difference verification ------------------------------------------

def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               n_coords: int = 32, seed: int = 0, floor: float = 1e-6,
               freeze_relu: bool = False) -> float:
    """Max relative error between backprop and central differences.

    ``f`` recomputes the scalar output from the current contents of
    ``inputs``. ``max(n_coords, 32)`` coordinates are drawn at random across
    all inputs (all of them when there are fewer). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.

    With ``freeze_relu`` every relu keeps the active set it had at the
    unperturbed point, so the differences are taken on the same linear
    piece that backprop differentiates. Deep nets have so many units that
    a step of ``eps`` almost always flips a few of them.
    """
    global _relu_tape
    if freeze_relu:
        old, _relu_tape = _relu_tape, _MaskTape()
        try:
            return grad_check(f, inputs, eps, n_coords, seed, floor)
        finally:
            _relu_tape = old
    for t in inputs:
        if t.data.dtype != np.float64:
            raise StateError("grad_check requires float64 tensors")
    out = f()
    if out.data.size != 1:
        raise ArgumentError("grad_check needs a scalar-valued function")
    tape = _relu_tape
    for t in inputs:
        t.grad = None
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.data.size)]
    rng = np.random.default_rng(seed)
    k = max(n_coords, 32)
    if len(coords) > k:
        pick = rng.choice(len(coords), size=k, replace=False)
        coords = [coords[q] for q in sorted(pick)]
    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            if tape is not None:
                tape.rewind()
            fp = float(f().data)
            flat[j] = orig - eps
            if tape is not None:
                tape.rewind()
            fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    for t in inputs:
        t.grad = None
    return worst


# -- checkpoints --------------------------------------------------------------
#
# Little-endian layout:
#   magic b"SWDLCKPT" | u32 version | u32 meta_len | meta (UTF-8 JSON)
#   u32 blob_count, then per blob:
#   u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64) | u8 ndim | u32 dims[ndim] | raw data

CKPT_MAGIC = b"SWDLCKPT"
CKPT_VERSION = 1
_DT_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DT_FROM_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_checkpoint(blobs: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_b)), meta_b,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DT_CODES:
            raise ArgumentError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DT_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(buf)
    pos = 0

    def take_bytes(nbytes):
        nonlocal pos
        if pos + nbytes > len(view):
            raise ParseError("truncated checkpoint")
        chunk = view[pos: pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take_bytes(8)) != CKPT_MAGIC:
        raise ParseError("not a swdl checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take_bytes(8))
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(bytes(take_bytes(meta_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint metadata is not valid JSON: {exc}") from exc
    (count,) = struct.unpack("<I", take_bytes(4))
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take_bytes(2))
        try:
            name = bytes(take_bytes(nlen)).decode()
        except UnicodeDecodeError as exc:
            raise ParseError("checkpoint blob name is not UTF-8") from exc
        code, ndim = struct.unpack("<BB", take_bytes(2))
        if code not in _DT_FROM_CODE:
            raise ParseError(f"bad dtype code {code} for {name}")
        dims = struct.unpack(f"<{ndim}I", take_bytes(4 * ndim))
        dt = _DT_FROM_CODE[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        blobs[name] = np.frombuffer(bytes(take_bytes(size)), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise ParseError("trailing bytes after checkpoint")
    return blobs, meta
