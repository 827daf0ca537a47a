"""Dense float arrays with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus the tape edges needed for backward(). Ops
record a vector-Jacobian closure; backward() walks the graph once in reverse
topological order. Everything runs in float64 by default (float32 available
through the dtype argument), single-threaded and bit-deterministic.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CompatibilityError, ConstructionError, ContractError, FormatError, ShapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = tuple(_parents)
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # graph-building sugar
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only where unclipped."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def swish(a: Tensor) -> Tensor:
    """swish(x) = x * sigmoid(x)."""
    s = _stable_sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


# ---------------------------------------------------------------------------
# structural kernels


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor(out, _parents=tuple(tensors), _vjp=vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, zero padding; x (B,C,H,W), w (O,C,KH,KW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape} and w {w.shape} must be rank 4")
    B, C, H, W = x.shape
    O, C2, KH, KW = w.shape
    if C != C2:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {C2}")
    s, p = int(stride), int(padding)
    OH = (H + 2 * p - KH) // s + 1
    OW = (W + 2 * p - KW) // s + 1
    if OH <= 0 or OW <= 0:
        raise ShapeError(f"conv2d: kernel {KH}x{KW} too large for input {H}x{W} (pad {p})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((B, O, OH, OW), dtype=x.data.dtype)
    for kh in range(KH):
        for kw in range(KW):
            xs = xp[:, :, kh : kh + s * OH : s, kw : kw + s * OW : s]
            out += np.moveaxis(np.tensordot(xs, w.data[:, :, kh, kw], axes=([1], [1])), 3, 1)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for kh in range(KH):
            for kw in range(KW):
                xs = xp[:, :, kh : kh + s * OH : s, kw : kw + s * OW : s]
                gw[:, :, kh, kw] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, kh : kh + s * OH : s, kw : kw + s * OW : s] += np.moveaxis(
                    np.tensordot(g, w.data[:, :, kh, kw], axes=([1], [0])), 3, 1
                )
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, gw

    return Tensor(out, _parents=(x, w), _vjp=vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C,1,1) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected rank 4, got {x.shape}")
    return tmean(x, axis=(2, 3), keepdims=True)


_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-aligned bilinear resampling."""
    key = (n_in, n_out)
    if key not in _INTERP_CACHE:
        pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m = np.zeros((n_out, n_in))
        np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
        _INTERP_CACHE[key] = m
    return _INTERP_CACHE[key]


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of (B,C,H,W) to (B,C,out_h,out_w)."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample: expected rank 4, got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    mr = _interp_matrix(H, out_h)
    mc = _interp_matrix(W, out_w)
    out = np.matmul(np.matmul(mr, x.data), mc.T)

    def vjp(g):
        return (np.matmul(np.matmul(mr.T, g), mc),)

    return Tensor(out, _parents=(x,), _vjp=vjp)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B,H,W); updates running stats in train mode."""
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected rank 4, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must be ({C},)")
    g4 = reshape(gamma, (1, C, 1, 1))
    b4 = reshape(beta, (1, C, 1, 1))
    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.data.reshape(C) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        norm = div(centered, sqrt(add(var, as_tensor(eps))))
    else:
        mu = Tensor(running_mean.reshape(1, C, 1, 1))
        sd = Tensor(np.sqrt(running_var.reshape(1, C, 1, 1) + eps))
        norm = div(sub(x, mu), sd)
    return add(mul(norm, g4), b4)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every tracked tensor reachable from the scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = []
    state = {}
    stack = [loss]
    while stack:
        node = stack[-1]
        st = state.get(id(node))
        if st is None:
            state[id(node)] = 0
            for p in node._parents:
                if state.get(id(p)) is None and (p.requires_grad or p._parents):
                    stack.append(p)
        elif st == 0:
            state[id(node)] = 1
            order.append(node)
            stack.pop()
        else:
            stack.pop()
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not (p.requires_grad or p._parents):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# parameter registry protocol


class Block:
    """Minimal composite-module protocol: own params/buffers plus named children."""

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def children(self) -> dict:
        return {}


def _walk(block: Block, prefix: str, out: dict, seen_ids: set, pick) -> None:
    for role, value in pick(block).items():
        name = f"{prefix}{role}" if prefix else role
        if name in out:
            raise ConstructionError(f"registry: duplicate name {name!r}")
        if id(value) in seen_ids:
            raise ConstructionError(f"registry: tensor aliased under two names (second: {name!r})")
        seen_ids.add(id(value))
        out[name] = value
    for child_name, child in block.children().items():
        _walk(child, f"{prefix}{child_name}.", out, seen_ids, pick)


def param_registry(model: Block) -> dict:
    """Stable name -> trainable Tensor map (block path + parameter role)."""
    out: dict = {}
    _walk(model, "", out, set(), lambda b: b.params())
    return out


def buffer_registry(model: Block) -> dict:
    """Stable name -> non-trainable numpy buffer map (e.g. batchnorm running stats)."""
    out: dict = {}
    _walk(model, "", out, set(), lambda b: b.buffers())
    return out


def state_arrays(model: Block) -> dict:
    """Params and buffers flattened to plain numpy arrays for checkpointing."""
    out = {name: t.data for name, t in param_registry(model).items()}
    for name, buf in buffer_registry(model).items():
        if name in out:
            raise ConstructionError(f"registry: buffer name {name!r} collides with a parameter")
        out[name] = buf
    return out


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"TELL1"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_TAG_FOR_KIND = {"f8": 1, "f4": 2}


def write_checkpoint(path, config_text: str, arrays: dict) -> None:
    """Binary container: magic, version, config block, then named array records."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<B", CHECKPOINT_VERSION)
    cfg = config_text.encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = arr.dtype.str.lstrip("<>|=")
        if kind not in _TAG_FOR_KIND:
            raise FormatError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", _TAG_FOR_KIND[kind], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype(f"<{kind}", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_checkpoint(path):
    """Read a container back as (config_text, name -> array)."""
    raw = open(path, "rb").read()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {raw[:5]!r}")
    version = raw[5]
    if version != CHECKPOINT_VERSION:
        raise CompatibilityError(f"checkpoint: unsupported version {version}")
    pos = 6
    (cfg_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    config_text = raw[pos : pos + cfg_len].decode("utf-8")
    pos += cfg_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tag, rank = struct.unpack_from("<BB", raw, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        dtype = _DTYPE_TAGS.get(tag)
        if dtype is None:
            raise FormatError(f"checkpoint: unknown dtype tag {tag} for {name!r}")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(dims).copy()
        pos += n * dtype.itemsize
        arrays[name] = arr
    return config_text, arrays


# ---------------------------------------------------------------------------
# finite differences (the acceptance instrument; exported for the test suite)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of scalar f at x, optionally on a coordinate subset."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
