"""Minimal dense tensor engine with reverse-mode autodiff.

Feature maps are laid out [H, W, C]; matrices are [rows, cols]. Tensors are
treated as immutable values once created; every operation returns a fresh
Tensor and records the closures needed for the backward pass. The recorded
graph is walked once, in reverse topological order, by Tensor.backward().
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradError",
    "set_default_dtype",
    "get_default_dtype",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "scalar_mul",
    "scalar_add",
    "relu",
    "absolute",
    "matmul",
    "transpose",
    "softmax",
    "reduce_mean",
    "reduce_sum",
    "scale_rows",
    "shift_rows",
    "reshape",
    "conv2d",
    "bilinear_upsample",
    "patchify",
    "unpatchify",
    "grad_check",
    "save_tnsr",
    "load_tnsr",
    "tnsr_bytes",
    "tnsr_from_bytes",
    "RngStream",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class GradError(RuntimeError):
    """Raised for autodiff misuse (non-scalar loss, repeated backward...)."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager disabling graph recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by '{opname}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scalar_add(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scalar_add(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward pass ------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode gradient accumulation from this scalar tensor."""
        if self.data.size != 1:
            raise GradError("backward requires a scalar loss")
        if self._consumed:
            raise GradError("backward already called on this tensor")
        if self._backward_fn is None and not self.requires_grad:
            raise GradError("loss is detached from the computation graph")
        self._consumed = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._backward_fn is not None:
                for parent, pg in node._backward_fn(g):
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _needs_graph(*tensors: Tensor) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad or t._backward_fn is not None for t in tensors)


def _make(data: np.ndarray, opname: str, parents: Sequence[Tensor],
          backward_fn: Optional[Callable]) -> Tensor:
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if backward_fn is not None and _needs_graph(*parents):
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _require_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: ((a, g), (b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: ((a, g * b.data), (b, g * a.data)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: ((a, -g),))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scalar_mul", (a,), lambda g: ((a, g * c),))


def scalar_add(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, "scalar_add", (a,), lambda g: ((a, g),))


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is defined as 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0), "relu", (a,),
                 lambda g: ((a, g * mask),))


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 defined as 0 via sign()
    s = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: ((a, g * s),))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: ((a, g.T),))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if np.isnan(a.data).any():
        raise FloatingPointError("softmax: NaN input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((a, y * (g - dot)),)

    return _make(y, "softmax", (a,), backward)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = a.data.size
        if n == 0:
            raise ValueError("reduce_mean over empty tensor")
        out = np.asarray(a.data.mean(), dtype=a.data.dtype)
        return _make(out, "reduce_mean", (a,),
                     lambda g: ((a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype)),))
    ax = axis if axis >= 0 else a.data.ndim + axis
    if not 0 <= ax < a.data.ndim:
        raise ValueError(f"reduce_mean: invalid axis {axis} for shape {a.shape}")
    n = a.shape[ax]
    if n == 0:
        raise ValueError("reduce_mean over empty axis")

    def backward(g):
        return ((a, np.broadcast_to(np.expand_dims(g, ax) / n, a.shape).astype(a.data.dtype)),)

    return _make(a.data.mean(axis=ax), "reduce_mean", (a,), backward)


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.data.dtype)
        return _make(out, "reduce_sum", (a,),
                     lambda g: ((a, np.broadcast_to(g, a.shape).astype(a.data.dtype)),))
    ax = axis if axis >= 0 else a.data.ndim + axis
    if not 0 <= ax < a.data.ndim:
        raise ValueError(f"reduce_sum: invalid axis {axis} for shape {a.shape}")

    def backward(g):
        return ((a, np.broadcast_to(np.expand_dims(g, ax), a.shape).astype(a.data.dtype)),)

    return _make(a.data.sum(axis=ax), "reduce_sum", (a,), backward)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of matrix x by scalar w[i]."""
    if x.data.ndim != 2 or w.data.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ValueError(f"scale_rows: incompatible shapes {x.shape}, {w.shape}")
    return _make(x.data * w.data[:, None], "scale_rows", (x, w),
                 lambda g: ((x, g * w.data[:, None]), (w, (g * x.data).sum(axis=1))))


def shift_rows(x: Tensor, b: Tensor) -> Tensor:
    """Add scalar b[i] to every entry of row i of matrix x."""
    if x.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ValueError(f"shift_rows: incompatible shapes {x.shape}, {b.shape}")
    return _make(x.data + b.data[:, None], "shift_rows", (x, b),
                 lambda g: ((x, g), (b, g.sum(axis=1))))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape).copy(), "reshape", (a,),
                 lambda g: ((a, g.reshape(old)),))


# -- convolution ------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Same-zero-padded cross-correlation.

    x: [H, W, C_in], kernel: [k, k, C_in, C_out]; output
    [ceil(H/stride), ceil(W/stride), C_out].
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects x[H,W,C] and kernel[k,k,Cin,Cout]")
    k = kernel.shape[0]
    if kernel.shape[1] != k:
        raise ValueError("conv2d: kernel must be square")
    if k % 2 == 0:
        raise ValueError("conv2d: kernel size must be odd")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    cin, cout = kernel.shape[2], kernel.shape[3]
    if x.shape[2] != cin:
        raise ValueError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    h, w = x.shape[0], x.shape[1]
    pad = (k - 1) // 2

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    sw = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    sw = sw[::stride, ::stride]                      # [Ho, Wo, C, k, k]
    ho, wo = sw.shape[0], sw.shape[1]
    cols = np.ascontiguousarray(sw.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(ho, wo, cout)

    def backward(g):
        gmat = g.reshape(ho * wo, cout)
        dk = (cols.T @ gmat).reshape(kernel.shape)
        dcols = (gmat @ kmat.T).reshape(ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dcols[:, :, di, dj, :]
        dx = gxp[pad:pad + h, pad:pad + w]
        return ((x, dx), (kernel, dk))

    return _make(out, "conv2d", (x, kernel), backward)


# -- resampling -------------------------------------------------------------

def _bilinear_axis(n_src: int, factor: int):
    # half-pixel centers: src = (dst + 0.5)/factor - 0.5, clamped to borders
    coords = (np.arange(n_src * factor) + 0.5) / factor - 0.5
    coords = np.clip(coords, 0.0, n_src - 1)
    i0 = np.floor(coords).astype(np.intp)
    i0 = np.minimum(i0, n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w1 = coords - i0
    w0 = 1.0 - w1
    return i0, i1, w0, w1


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample [H, W, C] by an integer factor with half-pixel centers."""
    if x.data.ndim != 3:
        raise ValueError("bilinear_upsample expects x[H,W,C]")
    if factor < 1:
        raise ValueError("bilinear_upsample: factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), "bilinear_upsample", (x,), lambda g: ((x, g),))
    h, w, _ = x.shape
    r0, r1, wy0, wy1 = _bilinear_axis(h, factor)
    c0, c1, wx0, wx1 = _bilinear_axis(w, factor)
    dt = x.data.dtype
    wy0 = wy0.astype(dt)[:, None, None]
    wy1 = wy1.astype(dt)[:, None, None]
    wx0 = wx0.astype(dt)[None, :, None]
    wx1 = wx1.astype(dt)[None, :, None]

    d = x.data
    out = (wy0 * (wx0 * d[r0][:, c0] + wx1 * d[r0][:, c1])
           + wy1 * (wx0 * d[r1][:, c0] + wx1 * d[r1][:, c1]))

    def backward(g):
        dx = np.zeros_like(d)
        ry0 = r0[:, None]
        ry1 = r1[:, None]
        cx0 = c0[None, :]
        cx1 = c1[None, :]
        np.add.at(dx, (ry0, cx0), wy0 * wx0 * g)
        np.add.at(dx, (ry0, cx1), wy0 * wx1 * g)
        np.add.at(dx, (ry1, cx0), wy1 * wx0 * g)
        np.add.at(dx, (ry1, cx1), wy1 * wx1 * g)
        return ((x, dx),)

    return _make(out, "bilinear_upsample", (x,), backward)


# -- patch layout -----------------------------------------------------------

def patchify(x: Tensor, s: int) -> Tensor:
    """Split [H, W, C] into non-overlapping s x s patches, row-major.

    Returns [N_p, s*s*C] with (row, col, channel) flattening order.
    """
    if x.data.ndim != 3:
        raise ValueError("patchify expects x[H,W,C]")
    h, w, c = x.shape
    if s < 1 or h % s or w % s:
        raise ValueError(f"patchify: patch size {s} must divide H={h} and W={w}")
    gh, gw = h // s, w // s
    n_p = gh * gw

    def fwd(d):
        return (d.reshape(gh, s, gw, s, c)
                 .transpose(0, 2, 1, 3, 4)
                 .reshape(n_p, s * s * c))

    def backward(g):
        dx = (g.reshape(gh, gw, s, s, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(h, w, c))
        return ((x, dx),)

    return _make(np.ascontiguousarray(fwd(x.data)), "patchify", (x,), backward)


def unpatchify(p: Tensor, h: int, w: int, c: int, s: int) -> Tensor:
    """Inverse of patchify: [N_p, s*s*C] back to [H, W, C]."""
    if p.data.ndim != 2:
        raise ValueError("unpatchify expects a patch matrix")
    if s < 1 or h % s or w % s:
        raise ValueError(f"unpatchify: patch size {s} must divide H={h} and W={w}")
    gh, gw = h // s, w // s
    if p.shape != (gh * gw, s * s * c):
        raise ValueError(f"unpatchify: patch matrix {p.shape} does not match "
                         f"({gh * gw}, {s * s * c})")

    out = (p.data.reshape(gh, gw, s, s, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(h, w, c))

    def backward(g):
        dp = (g.reshape(gh, s, gw, s, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(gh * gw, s * s * c))
        return ((p, dp),)

    return _make(np.ascontiguousarray(out), "unpatchify", (p,), backward)


# -- verification oracle ----------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Central-finite-difference check of df/dx. Runs in float64.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|,
    |numeric|).
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    if out.data.size != 1:
        raise GradError("grad_check requires a scalar-valued program")
    out.backward()
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)

    flat = x64.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - h
        with no_grad():
            fm = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0


# -- TNSR serialization -----------------------------------------------------

_TNSR_MAGIC = b"TNSR"
_TNSR_DTYPES = {0: np.float32, 1: np.float64}
_TNSR_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TnsrFormatError(ValueError):
    pass


def tnsr_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array: magic 'TNSR', u8 version=1, u8 dtype, u8 rank,
    little-endian u64 extents, raw little-endian elements."""
    arr = np.asarray(arr)
    if arr.dtype not in _TNSR_CODES:
        raise TnsrFormatError(f"unsupported dtype {arr.dtype}")
    head = _TNSR_MAGIC + struct.pack("<BBB", 1, _TNSR_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


def tnsr_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNSR block starting at offset; returns (array, next offset)."""
    if buf[offset:offset + 4] != _TNSR_MAGIC:
        raise TnsrFormatError(f"bad magic bytes at offset {offset}")
    if len(buf) < offset + 7:
        raise TnsrFormatError(f"truncated header at offset {offset}")
    version, dcode, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != 1:
        raise TnsrFormatError(f"unsupported version {version} at offset {offset}")
    if dcode not in _TNSR_DTYPES:
        raise TnsrFormatError(f"unknown dtype code {dcode} at offset {offset}")
    pos = offset + 7
    extents = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    dtype = np.dtype(_TNSR_DTYPES[dcode]).newbyteorder("<")
    count = int(np.prod(extents)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise TnsrFormatError(f"truncated payload at offset {pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(extents)
    return arr.astype(_TNSR_DTYPES[dcode]), pos + nbytes


def save_tnsr(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tnsr_bytes(arr))


def load_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tnsr_from_bytes(buf)
    if end != len(buf):
        raise TnsrFormatError(f"{end - len(buf)} trailing bytes after tensor payload")
    return arr


# -- deterministic RNG ------------------------------------------------------

class RngStream:
    """Seeded, splittable PCG64 stream; identical seed gives identical
    sequences on every platform."""

    def __init__(self, seed, _seq: Optional[np.random.SeedSequence] = None):
        self.seed_seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self.seed = seed
        self.gen = np.random.Generator(np.random.PCG64(self.seed_seq))

    def split(self, n: int) -> list["RngStream"]:
        return [RngStream(None, _seq=s) for s in self.seed_seq.spawn(n)]

    def normal(self, shape, std=1.0, dtype=np.float32):
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, lo=0.0, hi=1.0, dtype=np.float32):
        return self.gen.uniform(lo, hi, size=shape).astype(dtype)

    def integers(self, lo, hi):
        return int(self.gen.integers(lo, hi))

    def state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state
