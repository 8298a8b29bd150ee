"""Dense tensors with reverse-mode automatic differentiation.

Storage is numpy (row-major); every differentiable operation appends a record
to a global gradient tape, and ``backward`` walks the tape once in reverse,
accumulating gradients into ``Tensor.grad``.  Gradients accumulate across
repeated backward calls until explicitly cleared, which is what makes
gradient accumulation over micro-batches a plain sum.

Numeric precision is a process-global switch: float32 for training, float64
for finite-difference gradient checking (see ``precision``).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, InputError, ShapeError

# ---------------------------------------------------------------------------
# precision switch

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"unknown dtype {name!r}; use 'float32' or 'float64'")
    global _default_dtype
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


@contextmanager
def precision(name: str):
    """Temporarily switch the global default dtype ('float32'/'float64')."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


# ---------------------------------------------------------------------------
# counter-based PRNG

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)


class Rng:
    """SplitMix64 used as a counter-based generator.

    Output i is the SplitMix64 finalizer applied to seed + (i+1)*GAMMA, so a
    block of n values is computable in one vectorized pass and the sequence
    is independent of how draws are batched.  uniform() maps the top 53 bits
    to [0, 1); gaussian() is Box-Muller with u1 in (0, 1] so log(u1) is
    always finite.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = self.seed + idx * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussian(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u1 = (self.raw(m) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * 2.0**-53  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mean + std * z

    def shuffle(self, n: int) -> np.ndarray:
        """A permutation of range(n), determined by the stream."""
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n ints uniform in [0, bound)."""
        return (self.uniform(n) * bound).astype(np.int64).clip(0, bound - 1)


# ---------------------------------------------------------------------------
# tensor and tape

class Tensor:
    """Shape-tagged dense array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of executed differentiable ops (execution = topological order)."""

    def __init__(self):
        self.records = []  # (out, inputs, vjp) with vjp(g) -> per-input grads
        self.enabled = True

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


_tape = GradTape()


def tape() -> GradTape:
    return _tape


def clear_tape() -> None:
    _tape.clear()


@contextmanager
def no_grad():
    saved = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = saved


@contextmanager
def fresh_tape():
    """Swap in an empty tape for the duration (used by the gradient checker)."""
    global _tape
    saved = _tape
    _tape = GradTape()
    try:
        yield _tape
    finally:
        _tape = saved


def _trace(out_data, inputs, vjp) -> Tensor:
    out = Tensor(out_data)
    if _tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.records.append((out, inputs, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss.

    Gradients accumulate: calling backward twice on an intact tape doubles
    every gradient.  Ops recorded on the tape after the loss are skipped
    naturally (their outputs receive no adjoint).
    """
    if loss.data.size != 1:
        raise ContractError("backward expects a scalar loss")
    scratch = {id(loss): np.ones_like(loss.data)}

    def deposit(t, g):
        t.grad = g if t.grad is None else t.grad + g

    produced = set()
    for out, inputs, vjp in reversed(_tape.records):
        g = scratch.pop(id(out), None)
        if g is None:
            continue
        produced.add(id(out))
        if out.requires_grad:
            deposit(out, g)
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            k = id(inp)
            scratch[k] = gi if k not in scratch else scratch[k] + gi
    # whatever is left in scratch belongs to leaves (or the loss itself)
    remaining = {}
    for out, inputs, _ in _tape.records:
        for inp in inputs:
            if id(inp) in scratch:
                remaining[id(inp)] = inp
    if id(loss) in scratch and id(loss) not in produced:
        remaining[id(loss)] = loss
    for k, t in remaining.items():
        if t.requires_grad:
            deposit(t, scratch[k])


# ---------------------------------------------------------------------------
# constructors

def _check_extents(shape):
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    shape = _check_extents(shape)
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad)


def constant(shape, value: float, requires_grad: bool = False) -> Tensor:
    shape = _check_extents(shape)
    return Tensor(np.full(shape, value, dtype=_default_dtype), requires_grad)


def gaussian(shape, mean: float, std: float, seed: int,
             requires_grad: bool = False) -> Tensor:
    """Deterministic normal init: a fresh SplitMix64 stream per call."""
    shape = _check_extents(shape)
    if std < 0:
        raise ContractError("std must be >= 0")
    n = int(np.prod(shape))
    vals = Rng(seed).gaussian(n, mean, std).reshape(shape)
    return Tensor(vals.astype(_default_dtype), requires_grad)


def from_array(arr, requires_grad: bool = False) -> Tensor:
    data = np.ascontiguousarray(arr, dtype=_default_dtype)
    if data.size == 0:
        raise ShapeError("empty array")
    return Tensor(data, requires_grad)


# ---------------------------------------------------------------------------
# elementwise ops (broadcast rule: b stretches into a, right-aligned, extent-1)

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce_operand(a: Tensor, b):
    """Return (b_data, b_tensor_or_None); validate b broadcasts INTO a's shape."""
    if isinstance(b, Tensor):
        try:
            res = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast {b.shape} into {a.shape}") from None
        if res != a.shape:
            raise ShapeError(f"operand {b.shape} does not broadcast into {a.shape}")
        return b.data, b
    return np.asarray(b, dtype=a.data.dtype), None


def _binary(a, b, fwd, vjp_a, vjp_b):
    bdata, bt = _coerce_operand(a, b)
    out = fwd(a.data, bdata)
    inputs = (a,) if bt is None else (a, bt)
    na = a.requires_grad
    nb = bt is not None and bt.requires_grad

    def vjp(g):
        ga = vjp_a(g, a.data, bdata) if na else None
        if bt is None:
            return (ga,)
        gb = _unbroadcast(vjp_b(g, a.data, bdata), bt.shape) if nb else None
        return (ga, gb)

    return _trace(out, inputs, vjp)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b) -> Tensor:
    """a / b.  Caller guarantees b is bounded away from zero."""
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s
    return _trace(out, (a,), lambda g: (g * s if a.requires_grad else None,))


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [.., m, k] x [.., k, n].

    Leading extents must be equal on both sides, or one side is plain 2-D
    and is shared across the other side's batch.  The 2-D side's gradient is
    summed over the batch.
    """
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"inner extents differ: {A.shape} x {B.shape}")
    if A.ndim > 2 and B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"batch extents differ: {A.shape} x {B.shape}")
    out = A @ B
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if na:
            ga = g @ B.swapaxes(-1, -2)
            if A.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
        if nb:
            gb = A.swapaxes(-1, -2) @ g
            if B.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _trace(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return ((g * (x.data > 0) if x.requires_grad else None),)

    return _trace(out, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf form: x * Phi(x) with Phi the standard normal CDF."""
    X = x.data
    phi_cdf = 0.5 * (1.0 + erf(X / np.sqrt(X.dtype.type(2.0))))
    out = X * phi_cdf

    def vjp(g):
        if not x.requires_grad:
            return (None,)
        pdf = np.exp(-0.5 * X * X) / X.dtype.type(math.sqrt(2.0 * math.pi))
        return (g * (phi_cdf + X * pdf),)

    return _trace(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output clamped to the open interval (0, 1).

    The clamp keeps the smallest representable positive value and the largest
    value strictly below 1 for the active dtype.
    """
    X = x.data
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    fi = np.finfo(X.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)

    def vjp(g):
        return ((g * out * (1.0 - out) if x.requires_grad else None),)

    return _trace(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    """Natural log; domain x > 0 is the caller's contract (clamp first)."""
    if np.any(x.data <= 0):
        raise InputError("log requires strictly positive input")
    out = np.log(x.data)

    def vjp(g):
        return ((g / x.data if x.requires_grad else None),)

    return _trace(out, (x,), vjp)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only where unclipped."""
    out = np.clip(x.data, lo, hi)

    def vjp(g):
        if not x.requires_grad:
            return (None,)
        return (g * ((x.data > lo) & (x.data < hi)),)

    return _trace(out, (x,), vjp)


# ---------------------------------------------------------------------------
# softmax / layer norm

def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} invalid for rank {ndim}")
    return axis if axis >= 0 else axis + ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if not x.requires_grad:
            return (None,)
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _trace(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    k = x.data.shape[-1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ShapeError(f"gamma/beta must have shape ({k},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        return gx, gg, gb

    return _trace(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# data movement

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.data.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return ((g.reshape(old) if x.requires_grad else None),)

    return _trace(out, (x,), vjp)


def transpose(x: Tensor, perm) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.data.ndim)):
        raise ShapeError(f"perm {perm} is not a permutation of rank {x.data.ndim}")
    inv = tuple(np.argsort(perm))
    out = x.data.transpose(perm)

    def vjp(g):
        return ((g.transpose(inv) if x.requires_grad else None),)

    return _trace(out, (x,), vjp)


def _split_spatial(x: Tensor):
    if x.data.ndim < 2:
        raise ShapeError("need at least 2 spatial dims")
    if x.data.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def space_to_depth(x: Tensor, f: int) -> Tensor:
    """[.., c, h, w] -> [.., c*f*f, h/f, w/f]; new channel = c*f*f + dr*f + dc.

    A rank-2 input is treated as a single-channel image.
    """
    f = int(f)
    if f < 1:
        raise InputError("factor must be >= 1")
    x, _ = _split_spatial(x)
    *lead, c, h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by {f}")
    L = len(lead)
    y = reshape(x, (*lead, c, h // f, f, w // f, f))
    y = transpose(y, (*range(L), L, L + 2, L + 4, L + 1, L + 3))
    return reshape(y, (*lead, c * f * f, h // f, w // f))


def depth_to_space(x: Tensor, f: int) -> Tensor:
    """Inverse of space_to_depth: [.., c*f*f, h, w] -> [.., c, h*f, w*f]."""
    f = int(f)
    if f < 1:
        raise InputError("factor must be >= 1")
    x, _ = _split_spatial(x)
    *lead, cf, h, w = x.shape
    if cf % (f * f):
        raise ShapeError(f"channel extent {cf} not divisible by {f * f}")
    c = cf // (f * f)
    L = len(lead)
    y = reshape(x, (*lead, c, f, f, h, w))
    y = transpose(y, (*range(L), L, L + 3, L + 1, L + 4, L + 2))
    return reshape(y, (*lead, c, h * f, w * f))


# ---------------------------------------------------------------------------
# resize (integer upscale factors)

def _resize_matrix(n: int, f: int, mode: str, dtype) -> np.ndarray:
    m = n * f
    A = np.zeros((m, n), dtype=dtype)
    if mode == "nearest":
        for i in range(m):
            A[i, i // f] = 1.0
    else:
        # align-corners-false grid: src = (dst + 0.5)/f - 0.5, edge-clamped
        for i in range(m):
            src = (i + 0.5) / f - 0.5
            src = min(max(src, 0.0), n - 1.0)
            i0 = int(math.floor(src))
            i1 = min(i0 + 1, n - 1)
            w1 = src - i0
            A[i, i0] += 1.0 - w1
            A[i, i1] += w1
    return A


def resize(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    """Upscale the last two axes by an integer factor.

    nearest replicates each pixel factor^2 times; bilinear samples the
    align-corners-false grid src = (dst + 0.5)/factor - 0.5 with edge clamping.
    Realized as constant interpolation matrices applied by matmul, so the
    gradient is exactly the transposed interpolation.
    """
    factor = int(factor)
    if factor < 1:
        raise InputError("factor must be >= 1")
    if mode not in ("nearest", "bilinear"):
        raise InputError(f"unknown resize mode {mode!r}")
    x3, squeezed = _split_spatial(x)
    h, w = x3.shape[-2:]
    Ah = Tensor(_resize_matrix(h, factor, mode, x3.data.dtype))
    Aw = Tensor(_resize_matrix(w, factor, mode, x3.data.dtype).T.copy())
    out = matmul(matmul(Ah, x3), Aw)
    if squeezed:
        out = reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(_check_axis(a, ndim) for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not x.requires_grad:
            return (None,)
        if not keepdims:
            shape = list(x.data.shape)
            for a in axes:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, x.data.shape),)

    return _trace(out, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes]))
    return scale(reduce_sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Runs f twice up front and compares bit patterns to enforce determinism.
    Must be called in float64 mode; the numeric probe perturbs x.data in
    place and restores it.  Returns max_i |analytic_i - numeric_i| /
    max(1, |numeric_i|).
    """
    if _default_dtype is not np.float64:
        raise ContractError("finite_diff_check requires float64 mode")
    with fresh_tape(), no_grad():
        y1 = f(x)
        y2 = f(x)
    if y1.data.size != 1:
        raise ContractError("f must be scalar-valued")
    if y1.data.tobytes() != y2.data.tobytes():
        raise ContractError("f is not deterministic")

    saved_grad = x.grad
    x.grad = None
    with fresh_tape():
        backward(f(x))
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    with fresh_tape(), no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)

    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(numeric))))
