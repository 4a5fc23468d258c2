"""Minimal reverse-mode differentiation over numpy arrays.

Every op takes :class:`Tensor` inputs, computes its forward value eagerly and,
when a :class:`Tape` is active and some input requires a gradient, records a
closure that maps the output gradient to input gradients.  ``backward`` walks
the tape in reverse.  Nothing is recorded outside a tape, so inference code
simply calls the ops.

Layouts are channels-last: images and feature maps are ``(..., H, W, C)``,
where leading axes are treated as a batch.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "NormState",
    "GradCheckReport",
    "as_tensor",
    "backward",
    "conv2d",
    "dense",
    "relu",
    "batch_stat_normalize",
    "instance_standardize",
    "normalize_l2",
    "pool_angular_mean",
    "dropout",
    "add",
    "mul",
    "tsum",
    "reshape",
    "concat",
    "gradient_check",
    "record",
]


class Tensor:
    """Dense array with an optional gradient companion."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        if not np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.value.shape

    shape = dims

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(dims={self.dims}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.value.dtype != dtype:
            raise InputError(f"expected dtype {np.dtype(dtype)}, got {x.value.dtype}")
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered record of executed ops; use as a context manager.

    Tapes are thread-local: ops executed on another thread are not recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, retain_intermediate: bool = True) -> None:
        backward(self, loss, retain_intermediate=retain_intermediate)


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], value: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``value`` as the output of ``op`` and put it on the active tape.

    ``grad_fn(g)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, tuple(inputs), out, grad_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.value.shape:
        raise NumericError(f"gradient shape {g.shape} does not match tensor {t.value.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor, retain_intermediate: bool = True) -> None:
    """Populate ``grad`` of every tensor the loss depends on.

    Gradients accumulate into existing ``grad`` arrays, so callers reset leaf
    gradients between steps.  With ``retain_intermediate=False`` the gradients
    of recorded op outputs are dropped once consumed, which bounds memory during
    training.
    """
    if loss.value.size != 1:
        raise InputError(f"loss must be a scalar, got dims {loss.dims}")
    produced = {id(n.output) for n in tape.nodes}
    # stale gradients of op outputs from an earlier pass must not leak in
    for node in tape.nodes:
        node.output.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            _accumulate(t, gi)
        if not retain_intermediate and node.output is not loss:
            node.output.grad = None
    if not retain_intermediate:
        for node in tape.nodes:
            for t in node.inputs:
                if id(t) in produced and t is not loss:
                    t.grad = None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- conv2d


def _same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


# Upper bound on the im2col scratch buffer per chunk, in elements.
_COLS_BUDGET = 1 << 23


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "zero",
) -> Tensor:
    """2-D convolution with "same" padding, output ``ceil(H/stride) x ceil(W/stride)``.

    ``padding="circular_axis0"`` wraps the first spatial axis (the angle axis
    of polar patches) and zero-pads the second.
    """
    xv, kv = x.value, kernel.value
    if xv.ndim < 3:
        raise InputError(f"conv2d input needs (..., H, W, C) dims, got {xv.shape}")
    if kv.ndim != 4:
        raise InputError(f"conv2d kernel needs (kh, kw, Cin, Cout) dims, got {kv.shape}")
    kh, kw, cin, cout = kv.shape
    *lead, H, W, C = xv.shape
    if C != cin:
        raise InputError(f"conv2d: input has {C} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InputError("conv2d: kernel sizes must be odd")
    if stride < 1:
        raise InputError("conv2d: stride must be >= 1")
    if padding not in ("zero", "circular_axis0"):
        raise InputError(f"conv2d: unknown padding mode {padding!r}")
    if padding == "circular_axis0" and H % stride:
        raise InputError("conv2d: circular axis length must be a multiple of stride")
    if bias is not None and bias.value.shape != (cout,):
        raise InputError(f"conv2d: bias dims {bias.value.shape} != ({cout},)")
    _check_finite(xv, "conv2d input")

    Ho, ph0, ph1 = _same_padding(H, kh, stride)
    Wo, pw0, pw1 = _same_padding(W, kw, stride)
    B = int(np.prod(lead)) if lead else 1
    xb = xv.reshape(B, H, W, C)
    dtype = np.result_type(xv.dtype, kv.dtype)
    kmat = kv.reshape(kh * kw * cin, cout).astype(dtype, copy=False)

    def pad(a):
        if padding == "circular_axis0":
            a = np.pad(a, ((0, 0), (ph0, ph1), (0, 0), (0, 0)), mode="wrap")
            return np.pad(a, ((0, 0), (0, 0), (pw0, pw1), (0, 0)))
        return np.pad(a, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))

    rows = Ho * Wo * kh * kw * cin
    chunk = max(1, _COLS_BUDGET // max(rows, 1))
    hs = (Ho - 1) * stride + 1
    ws = (Wo - 1) * stride + 1

    def im2col(xp):
        b = xp.shape[0]
        cols = np.empty((b, Ho, Wo, kh, kw, cin), dtype=dtype)
        for dy in range(kh):
            for dx in range(kw):
                cols[:, :, :, dy, dx, :] = xp[:, dy:dy + hs:stride, dx:dx + ws:stride, :]
        return cols.reshape(b * Ho * Wo, kh * kw * cin)

    out = np.empty((B, Ho, Wo, cout), dtype=dtype)
    for s in range(0, B, chunk):
        xp = pad(xb[s:s + chunk])
        out[s:s + chunk] = (im2col(xp) @ kmat).reshape(-1, Ho, Wo, cout)
    if bias is not None:
        out += bias.value.astype(dtype, copy=False)
    _check_finite(out, "conv2d")
    out = out.reshape(*lead, Ho, Wo, cout)

    def grad_fn(g):
        g = g.reshape(B, Ho * Wo, cout)
        gk = np.zeros_like(kmat) if kernel.requires_grad else None
        gx = np.empty_like(xb) if x.requires_grad else None
        for s in range(0, B, chunk):
            gs = g[s:s + chunk].reshape(-1, cout)
            if gk is not None:
                gk += im2col(pad(xb[s:s + chunk])).T @ gs
            if gx is not None:
                b = min(chunk, B - s)
                gcols = (gs @ kmat.T).reshape(b, Ho, Wo, kh, kw, cin)
                gxp = np.zeros((b, H + ph0 + ph1, W + pw0 + pw1, cin), dtype=dtype)
                for dy in range(kh):
                    for dx in range(kw):
                        gxp[:, dy:dy + hs:stride, dx:dx + ws:stride, :] += gcols[:, :, :, dy, dx, :]
                gwide = gxp[:, :, pw0:pw0 + W, :]
                core = gwide[:, ph0:ph0 + H].copy()
                if padding == "circular_axis0":
                    if ph0:
                        core[:, H - ph0:] += gwide[:, :ph0]
                    if ph1:
                        core[:, :ph1] += gwide[:, ph0 + H:]
                gx[s:s + b] = core
        gb = g.sum(axis=(0, 1)) if bias is not None and bias.requires_grad else None
        return (
            gx.reshape(xv.shape) if gx is not None else None,
            gk.reshape(kv.shape).astype(kv.dtype, copy=False) if gk is not None else None,
            gb,
        )

    inputs = (x, kernel) + ((bias,) if bias is not None else (Tensor(np.zeros(cout)),))
    return record("conv2d", inputs, out, grad_fn)


# ---------------------------------------------------------------- dense & pointwise


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine layer ``weight @ x + bias`` over the last axis of ``x``."""
    xv, wv = x.value, weight.value
    if wv.ndim != 2 or xv.shape[-1:] != wv.shape[1:]:
        raise InputError(f"dense: input dims {xv.shape} do not conform to weight {wv.shape}")
    if bias is not None and bias.value.shape != wv.shape[:1]:
        raise InputError(f"dense: bias dims {bias.value.shape} != ({wv.shape[0]},)")
    out = xv @ wv.T
    if bias is not None:
        out = out + bias.value

    def grad_fn(g):
        g2 = g.reshape(-1, wv.shape[0])
        x2 = xv.reshape(-1, wv.shape[1])
        gx = (g @ wv) if x.requires_grad else None
        gw = (g2.T @ x2) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else (Tensor(np.zeros(wv.shape[0])),))
    return record("dense", inputs, out, grad_fn)


def relu(x: Tensor) -> Tensor:
    xv = x.value
    mask = xv > 0
    return record("relu", (x,), np.where(mask, xv, 0).astype(xv.dtype), lambda g: (g * mask,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", (a, b), a.value + b.value, grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return record("mul", (a, b), av * bv, grad_fn)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = x.value.shape
    return record("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.broadcast_to(g, shape),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.value.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise InputError(f"reshape: {exc}") from None
    return record("reshape", (x,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InputError("concat: empty input")
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    return record("concat", tensors, out, lambda g: np.split(g, splits, axis=axis))


# ---------------------------------------------------------------- normalisation


@dataclass
class NormState:
    """Running per-channel statistics for :func:`batch_stat_normalize`."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "NormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_stat_normalize(
    x: Tensor,
    mode: str,
    state: NormState,
    eps: float = 1e-5,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    Train mode normalises with batch statistics and updates ``state`` in place;
    eval mode uses the running statistics.
    """
    if eps <= 0:
        raise InputError("batch_stat_normalize: eps must be positive")
    if mode not in ("train", "eval"):
        raise InputError(f"batch_stat_normalize: unknown mode {mode!r}")
    xv = x.value
    C = xv.shape[-1]
    if xv.size == 0 or C == 0:
        raise InputError("batch_stat_normalize: zero-size channel")
    if state.mean.shape != (C,):
        raise InputError(f"batch_stat_normalize: state has {state.mean.shape[0]} channels, input {C}")
    axes = tuple(range(xv.ndim - 1))
    n = xv.size // C
    if mode == "train":
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = state.momentum
        state.mean[...] = (1 - m) * state.mean + m * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.var[...] = (1 - m) * state.var + m * unbiased
    else:
        mean, var = state.mean, state.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mean.astype(xv.dtype)) * inv_std
    out = xhat
    if weight is not None:
        out = out * weight.value
    if bias is not None:
        out = out + bias.value
    train = mode == "train"

    def grad_fn(g):
        gw = (g * xhat).sum(axis=axes) if weight is not None else None
        gb = g.sum(axis=axes) if bias is not None else None
        gh = g * weight.value if weight is not None else g
        if train:
            gx = inv_std * (gh - gh.mean(axis=axes) - xhat * (gh * xhat).mean(axis=axes))
        else:
            gx = gh * inv_std
        return gx, gw, gb

    inputs = (x, weight or Tensor(np.zeros(C)), bias or Tensor(np.zeros(C)))
    return record("batch_stat_normalize", inputs, out, grad_fn)


def instance_standardize(x: Tensor, axes: tuple[int, ...], eps: float = 1e-6) -> Tensor:
    """Zero-mean, unit-variance rescaling of each sample over ``axes``."""
    xv = x.value
    mean = xv.mean(axis=axes, keepdims=True)
    var = xv.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv_std

    def grad_fn(g):
        gx = inv_std * (g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True))
        return (gx,)

    return record("instance_standardize", (x,), xhat, grad_fn)


def normalize_l2(x: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale vectors along the last axis to unit Euclidean norm."""
    xv = x.value
    norm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    if (norm <= eps).any() or not np.isfinite(norm).all():
        raise NumericError("normalize_l2: norm is zero or not finite")
    out = xv / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return record("normalize_l2", (x,), out, grad_fn)


def pool_angular_mean(x: Tensor) -> Tensor:
    """Mean over the angle axis of ``(..., A, R, C)`` inputs.

    Values are summed in sorted order, which makes the result bit-exactly
    invariant to any permutation of the angle axis (cyclic shifts included).
    """
    xv = x.value
    if xv.ndim < 3 or xv.shape[-3] < 1:
        raise InputError(f"pool_angular_mean: need (..., A, R, C) dims, got {xv.shape}")
    A = xv.shape[-3]
    out = np.sort(xv, axis=-3).sum(axis=-3) / xv.dtype.type(A)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / A, -3), xv.shape).astype(xv.dtype),)

    return record("pool_angular_mean", (x,), out, grad_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, mode: str) -> Tensor:
    """Inverted dropout, active only in train mode."""
    if mode != "train" or p <= 0:
        return x
    if not 0 <= p < 1:
        raise InputError("dropout: p must lie in [0, 1)")
    if rng is None:
        raise InputError("dropout: train mode needs a seeded rng")
    keep = (rng.random(x.value.shape) >= p).astype(x.value.dtype) / x.value.dtype.type(1 - p)
    return record("dropout", (x,), x.value * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    message: str = ""
    per_input: list[float] = field(default_factory=list)


def _as_scalar(out: Tensor, proj: np.ndarray | None):
    if out.value.size == 1:
        return out
    return tsum(mul(out, Tensor(proj)))


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central finite differences.

    Non-scalar outputs are reduced with a fixed random projection.  The
    relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    is ``1e-3 * G`` (``G`` the largest gradient magnitude of that input) or the
    rounding noise of the difference quotient, whichever is larger, so entries
    whose gradient is essentially zero do not dominate.
    """
    if h <= 0:
        raise InputError("gradient_check: h must be positive")
    single = isinstance(inputs, (Tensor, np.ndarray))
    inputs = [inputs] if single else list(inputs)
    inputs = [t if isinstance(t, Tensor) else Tensor(np.array(t, dtype=np.float64)) for t in inputs]
    rng = np.random.default_rng(seed)
    try:
        for t in inputs:
            t.value = np.ascontiguousarray(t.value)
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            out = f(*inputs)
        proj = None if out.value.size == 1 else rng.standard_normal(out.value.shape)
        magnitude = float(np.abs(out.value if proj is None else out.value * proj).sum())
        noise = 64 * np.finfo(np.float64).eps * magnitude / h
        with tape:
            loss = _as_scalar(out, proj)
        backward(tape, loss)
        errors = []
        for t in inputs:
            analytic = np.zeros_like(t.value) if t.grad is None else t.grad.copy()
            numeric = np.zeros_like(t.value)
            flat = t.value.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _as_scalar(f(*inputs), proj).value.item()
                flat[i] = orig - h
                fm = _as_scalar(f(*inputs), proj).value.item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
                return GradCheckReport(np.inf, False, tol, "non-finite gradient")
            G = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
            if G == 0:
                errors.append(0.0)
                continue
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(1e-3 * G, noise))
            errors.append(float((np.abs(analytic - numeric) / denom).max()))
    except NumericError as exc:
        return GradCheckReport(np.inf, False, tol, f"numeric error: {exc}")
    worst = max(errors) if errors else 0.0
    return GradCheckReport(worst, worst < tol, tol, per_input=errors)
