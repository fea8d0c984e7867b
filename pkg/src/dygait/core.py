"""Minimal reverse-mode engine for the DyGait network.

Feature maps are numpy arrays laid out ``(N, C, T, H, W)`` with W innermost;
every op also accepts a single unbatched ``(C, T, H, W)`` map. Ops are pure
functions of their inputs. They only record themselves for differentiation
while a :class:`Tape` is active, so inference runs without bookkeeping.

A tape belongs to one thread and one training step; tapes are never shared.
"""
import threading
from dataclasses import dataclass

import numpy as np

from dygait import kernels


class ShapeError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class Tensor:
    """An array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class ConvKernel3:
    """Bias-free 3-D convolution kernel. ``weight`` is (C_out, C_in, kt, kh, kw)."""

    weight: Tensor
    stride_t: int = 1
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 5:
            raise ShapeError(f"kernel must be 5-D (C_out, C_in, kt, kh, kw), got {self.weight.shape}")
        if any(k % 2 == 0 for k in self.weight.shape[2:]):
            raise ShapeError(f"kernel extents must be odd, got {self.weight.shape[2:]}")
        if self.stride_t < 1 or any(p < 0 for p in self.padding):
            raise ValueError("stride must be positive and padding non-negative")
        self.padding = tuple(int(p) for p in self.padding)

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def size(self):
        return self.weight.shape[2:]


# ---------------------------------------------------------------- tape

_local = threading.local()

# Ops whose backward is scaled by a small factor; only used to prove that
# grad_check catches a broken gradient.
PERTURBED_OPS = set()
_PERTURB_FACTOR = 1.01


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed ops, replayed in reverse by :meth:`backward`.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, out, seed=None):
        out.grad = np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=out.dtype)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if node.op in PERTURBED_OPS:
                    pg = pg * _PERTURB_FACTOR
                parent.grad = pg if parent.grad is None else parent.grad + pg


def current_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _record(op, data, parents, backward):
    tape = current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(op, out, parents, backward))
    return out


# ---------------------------------------------------------------- ops

def conv3d(x, k):
    """3-D cross-correlation, spatial stride 1, no bias."""
    x = as_tensor(x)
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 5 or xd.shape[1] != k.c_in:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {k.weight.shape}")
    t_out, h_out, w_out = kernels.conv_output_dims(*xd.shape[2:], k.size, k.stride_t, k.padding)
    if min(t_out, h_out, w_out) < 1:
        raise ShapeError(f"conv3d: input {x.shape} too small for kernel {k.weight.shape} with padding {k.padding}")
    w = k.weight
    y = kernels.conv3d_forward(xd, w.data.astype(xd.dtype, copy=False), k.stride_t, k.padding)

    def backward(g):
        g5 = g[None] if unbatched else g
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv3d_grad_input(g5, w.data, xd.shape, k.stride_t, k.padding)
            if unbatched:
                gx = gx[0]
        if w.requires_grad:
            gw = kernels.conv3d_grad_weight(g5, xd, k.size, k.stride_t, k.padding)
        return gx, gw

    return _record("conv3d", y[0] if unbatched else y, (x, w), backward)


def leaky_relu(x, slope=0.01):
    if not 0 < slope < 1:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    pos = x.data >= 0
    y = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return _record("leaky_relu", y, (x,), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _record("add", a.data + b.data, (a, b), backward)


def scale(a, factor):
    a = as_tensor(a)

    def backward(g):
        return (g * factor,)

    return _record("scale", a.data * factor, (a,), backward)


def _time_axis(x):
    if x.ndim not in (4, 5):
        raise ShapeError(f"expected a (C,T,H,W) or (N,C,T,H,W) feature map, got {x.shape}")
    return x.ndim - 3


def mean_over_time(x):
    x = as_tensor(x)
    ax = _time_axis(x)
    t = x.shape[ax]
    if t == 0:
        raise EmptySequenceError("mean_over_time on a sequence with no frames")
    # mean of deviations from the first frame: the same value mathematically,
    # but exactly equal to that frame when the sequence is temporally constant
    first = np.take(x.data, [0], axis=ax)
    y = first + (x.data - first).sum(axis=ax, keepdims=True) / x.dtype.type(t)

    def backward(g):
        return (np.broadcast_to(g / g.dtype.type(t), x.shape).copy(),)

    return _record("mean_over_time", y, (x,), backward)


def subtract_broadcast(x, m):
    """Frame-wise ``f_i - m`` for a single-frame map ``m``."""
    x, m = as_tensor(x), as_tensor(m)
    ax = _time_axis(x)
    expected = x.shape[:ax] + (1,) + x.shape[ax + 1 :]
    if m.shape != expected:
        raise ShapeError(f"subtract_broadcast: template {m.shape} does not match {x.shape} (expected {expected})")

    def backward(g):
        return g, -g.sum(axis=ax, keepdims=True)

    return _record("subtract_broadcast", x.data - m.data, (x, m), backward)


def max_over_time(x):
    """Elementwise maximum across frames; ties route the gradient to the first frame."""
    x = as_tensor(x)
    ax = _time_axis(x)
    if x.shape[ax] == 0:
        raise EmptySequenceError("max_over_time on a sequence with no frames")
    idx = np.argmax(x.data, axis=ax)[(slice(None),) * ax + (None,)]
    y = np.take_along_axis(x.data, idx, axis=ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    return _record("max_over_time", y, (x,), backward)


def maxpool_spatial(x, window=(2, 2)):
    """Non-overlapping max pooling over (H, W)."""
    x = as_tensor(x)
    ph, pw = window
    *lead, h, w = x.shape
    if h % ph or w % pw:
        raise ShapeError(f"maxpool_spatial: spatial dims {(h, w)} not divisible by window {window}")
    if ph == pw == 1:
        return _record("maxpool_spatial", x.data.copy(), (x,), lambda g: (g,))
    ho, wo = h // ph, w // pw
    blocks = x.data.reshape(*lead, ho, ph, wo, pw).swapaxes(-3, -2).reshape(*lead, ho, wo, ph * pw)
    idx = np.argmax(blocks, axis=-1)[..., None]
    y = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(*lead, ho, wo, ph, pw).swapaxes(-3, -2).reshape(*lead, h, w)
        return (gx,)

    return _record("maxpool_spatial", y, (x,), backward)


def strip_pool(x, strips):
    """Split ``(N, C, 1, H, W)`` into horizontal strips and reduce each by max + mean.

    Returns ``(N, S, C)``.
    """
    x = as_tensor(x)
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    n, c, t, h, w = xd.shape
    if t != 1:
        raise ShapeError(f"strip_pool expects a temporally aggregated map (T=1), got {x.shape}")
    if h % strips:
        raise ShapeError(f"strip_pool: height {h} not divisible by strip count {strips}")
    cells = (h // strips) * w
    z = xd.reshape(n, c, strips, cells)
    idx = np.argmax(z, axis=-1)[..., None]
    y = np.take_along_axis(z, idx, axis=-1)[..., 0] + z.mean(axis=-1)
    y = np.ascontiguousarray(y.transpose(0, 2, 1))

    def backward(g):
        gt = g.transpose(0, 2, 1)[..., None]
        gz = np.broadcast_to(gt / g.dtype.type(cells), z.shape).copy()
        np.put_along_axis(gz, idx, np.take_along_axis(gz, idx, axis=-1) + gt, axis=-1)
        gx = gz.reshape(xd.shape)
        return (gx[0] if unbatched else gx,)

    return _record("strip_pool", y[0] if unbatched else y, (x,), backward)


def strip_linear(x, w):
    """Bias-free linear map.

    ``w`` of shape (d_out, d_in) applies one matrix to the trailing axis of
    ``x``; ``w`` of shape (S, d_out, d_in) applies matrix ``s`` to strip ``s``
    of an ``x`` shaped (..., S, d_in).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim == 2:
        if x.shape[-1] != w.shape[1]:
            raise ShapeError(f"strip_linear: vector {x.shape} vs matrix {w.shape}")
        y = x.data @ w.data.T

        def backward(g):
            gx = g @ w.data if x.requires_grad else None
            gw = None
            if w.requires_grad:
                gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
            return gx, gw

    elif w.ndim == 3:
        if x.ndim < 2 or x.shape[-2:] != (w.shape[0], w.shape[2]):
            raise ShapeError(f"strip_linear: strips {x.shape} vs matrices {w.shape}")
        y = np.einsum("...si,soi->...so", x.data, w.data)

        def backward(g):
            gx = np.einsum("...so,soi->...si", g, w.data) if x.requires_grad else None
            gw = None
            if w.requires_grad:
                s_, o_, i_ = w.shape
                gw = np.einsum("nso,nsi->soi", g.reshape(-1, s_, o_), x.data.reshape(-1, s_, i_))
            return gx, gw

    else:
        raise ShapeError(f"strip_linear: weight must be 2-D or 3-D, got {w.shape}")
    return _record("strip_linear", y, (x, w), backward)


def add_bias(x, b):
    """``x + b`` with ``b`` broadcast over the leading axes of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if x.shape[x.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not trail {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def backward(g):
        return g, g.sum(axis=lead) if lead else g

    return _record("add_bias", x.data + b.data, (x, b), backward)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinks: int
    worst: tuple = ()


def _evaluate(fn, inputs):
    out = fn(*inputs)
    return float(out.data) if isinstance(out, Tensor) else float(out)


def check_gradients(fn, inputs, eps=1e-6, sample=None, rng=None, kink_tol=1e-2, max_redraws=20):
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    Every input with ``requires_grad`` is checked. ``sample`` limits the check
    to that fraction of coordinates per input (at least one). A coordinate
    whose one-sided differences disagree by more than ``kink_tol`` sits on or
    near a ReLU/max kink and is replaced by another draw instead of failing.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for t in inputs:
        if t.requires_grad and t.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    f0 = float(out.data)

    worst, worst_at, checked, kinks = 0.0, (), 0, 0
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        size = flat.size
        if sample is None:
            order = np.arange(size)
            wanted = size
        else:
            order = rng.permutation(size)
            wanted = max(1, int(round(sample * size)))
        done = redraws = 0
        for i in order:
            if done >= wanted:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(fn, inputs)
            flat[i] = orig - eps
            fm = _evaluate(fn, inputs)
            flat[i] = orig
            d_plus, d_minus = (fp - f0) / eps, (f0 - fm) / eps
            if abs(d_plus - d_minus) > kink_tol * max(abs(d_plus), abs(d_minus), 1e-6):
                kinks += 1
                redraws += 1
                if sample is not None and redraws > max_redraws * wanted:
                    break
                if sample is None:
                    done += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst, worst_at = rel, (pos, t.name, int(i))
            checked += 1
            done += 1
    return GradCheckResult(worst, checked, kinks, worst_at)


def grad_check(fn, inputs, eps=1e-6, sample=None, rng=None):
    """Maximum relative error between tape and central-difference gradients."""
    return check_gradients(fn, inputs, eps=eps, sample=sample, rng=rng).max_rel_error
