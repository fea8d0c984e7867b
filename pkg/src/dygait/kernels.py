"""3-D convolution kernels on batched ``(N, C, T, H, W)`` arrays.

Two interchangeable implementations live here: an im2col + BLAS path written
in plain numpy and a direct-loop path compiled with numba. ``conv3d_forward``,
``conv3d_grad_input`` and ``conv3d_grad_weight`` dispatch on
``dygait._accel.USE_NUMBA``. Both paths are deterministic; they differ from
each other only by floating-point summation order.

Spatial stride is always 1; the temporal stride is a parameter. Padding is
zero in space and circular in time.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dygait import _accel
from dygait._accel import njit, prange


def conv_output_dims(t, h, w, kernel, stride_t, padding):
    kt, kh, kw = kernel
    pt, ph, pw = padding
    return (t + 2 * pt - kt) // stride_t + 1, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1


def _pad(x, padding):
    # zeros in space, wrap-around in time: a temporally constant input stays
    # exactly constant, and a window holding whole periods of a periodic
    # sequence sees the same neighbours at its ends as in the interior
    pt, ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, 0), (ph, ph), (pw, pw)))
    if pt:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (0, 0), (0, 0)), mode="wrap")
    return x


def _unpad_grad(gxp, x_shape, padding):
    """Adjoint of ``_pad``: crop space, fold the wrapped time frames back onto their sources."""
    pt, ph, pw = padding
    t, h, w = x_shape[2:]
    g = gxp[:, :, :, ph : ph + h, pw : pw + w]
    if not pt:
        return np.array(g)
    out = np.zeros(g.shape[:2] + (t,) + g.shape[3:], dtype=g.dtype)
    np.add.at(out, (slice(None), slice(None), (np.arange(g.shape[2]) - pt) % t), g)
    return out


def _windows(xp, kernel, stride_t, out_dims):
    # (N, C, To, Ho, Wo, kt, kh, kw) view, no copy
    v = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return v[:, :, ::stride_t][:, :, : out_dims[0]]


# ---------------------------------------------------------------- numpy path

def _fwd_numpy(xp, w, stride_t, out_dims):
    cols = _windows(xp, w.shape[2:], stride_t, out_dims)
    out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, 4, 1))


def _grad_input_numpy(g, w, xp_shape, stride_t):
    n, o, to, ho, wo = g.shape
    kt, kh, kw = w.shape[2:]
    # (N, To, Ho, Wo, C, kt, kh, kw)
    dcols = np.tensordot(np.moveaxis(g, 1, 4), w, axes=([4], [0]))
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for a in range(kt):
        for b in range(kh):
            for e in range(kw):
                gxp[:, :, a : a + stride_t * (to - 1) + 1 : stride_t, b : b + ho, e : e + wo] += np.moveaxis(
                    dcols[..., a, b, e], 4, 1
                )
    return gxp


def _grad_weight_numpy(g, xp, kernel, stride_t):
    cols = _windows(xp, kernel, stride_t, g.shape[2:])
    return np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


# ---------------------------------------------------------------- numba path
#
# Each padded (H, W) plane is flattened and the output is computed over the
# padded width, so tap (b, e) becomes a constant offset b * Wp + e into the
# flat plane and the innermost loop runs over Ho * Wp contiguous elements.
# Output columns j >= Wo are garbage and are sliced off (forward) or zeroed
# (backward). Offsets are applied by slicing before the loop: an index of the
# form ``p + off`` keeps numba's wraparound check and blocks vectorisation.

_FASTMATH = {"reassoc", "contract"}


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _fwd_numba(xf, w, stride_t, to, ho, wp):
    n_batch, c_in = xf.shape[0], xf.shape[1]
    c_out, _, kt, kh, kw = w.shape
    span = ho * wp
    out = np.zeros((n_batch, c_out, to, span), dtype=xf.dtype)
    for job in prange(n_batch * c_out):
        n = job // c_out
        o = job % c_out
        for t in range(to):
            dst = out[n, o, t]
            for c in range(c_in):
                for a in range(kt):
                    src = xf[n, c, t * stride_t + a]
                    for b in range(kh):
                        for e in range(kw):
                            wv = w[o, c, a, b, e]
                            off = b * wp + e
                            s = src[off : off + span]
                            for p in range(span):
                                dst[p] += wv * s[p]
    return out


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _grad_input_numba(gf, w, tp, flat, stride_t, wp):
    n_batch, c_out, to, span = gf.shape
    _, c_in, kt, kh, kw = w.shape
    gx = np.zeros((n_batch, c_in, tp, flat), dtype=gf.dtype)
    for job in prange(n_batch * c_in):
        n = job // c_in
        c = job % c_in
        for ti in range(tp):
            dst = gx[n, c, ti]
            for a in range(kt):
                if (ti - a) % stride_t != 0:
                    continue
                t = (ti - a) // stride_t
                if t < 0 or t >= to:
                    continue
                for o in range(c_out):
                    g = gf[n, o, t]
                    for b in range(kh):
                        for e in range(kw):
                            wv = w[o, c, a, b, e]
                            off = b * wp + e
                            d = dst[off : off + span]
                            for p in range(span):
                                d[p] += wv * g[p]
    return gx


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _grad_weight_numba(gf, xf, kt, kh, kw, stride_t, wp):
    n_batch, c_out, to, span = gf.shape
    c_in = xf.shape[1]
    gw = np.zeros((c_out, c_in, kt, kh, kw), dtype=gf.dtype)
    zero = gw.ravel()[0]  # typed like the data; a literal 0 would promote float32 sums to float64
    for o in prange(c_out):
        for n in range(n_batch):
            for t in range(to):
                g = gf[n, o, t]
                for c in range(c_in):
                    for a in range(kt):
                        src = xf[n, c, t * stride_t + a]
                        for b in range(kh):
                            for e in range(kw):
                                off = b * wp + e
                                s = src[off : off + span]
                                acc = zero
                                for p in range(span):
                                    acc += g[p] * s[p]
                                gw[o, c, a, b, e] += acc
    return gw


# 3x3 spatial taps (every kernel but the LTA temporal one): all nine taps run
# inside one vector loop, so each output element is loaded and stored once
# per (input channel, temporal tap) instead of nine times.


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _fwd_numba_33(xf, w, stride_t, to, ho, wp):
    n_batch, c_in = xf.shape[0], xf.shape[1]
    c_out, _, kt = w.shape[0], w.shape[1], w.shape[2]
    span = ho * wp
    out = np.zeros((n_batch, c_out, to, span), dtype=xf.dtype)
    for job in prange(n_batch * c_out):
        n = job // c_out
        o = job % c_out
        for t in range(to):
            dst = out[n, o, t]
            for c in range(c_in):
                for a in range(kt):
                    src = xf[n, c, t * stride_t + a]
                    k = w[o, c, a]
                    w0, w1, w2 = k[0, 0], k[0, 1], k[0, 2]
                    w3, w4, w5 = k[1, 0], k[1, 1], k[1, 2]
                    w6, w7, w8 = k[2, 0], k[2, 1], k[2, 2]
                    r0 = src[0 : span + 2]
                    r1 = src[wp : wp + span + 2]
                    r2 = src[2 * wp : 2 * wp + span + 2]
                    for p in range(span):
                        dst[p] += (
                            w0 * r0[p] + w1 * r0[p + 1] + w2 * r0[p + 2]
                            + w3 * r1[p] + w4 * r1[p + 1] + w5 * r1[p + 2]
                            + w6 * r2[p] + w7 * r2[p + 1] + w8 * r2[p + 2]
                        )
    return out


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _grad_input_numba_33(gpad, w, tp, flat, stride_t, wp):
    # gpad: flat output gradient with 2 * wp + 2 leading zeros, so the
    # transposed taps become reads at fixed negative offsets
    n_batch, c_out, to = gpad.shape[0], gpad.shape[1], gpad.shape[2]
    _, c_in, kt = w.shape[0], w.shape[1], w.shape[2]
    lead = 2 * wp + 2
    gx = np.zeros((n_batch, c_in, tp, flat), dtype=gpad.dtype)
    for job in prange(n_batch * c_in):
        n = job // c_in
        c = job % c_in
        for ti in range(tp):
            dst = gx[n, c, ti]
            for a in range(kt):
                if (ti - a) % stride_t != 0:
                    continue
                t = (ti - a) // stride_t
                if t < 0 or t >= to:
                    continue
                for o in range(c_out):
                    g = gpad[n, o, t]
                    k = w[o, c, a]
                    w0, w1, w2 = k[0, 0], k[0, 1], k[0, 2]
                    w3, w4, w5 = k[1, 0], k[1, 1], k[1, 2]
                    w6, w7, w8 = k[2, 0], k[2, 1], k[2, 2]
                    r0 = g[lead - 2 : lead + flat]
                    r1 = g[lead - wp - 2 : lead - wp + flat]
                    r2 = g[0 : flat + 2]
                    for q in range(flat):
                        dst[q] += (
                            w0 * r0[q + 2] + w1 * r0[q + 1] + w2 * r0[q]
                            + w3 * r1[q + 2] + w4 * r1[q + 1] + w5 * r1[q]
                            + w6 * r2[q + 2] + w7 * r2[q + 1] + w8 * r2[q]
                        )
    return gx


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _grad_weight_numba_33(gf, xf, kt, stride_t, wp):
    n_batch, c_out, to, span = gf.shape
    c_in = xf.shape[1]
    gw = np.zeros((c_out, c_in, kt, 3, 3), dtype=gf.dtype)
    zero = gw.ravel()[0]
    for o in prange(c_out):
        for n in range(n_batch):
            for t in range(to):
                g = gf[n, o, t]
                for c in range(c_in):
                    for a in range(kt):
                        src = xf[n, c, t * stride_t + a]
                        r0 = src[0 : span + 2]
                        r1 = src[wp : wp + span + 2]
                        r2 = src[2 * wp : 2 * wp + span + 2]
                        s0 = s1 = s2 = s3 = s4 = s5 = s6 = s7 = s8 = zero
                        for p in range(span):
                            gv = g[p]
                            s0 += gv * r0[p]
                            s1 += gv * r0[p + 1]
                            s2 += gv * r0[p + 2]
                            s3 += gv * r1[p]
                            s4 += gv * r1[p + 1]
                            s5 += gv * r1[p + 2]
                            s6 += gv * r2[p]
                            s7 += gv * r2[p + 1]
                            s8 += gv * r2[p + 2]
                        k = gw[o, c, a]
                        k[0, 0] += s0
                        k[0, 1] += s1
                        k[0, 2] += s2
                        k[1, 0] += s3
                        k[1, 1] += s4
                        k[1, 2] += s5
                        k[2, 0] += s6
                        k[2, 1] += s7
                        k[2, 2] += s8
    return gw


def _flat_planes(xp, kw):
    n, c, tp, hp, wp = xp.shape
    xf = np.zeros((n, c, tp, hp * wp + kw), dtype=xp.dtype)
    xf[..., : hp * wp] = xp.reshape(n, c, tp, hp * wp)
    return xf


def _flat_grad(g, wp):
    n, o, to, ho, wo = g.shape
    gf = np.zeros((n, o, to, ho, wp), dtype=g.dtype)
    gf[..., :wo] = g
    return gf.reshape(n, o, to, ho * wp)


# ---------------------------------------------------------------- dispatch

def conv3d_forward(x, w, stride_t=1, padding=(0, 0, 0), use_numba=None):
    """Cross-correlate ``x`` (N, C, T, H, W) with ``w`` (O, C, kt, kh, kw)."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    out_dims = conv_output_dims(*x.shape[2:], w.shape[2:], stride_t, padding)
    xp = _pad(x, padding)
    if not use_numba:
        return _fwd_numpy(xp, w, stride_t, out_dims)
    to, ho, wo = out_dims
    wp = xp.shape[4]
    fwd = _fwd_numba_33 if w.shape[3:] == (3, 3) else _fwd_numba
    out = fwd(_flat_planes(xp, w.shape[4]), np.ascontiguousarray(w), stride_t, to, ho, wp)
    out = out.reshape(x.shape[0], w.shape[0], to, ho, wp)[..., :wo]
    return np.ascontiguousarray(out)


def conv3d_grad_input(g, w, x_shape, stride_t=1, padding=(0, 0, 0), use_numba=None):
    """Gradient of ``conv3d_forward`` with respect to its input."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    pt, ph, pw = padding
    n, c, t, h, wd = x_shape
    tp, hp, wp = t + 2 * pt, h + 2 * ph, wd + 2 * pw
    if use_numba:
        kw = w.shape[4]
        flat = hp * wp + kw
        if w.shape[3:] == (3, 3):
            gf = _flat_grad(g, wp)
            lead = 2 * wp + 2
            gpad = np.zeros(gf.shape[:3] + (lead + flat,), dtype=gf.dtype)
            gpad[..., lead : lead + gf.shape[3]] = gf
            gx = _grad_input_numba_33(gpad, np.ascontiguousarray(w), tp, flat, stride_t, wp)
        else:
            gx = _grad_input_numba(_flat_grad(g, wp), np.ascontiguousarray(w), tp, flat, stride_t, wp)
        gxp = gx[..., : hp * wp].reshape(n, c, tp, hp, wp)
    else:
        gxp = _grad_input_numpy(g, w, (n, c, tp, hp, wp), stride_t)
    return _unpad_grad(gxp, x_shape, padding)


def conv3d_grad_weight(g, x, kernel, stride_t=1, padding=(0, 0, 0), use_numba=None):
    """Gradient of ``conv3d_forward`` with respect to the kernel weights."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    xp = _pad(x, padding)
    if not use_numba:
        return _grad_weight_numpy(g, xp, kernel, stride_t)
    wp = xp.shape[4]
    gf, xf = _flat_grad(g, wp), _flat_planes(xp, kernel[2])
    if tuple(kernel[1:]) == (3, 3):
        return _grad_weight_numba_33(gf, xf, kernel[0], stride_t, wp)
    return _grad_weight_numba(gf, xf, *kernel, stride_t, wp)
