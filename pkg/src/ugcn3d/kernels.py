"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen at import time: numba is used when it imports cleanly
and the environment variable ``UGCN3D_DISABLE_NUMBA`` is unset (or ``0``).
:func:`set_backend` switches at runtime, which the benchmark and the
backend-agreement tests rely on.

All kernels take and return float64 C-contiguous arrays. Layout for
time-series features is ``(B, C, T, N)``: batch, channel, frame, joint.
"""

import os

import numpy as np

try:
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


_DISABLED = os.environ.get("UGCN3D_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def get_backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    previous, _backend = _backend, name
    return previous


def out_length(t, stride):
    return -(-t // stride)


# ---------------------------------------------------------------------------
# temporal convolution: zero "same" padding, odd kernel, stride 1 or 2

@njit(cache=True)
def _tconv_fwd_nb(x, w, bias, stride):
    B, C, T, N = x.shape
    O, _, K = w.shape
    pad = (K - 1) // 2
    To = (T + stride - 1) // stride
    out = np.empty((B, O, To, N))
    for b in range(B):
        for o in range(O):
            for to in range(To):
                for n in range(N):
                    out[b, o, to, n] = bias[o]
            for c in range(C):
                for k in range(K):
                    wk = w[o, c, k]
                    for to in range(To):
                        t = to * stride + k - pad
                        if t < 0 or t >= T:
                            continue
                        for n in range(N):
                            out[b, o, to, n] += wk * x[b, c, t, n]
    return out


@njit(cache=True)
def _tconv_bwd_nb(x, w, g, stride):
    B, C, T, N = x.shape
    O, _, K = w.shape
    To = g.shape[2]
    pad = (K - 1) // 2
    dx = np.zeros((B, C, T, N))
    dw = np.zeros((O, C, K))
    db = np.zeros(O)
    for b in range(B):
        for o in range(O):
            for to in range(To):
                for n in range(N):
                    db[o] += g[b, o, to, n]
            for c in range(C):
                for k in range(K):
                    wk = w[o, c, k]
                    acc = 0.0
                    for to in range(To):
                        t = to * stride + k - pad
                        if t < 0 or t >= T:
                            continue
                        for n in range(N):
                            gv = g[b, o, to, n]
                            acc += gv * x[b, c, t, n]
                            dx[b, c, t, n] += wk * gv
                    dw[o, c, k] += acc
    return dx, dw, db


def _tap_slices(T, K, stride):
    pad = (K - 1) // 2
    To = out_length(T, stride)
    stop = stride * (To - 1) + 1
    return pad, To, [slice(k, k + stop, stride) for k in range(K)]


def _tconv_fwd_np(x, w, bias, stride):
    B, C, T, N = x.shape
    O, _, K = w.shape
    pad, To, taps = _tap_slices(T, K, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    out = np.zeros((O, B, To, N))
    for k, sl in enumerate(taps):
        out += np.tensordot(w[:, :, k], xp[:, :, sl, :], axes=([1], [1]))
    out += bias[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _tconv_bwd_np(x, w, g, stride):
    B, C, T, N = x.shape
    O, _, K = w.shape
    pad, To, taps = _tap_slices(T, K, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.empty((O, C, K))
    for k, sl in enumerate(taps):
        dw[:, :, k] = np.tensordot(g, xp[:, :, sl, :], axes=([0, 2, 3], [0, 2, 3]))
        dxp[:, :, sl, :] += np.tensordot(w[:, :, k], g, axes=([0], [1])).transpose(1, 0, 2, 3)
    db = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dxp[:, :, pad:pad + T, :]), dw, db


def temporal_conv_forward(x, w, bias, stride):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    if _backend == "numba":
        return _tconv_fwd_nb(x, w, bias, stride)
    return _tconv_fwd_np(x, w, bias, stride)


def temporal_conv_backward(x, w, g, stride):
    """Return ``(dx, dw, dbias)`` for upstream gradient ``g``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _backend == "numba":
        return _tconv_bwd_nb(x, w, g, stride)
    return _tconv_bwd_np(x, w, g, stride)


# ---------------------------------------------------------------------------
# gap filling along time: linear between visible frames, hold at the ends

@njit(cache=True)
def _fill_gaps_nb(values, visible):
    T, N, D = values.shape
    out = values.copy()
    for n in range(N):
        prev = -1
        for t in range(T):
            if not visible[t, n]:
                continue
            if prev == -1:
                for s in range(t):
                    for d in range(D):
                        out[s, n, d] = values[t, n, d]
            elif t - prev > 1:
                span = t - prev
                for s in range(prev + 1, t):
                    a = (s - prev) / span
                    for d in range(D):
                        out[s, n, d] = (1.0 - a) * values[prev, n, d] + a * values[t, n, d]
            prev = t
        for s in range(prev + 1, T):
            for d in range(D):
                out[s, n, d] = values[prev, n, d]
    return out


def _fill_gaps_np(values, visible):
    T, N, D = values.shape
    out = values.copy()
    frames = np.arange(T, dtype=np.float64)
    for n in range(N):
        seen = np.flatnonzero(visible[:, n])
        if len(seen) == T:
            continue
        hidden = np.flatnonzero(~visible[:, n])
        for d in range(D):
            out[hidden, n, d] = np.interp(frames[hidden], frames[seen], values[seen, n, d])
    return out


def fill_gaps(values, visible):
    """Fill hidden ``(T, N, D)`` cells; every joint must be visible somewhere."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    visible = np.ascontiguousarray(visible, dtype=np.bool_)
    if _backend == "numba":
        return _fill_gaps_nb(values, visible)
    return _fill_gaps_np(values, visible)
