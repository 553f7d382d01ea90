"""Naive loop implementations used as independent references."""

import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def temporal_conv_loops(x, w, bias, stride):
    """``x`` is (C, T, N); zero padding, output at frames 0, stride, 2*stride, ..."""
    C, T, N = x.shape
    O, _, K = w.shape
    pad = K // 2
    frames = list(range(0, T, stride))
    out = np.zeros((O, len(frames), N))
    for o in range(O):
        for ti, t in enumerate(frames):
            for n in range(N):
                s = bias[o]
                for c in range(C):
                    for k in range(K):
                        src = t + k - pad
                        if 0 <= src < T:
                            s += w[o, c, k] * x[c, src, n]
                out[o, ti, n] = s
    return out


def graph_conv_loops(x, parts, weights):
    """sum_j W_j x A_j for x of shape (C, T, N)."""
    C, T, N = x.shape
    O = weights[0].shape[0]
    out = np.zeros((O, T, N))
    for A, W in zip(parts, weights):
        for o in range(O):
            for t in range(T):
                for w in range(N):
                    s = 0.0
                    for c in range(C):
                        for v in range(N):
                            s += W[o, c] * x[c, t, v] * A[v, w]
                    out[o, t, w] += s
    return out


def mpjpe_loops(pred, gt, root):
    """pred, gt are (T, N, 3)."""
    T, N, _ = pred.shape
    total = 0.0
    for t in range(T):
        for i in range(N):
            sq = 0.0
            for c in range(3):
                d = (pred[t, i, c] - pred[t, root, c]) - (gt[t, i, c] - gt[t, root, c])
                sq += d * d
            total += math.sqrt(sq)
    return total / (T * N)
