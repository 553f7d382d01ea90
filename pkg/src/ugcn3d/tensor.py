"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Primitive operations on tensors that
require gradients record a node (parents plus a backward rule); calling
:func:`backward` on a scalar output sorts the recorded nodes into a
:class:`Tape`, replays it once in reverse and accumulates gradients into the
``grad`` buffers of leaf tensors. The tape is then released: a second
backward through the same graph raises :class:`TapeAlreadyConsumed`.

Feature maps use the ``(B, C, T, N)`` layout; most ops also accept an
unbatched ``(C, T, N)`` array.
"""

import numpy as np

from . import kernels, rng
from .errors import (
    EvenKernel,
    NonScalarOutput,
    RateOutOfRange,
    ShapeMismatch,
    TapeAlreadyConsumed,
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64, copy=True, ndmin=0)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._op == "leaf"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Topologically ordered list of the nodes reachable from an output."""

    def __init__(self, output):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise TapeAlreadyConsumed(f"graph through {node._op!r} was already back-propagated")
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def replay(self, seed_grad):
        grads = {id(self.nodes[-1]): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def backward(output):
    """Populate ``grad`` of every leaf that ``output`` depends on."""
    if output.data.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
    if output._consumed:
        raise TapeAlreadyConsumed("this output was already back-propagated")
    if not output.requires_grad:
        return
    Tape(output).replay(np.ones_like(output.data))


# ---------------------------------------------------------------------------
# elementwise and reductions


def _check_same(x, y, op):
    if x.shape != y.shape:
        raise ShapeMismatch(f"{op}: shapes {x.shape} and {y.shape} differ")


def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _check_same(x, y, "add")
    return Tensor._result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _check_same(x, y, "sub")
    return Tensor._result(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _check_same(x, y, "mul")
    xd, yd = x.data, y.data
    return Tensor._result(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def scale(x, c):
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


def tsum(x):
    shape = x.shape
    return Tensor._result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x):
    shape, n = x.shape, x.data.size
    return Tensor._result(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def relu(x):
    keep = x.data > 0
    return Tensor._result(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def dropout(x, rate, mode, seed=0, ordinal=0):
    """Inverted dropout; the mask depends only on ``(seed, ordinal)``.

    ``ordinal`` may be an int or a tuple of ints (e.g. ``(step, layer)``).
    """
    if not 0.0 <= rate < 1.0:
        raise RateOutOfRange(f"dropout rate {rate} not in [0, 1)")
    if mode != "train" or rate == 0.0:
        return x
    key = tuple(ordinal) if isinstance(ordinal, tuple) else (ordinal,)
    keep = rng.generator(seed, rng.DROPOUT, *key).random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    return Tensor._result(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._result(data, tensors, back, "concat")


# ---------------------------------------------------------------------------
# linear maps


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def joint_mix(x, adjacency):
    """Mix joints with a constant ``N x N'`` matrix: ``x[..., n] @ A``."""
    A = np.asarray(adjacency, dtype=np.float64)
    if x.shape[-1] != A.shape[0]:
        raise ShapeMismatch(f"joint_mix: {x.shape[-1]} joints vs adjacency {A.shape}")
    return Tensor._result(x.data @ A, (x,), lambda g: (g @ A.T,), "joint_mix")


def pointwise_conv(x, w, bias=None):
    """Channel mixing ``y[c'] = sum_c w[c', c] x[c] (+ bias[c'])`` on axis -3."""
    if w.ndim != 2 or x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeMismatch(f"pointwise_conv: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    y = np.moveaxis(np.tensordot(xd, wd, axes=([-3], [1])), -1, -3)
    parents = (x, w)
    if bias is not None:
        y = y + bias.data[:, None, None]
        parents = (x, w, bias)
    lead = tuple(i for i in range(xd.ndim) if i != xd.ndim - 3)

    def back(g):
        dx = np.moveaxis(np.tensordot(g, wd, axes=([-3], [0])), -1, -3) if x.requires_grad else None
        dw = np.tensordot(g, xd, axes=(lead, lead)) if w.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=lead)

    return Tensor._result(np.ascontiguousarray(y), parents, back, "pointwise_conv")


def temporal_conv(x, w, bias=None, stride=1):
    """1-D convolution along frames, per joint, zero "same" padding.

    ``x`` is ``(B, C_in, T, N)`` (or unbatched ``(C_in, T, N)``), ``w`` is
    ``(C_out, C_in, K)`` with odd ``K``; output length is ``ceil(T / stride)``.
    """
    if w.ndim != 3:
        raise ShapeMismatch(f"temporal_conv: weight must be 3-D, got {w.shape}")
    if w.shape[2] % 2 == 0:
        raise EvenKernel(f"temporal kernel length {w.shape[2]} is even")
    if stride not in (1, 2):
        raise ShapeMismatch(f"temporal_conv: stride must be 1 or 2, got {stride}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"temporal_conv: input {x.shape} vs weight {w.shape}")
    bd = np.zeros(w.shape[0]) if bias is None else bias.data
    y = kernels.temporal_conv_forward(xd, w.data, bd, stride)
    parents = (x, w) if bias is None else (x, w, bias)
    wd = w.data

    def back(g):
        g4 = g[None] if unbatched else g
        dx, dw, db = kernels.temporal_conv_backward(xd, wd, g4, stride)
        if unbatched:
            dx = dx[0]
        return (dx, dw) if bias is None else (dx, dw, db)

    return Tensor._result(y[0] if unbatched else y, parents, back, "temporal_conv")


def subsample_time(x, stride):
    """Keep every ``stride``-th frame (axis -2), starting at frame 0."""
    if stride == 1:
        return x
    shape = x.shape

    def back(g):
        dx = np.zeros(shape)
        dx[..., ::stride, :] = g
        return (dx,)

    return Tensor._result(np.ascontiguousarray(x.data[..., ::stride, :]), (x,), back, "subsample_time")


def resample_matrix(t_in, t_out):
    """``(t_in, t_out)`` linear-interpolation weights with aligned endpoints."""
    M = np.zeros((t_in, t_out))
    if t_in == 1 or t_out == 1:
        M[0, :] = 1.0
        return M
    for i in range(t_out):
        src = i * (t_in - 1) / (t_out - 1)
        lo = min(int(np.floor(src)), t_in - 2)
        frac = src - lo
        M[lo, i] += 1.0 - frac
        M[lo + 1, i] += frac
    return M


def time_resample(x, new_t):
    """Linearly resample the frame axis (-2) to ``new_t`` frames."""
    t = x.shape[-2]
    if t < 1 or new_t < 1:
        raise ShapeMismatch(f"time_resample: lengths must be >= 1 (got {t} -> {new_t})")
    if new_t == t:
        return x
    M = resample_matrix(t, new_t)
    y = np.ascontiguousarray(np.swapaxes(np.swapaxes(x.data, -1, -2) @ M, -1, -2))

    def back(g):
        return (np.ascontiguousarray(np.swapaxes(np.swapaxes(g, -1, -2) @ M.T, -1, -2)),)

    return Tensor._result(y, (x,), back, "time_resample")


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Learnable scale/shift plus running statistics for ``C`` channels."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batch_norm(x, state, mode):
    """Per-channel normalization over batch, frames and joints.

    Train mode uses batch statistics and updates the running estimates
    (unbiased variance, exponential ``momentum``); eval mode uses the running
    estimates.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeMismatch(f"batch_norm: input {x.shape} vs {state.channels} channels")
    axes = (0, 2, 3)
    gamma = state.scale.data[None, :, None, None]
    beta = state.shift.data[None, :, None, None]
    xd = x.data
    if mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased

        def back(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

        def back(g):
            return (g * gamma * inv[None, :, None, None], (g * xhat).sum(axis=axes), g.sum(axis=axes))

    y = xhat * gamma + beta
    return Tensor._result(y, (x, state.scale, state.shift), back, "batch_norm")


# ---------------------------------------------------------------------------
# verification


def grad_check(f, inputs, h=1e-5):
    """Max relative error between backward and central differences.

    ``f`` maps a list of tensors (one per array in ``inputs``) to a scalar
    tensor and must be pure. Relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(leaves)
    backward(out)
    worst = 0.0
    for k, (leaf, base) in enumerate(zip(leaves, arrays)):
        analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
        for idx in np.ndindex(base.shape):
            values = []
            for step in (h, -h):
                bumped = base.copy()
                bumped[idx] += step
                args = [Tensor(bumped if i == k else a) for i, a in enumerate(arrays)]
                values.append(f(args).item())
            num = (values[0] - values[1]) / (2 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst


def grad_check_params(loss_fn, params, h=1e-5, max_coords=None, seed=0):
    """Like :func:`grad_check` but perturbs existing parameter tensors in place.

    ``loss_fn()`` must rebuild the scalar from ``params`` on every call.
    With ``max_coords`` only that many randomly chosen coordinates per
    tensor are probed.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    gen = rng.generator(seed, 0)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(gen.choice(flat.size, max_coords, replace=False))
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            fp = loss_fn().item()
            flat[i] = original - h
            fm = loss_fn().item()
            flat[i] = original
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
