"""Finite-difference gradient suite over every differentiable op, the block and a tiny model."""

import time

import numpy as np

from . import stgcn as stgcn_mod
from . import tensor as T
from .model import ModelConfig, build_model
from .stgcn import Initializer, STGCNBlock, spatial_graph_conv
from .tensor import Tensor, grad_check, grad_check_params
from .topology import build_topology, spatial_adjacency
from .train import mpjpe_loss

TOLERANCE = 1e-4


def probe(out, seed):
    """Contract ``out`` with a fixed random tensor so every output coordinate matters."""
    w = np.random.default_rng(seed + 1000).normal(size=out.shape)
    return T.tsum(T.mul(out, Tensor(w)))


def _away_from_zero(gen, shape, low=0.1):
    return gen.uniform(low, 1.0, size=shape) * gen.choice([-1.0, 1.0], size=shape)


def softplus(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._result(np.logaddexp(0.0, x.data), (x,), lambda g: (g * s,), "softplus")


def tiny_config(**kw):
    base = dict(
        joints=3,
        encoder_channels=[4, 4, 4, 4, 8, 8, 8, 8, 8],
        decoder_channels=[8, 4, 4, 4],
        fusion_width=4,
        dropout=0.05,
        output_scale=1.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def randomize_norms(model, gen):
    # non-trivial running statistics so eval-mode norms are not the identity
    for obj, attr in model._buffers().values():
        n = getattr(obj, attr).shape
        val = gen.normal(scale=0.3, size=n) if attr == "running_mean" else gen.uniform(0.5, 2.0, size=n)
        setattr(obj, attr, val)
    for name, p in model.named_parameters().items():
        if name.endswith("shift") or name.endswith("bias"):
            p.data = gen.normal(scale=0.2, size=p.shape)


def end_to_end_error(seed, mode, config=None, batch=2, frames=16, max_coords=6):
    """Max relative gradient error of a random linear probe of a tiny model's output.

    In train mode ReLU kinks feeding batch statistics over a one-frame
    bottleneck make the function too rough for h = 1e-5, so the activation is
    swapped for softplus; that still exercises every backward rule in its
    train-mode composition.
    """
    model = build_model(config or tiny_config(), build_topology([-1, 0, 1]), seed=seed)
    gen = np.random.default_rng(seed + 1000)
    randomize_norms(model, gen)
    shape = (batch, 3, frames, 3)
    x = Tensor(gen.normal(size=shape), requires_grad=True)
    w = Tensor(gen.normal(size=shape))
    loss = lambda: T.tsum(T.mul(model.forward(x, mode, step=0), w))
    params = [x] + model.parameters()
    if mode != "train":
        return grad_check_params(loss, params, max_coords=max_coords, seed=seed)
    saved = stgcn_mod.relu
    stgcn_mod.relu = softplus
    try:
        return grad_check_params(loss, params, max_coords=max_coords, seed=seed)
    finally:
        stgcn_mod.relu = saved


def _primitive_cases(seed):
    gen = np.random.default_rng(seed)
    parts = spatial_adjacency(build_topology([-1, 0, 1])).parts
    n = lambda *s: gen.normal(size=s)
    cases = {
        "add": (lambda t: T.add(t[0], t[1]), [n(3, 4), n(3, 4)]),
        "sub": (lambda t: T.sub(t[0], t[1]), [n(3, 4), n(3, 4)]),
        "mul": (lambda t: T.mul(t[0], t[1]), [n(3, 4), n(3, 4)]),
        "scale": (lambda t: T.scale(t[0], 2.5), [n(3, 4)]),
        "mean": (lambda t: T.mean(t[0]), [n(3, 4)]),
        "relu": (lambda t: T.relu(t[0]), [_away_from_zero(gen, (3, 4))]),
        "dropout": (lambda t: T.dropout(t[0], 0.3, "train", seed=seed, ordinal=1), [n(3, 4)]),
        "concat": (lambda t: T.concat([t[0], t[1]], axis=1), [n(2, 2, 3), n(2, 3, 3)]),
        "matmul": (lambda t: T.matmul(t[0], t[1]), [n(3, 4), n(4, 2)]),
        "joint_mix": (lambda t: T.joint_mix(t[0], parts[1]), [n(2, 2, 4, 3)]),
        "pointwise_conv": (lambda t: T.pointwise_conv(t[0], t[1], t[2]), [n(2, 3, 4, 3), n(2, 3), n(2)]),
        "temporal_conv": (lambda t: T.temporal_conv(t[0], t[1], t[2]), [n(2, 2, 6, 3), n(3, 2, 3), n(3)]),
        "temporal_conv_stride2": (
            lambda t: T.temporal_conv(t[0], t[1], t[2], stride=2), [n(2, 2, 8, 3), n(3, 2, 3), n(3)]),
        "subsample_time": (lambda t: T.subsample_time(t[0], 2), [n(2, 2, 8, 3)]),
        "time_resample": (lambda t: T.time_resample(t[0], 8), [n(2, 2, 4, 3)]),
        "spatial_graph_conv": (lambda t: spatial_graph_conv(t[0], parts, t[1:]), [n(2, 2, 3, 3)] + [n(3, 2) for _ in range(3)]),
    }
    out = {}
    for name, (fn, args) in cases.items():
        out[name] = grad_check(lambda t, fn=fn: probe(fn(t), seed), args)
    out["tsum"] = grad_check(lambda t: T.tsum(t[0]), [n(3, 4)])

    for mode in ("train", "eval"):
        state = T.BatchNormState(3)
        state.scale.data = gen.uniform(0.5, 1.5, 3)
        state.shift.data = n(3)
        state.running_mean = n(3)
        state.running_var = gen.uniform(0.5, 2.0, 3)
        x = Tensor(n(2, 3, 4, 3), requires_grad=True)
        loss = lambda: probe(T.batch_norm(x, state, mode), seed)
        saved = (state.running_mean.copy(), state.running_var.copy())

        def wrapped():
            # keep the running statistics fixed across probes
            state.running_mean, state.running_var = saved[0].copy(), saved[1].copy()
            return loss()

        out[f"batch_norm_{mode}"] = grad_check_params(wrapped, [x, state.scale, state.shift])

    pred = n(2, 3, 4, 5)
    off = gen.uniform(0.5, 1.5, size=pred.shape) * gen.choice([-1.0, 1.0], size=pred.shape)
    off[..., 0] = 0.0
    out["mpjpe_loss"] = grad_check(lambda t: mpjpe_loss(t[0], pred + off), [pred])
    return out


def _block_errors(seed):
    gen = np.random.default_rng(seed)
    parts = spatial_adjacency(build_topology([-1, 0, 1])).parts
    out = {}
    for c_in, c_out, stride in ((2, 3, 2), (3, 3, 1)):
        blk = STGCNBlock(c_in, c_out, Initializer(seed), stride=stride, dropout_rate=0.1)
        x = Tensor(gen.normal(size=(2, c_in, 5, 3)), requires_grad=True)
        params = [x] + list(blk.named_tensors("b").values())
        loss = lambda: probe(blk.forward(x, parts, "train", seed=seed, ordinal=0), seed)
        out[f"stgcn_block_{c_in}to{c_out}_s{stride}"] = grad_check_params(loss, params)
    return out


def run_suite(seeds=range(5), log=None):
    """``{check name: worst relative error over seeds}`` plus elapsed seconds."""
    start = time.perf_counter()
    worst = {}
    for seed in seeds:
        found = {}
        found.update(_primitive_cases(seed))
        found.update(_block_errors(seed))
        found["model_eval"] = end_to_end_error(seed, "eval")
        found["model_train_softplus"] = end_to_end_error(seed, "train", batch=4)
        for k, v in found.items():
            worst[k] = max(worst.get(k, 0.0), v)
        if log is not None:
            log(seed, found)
    return worst, time.perf_counter() - start
