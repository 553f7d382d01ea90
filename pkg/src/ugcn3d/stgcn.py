"""The ST-GCN block: partitioned spatial graph convolution, then temporal
convolution, with batch norm, ReLU, dropout and a residual path."""

import numpy as np

from . import rng
from .errors import EvenKernel, ShapeMismatch
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    dropout,
    joint_mix,
    pointwise_conv,
    relu,
    subsample_time,
    temporal_conv,
)


def spatial_graph_conv(x, parts, weights):
    """``sum_j W_j . x . A_j``: channels mixed by ``W_j``, joints by ``A_j``."""
    parts = np.asarray(parts)
    if parts.ndim == 2:
        parts = parts[None]
    if len(weights) != len(parts):
        raise ShapeMismatch(f"{len(weights)} weight matrices for {len(parts)} adjacency parts")
    if x.shape[-1] != parts.shape[-1]:
        raise ShapeMismatch(f"input has {x.shape[-1]} joints, adjacency has {parts.shape[-1]}")
    out = None
    for A, W in zip(parts, weights):
        term = pointwise_conv(joint_mix(x, A), W)
        out = term if out is None else add(out, term)
    return out


class Initializer:
    """Hands out fan-in-scaled uniform weights from consecutive Philox streams."""

    def __init__(self, seed):
        self.seed = seed
        self.count = 0

    def uniform(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        gen = rng.generator(self.seed, rng.INIT, self.count)
        self.count += 1
        return Tensor(gen.uniform(-bound, bound, size=shape), requires_grad=True)

    @staticmethod
    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)


class STGCNBlock:
    def __init__(self, c_in, c_out, init, partitions=3, temporal_kernel=3, stride=1, dropout_rate=0.0):
        if temporal_kernel % 2 == 0:
            raise EvenKernel(f"temporal kernel length {temporal_kernel} is even")
        self.c_in, self.c_out = c_in, c_out
        self.stride = stride
        self.temporal_kernel = temporal_kernel
        self.dropout_rate = dropout_rate
        self.gcn = [init.uniform((c_out, c_in), c_in * partitions) for _ in range(partitions)]
        self.bn1 = BatchNormState(c_out)
        self.tcn_w = init.uniform((c_out, c_out, temporal_kernel), c_out * temporal_kernel)
        self.bn2 = BatchNormState(c_out)
        if c_in != c_out or stride != 1:
            self.res_w = init.uniform((c_out, c_in), c_in)
            self.res_b = init.zeros(c_out)
        else:
            self.res_w = self.res_b = None

    def named_tensors(self, prefix):
        """Parameters and running statistics, keyed by dotted name."""
        out = {f"{prefix}.gcn.{j}": w for j, w in enumerate(self.gcn)}
        out[f"{prefix}.tcn.weight"] = self.tcn_w
        for tag, bn in (("bn1", self.bn1), ("bn2", self.bn2)):
            out[f"{prefix}.{tag}.scale"] = bn.scale
            out[f"{prefix}.{tag}.shift"] = bn.shift
        if self.res_w is not None:
            out[f"{prefix}.res.weight"] = self.res_w
            out[f"{prefix}.res.bias"] = self.res_b
        return out

    def named_buffers(self, prefix):
        out = {}
        for tag, bn in (("bn1", self.bn1), ("bn2", self.bn2)):
            out[f"{prefix}.{tag}.running_mean"] = (bn, "running_mean")
            out[f"{prefix}.{tag}.running_var"] = (bn, "running_var")
        return out

    def forward(self, x, parts, mode, seed=0, ordinal=0):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"block expects (B, {self.c_in}, T, N), got {x.shape}")
        h = spatial_graph_conv(x, parts, self.gcn)
        h = relu(batch_norm(h, self.bn1, mode))
        # no bias: the following batch norm cancels it
        h = temporal_conv(h, self.tcn_w, None, self.stride)
        h = batch_norm(h, self.bn2, mode)
        h = dropout(h, self.dropout_rate, mode, seed, ordinal)
        if self.res_w is None:
            res = x
        else:
            res = pointwise_conv(subsample_time(x, self.stride), self.res_w, self.res_b)
        return relu(add(h, res))
