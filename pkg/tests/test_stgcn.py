import numpy as np
import pytest

from oracles import graph_conv_loops
from ugcn3d.errors import EvenKernel, ShapeMismatch
from ugcn3d.stgcn import Initializer, STGCNBlock, spatial_graph_conv
from ugcn3d.tensor import Tensor, grad_check, grad_check_params, mul, tsum
from ugcn3d.topology import build_topology, spatial_adjacency


def probe_loss(y, seed=99):
    return tsum(mul(y, Tensor(np.random.default_rng(seed).normal(size=y.shape))))


class TestSpatialGraphConv:
    def test_identity_partition(self, rng):
        x = rng.normal(size=(2, 3, 4))
        out = spatial_graph_conv(Tensor(x), np.eye(4)[None], [Tensor(np.eye(2))])
        np.testing.assert_array_equal(out.data, x)

    def test_single_joint_is_channel_mixing(self, rng):
        parts = spatial_adjacency(build_topology([-1])).parts
        x = rng.normal(size=(3, 5, 1))
        W = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
        out = spatial_graph_conv(Tensor(x), parts, W).data
        np.testing.assert_allclose(out[:, :, 0], W[0].data @ x[:, :, 0], atol=1e-12)

    def test_loop_oracle(self, chain3, rng):
        parts = spatial_adjacency(chain3).parts
        for _ in range(20):
            x = rng.normal(size=(2, 3, 3))
            W = [rng.normal(size=(4, 2)) for _ in range(3)]
            out = spatial_graph_conv(Tensor(x), parts, [Tensor(w) for w in W]).data
            np.testing.assert_allclose(out, graph_conv_loops(x, parts, W), atol=1e-12)

    def test_joint_mismatch(self, chain3):
        with pytest.raises(ShapeMismatch):
            spatial_graph_conv(Tensor(np.ones((2, 3, 4))), spatial_adjacency(chain3).parts, [Tensor(np.eye(2))] * 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, chain3, seed):
        gen = np.random.default_rng(seed)
        parts = spatial_adjacency(chain3).parts
        args = [gen.normal(size=(2, 2, 3, 3))] + [gen.normal(size=(3, 2)) for _ in range(3)]
        assert grad_check(lambda t: probe_loss(spatial_graph_conv(t[0], parts, t[1:])), args) < 1e-4


class TestBlock:
    def test_stride2_shape(self, h36m, rng):
        blk = STGCNBlock(3, 16, Initializer(0), stride=2)
        out = blk.forward(Tensor(rng.normal(size=(2, 3, 16, 17))), spatial_adjacency(h36m).parts, "train")
        assert out.shape == (2, 16, 8, 17)

    @pytest.mark.parametrize("T", [1, 5, 9])
    def test_odd_lengths_ceil(self, chain3, rng, T):
        blk = STGCNBlock(2, 2, Initializer(0), stride=2)
        out = blk.forward(Tensor(rng.normal(size=(1, 2, T, 3))), spatial_adjacency(chain3).parts, "eval")
        assert out.shape == (1, 2, -(-T // 2), 3)

    def test_same_shape(self, chain3, rng):
        blk = STGCNBlock(4, 4, Initializer(0))
        assert blk.res_w is None
        x = Tensor(rng.normal(size=(2, 4, 6, 3)))
        assert blk.forward(x, spatial_adjacency(chain3).parts, "train").shape == x.shape

    def test_repeatable(self, chain3, rng):
        x = rng.normal(size=(2, 3, 8, 3))
        parts = spatial_adjacency(chain3).parts
        outs = []
        for _ in range(2):
            blk = STGCNBlock(3, 5, Initializer(11), stride=2, dropout_rate=0.2)
            outs.append(blk.forward(Tensor(x), parts, "train", seed=4, ordinal=(0, 1)).data)
        assert outs[0].tobytes() == outs[1].tobytes()

    def test_wrong_channels(self, chain3):
        blk = STGCNBlock(3, 5, Initializer(0))
        with pytest.raises(ShapeMismatch):
            blk.forward(Tensor(np.ones((1, 4, 8, 3))), spatial_adjacency(chain3).parts, "eval")

    def test_even_kernel(self):
        with pytest.raises(EvenKernel):
            STGCNBlock(3, 3, Initializer(0), temporal_kernel=4)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("c_in, c_out, stride", [(2, 3, 2), (3, 3, 1)])
    def test_gradient(self, chain3, seed, c_in, c_out, stride):
        gen = np.random.default_rng(seed)
        parts = spatial_adjacency(chain3).parts
        blk = STGCNBlock(c_in, c_out, Initializer(seed), stride=stride, dropout_rate=0.1)
        x = Tensor(gen.normal(size=(2, c_in, 5, 3)), requires_grad=True)
        params = [x] + list(blk.named_tensors("b").values())
        loss = lambda: probe_loss(blk.forward(x, parts, "train", seed=seed, ordinal=0), seed)
        assert grad_check_params(loss, params) < 1e-4
