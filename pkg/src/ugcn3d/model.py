"""The 3D-UGCN refinement network.

Stages, for an input of shape ``(B, 3, T, N)``:

1. batch norm on the raw coordinates;
2. encoder of nine ST-GCN blocks; blocks at the configured (1-based, even)
   ordinals use stride 2, so the bottleneck runs at ``T / 16``;
3. decoder of four ST-GCN blocks, each followed by a x2 time resample and
   summed with a pointwise projection of the encoder feature at the same
   time scale (UNet skip);
4. fusion: the four decoder outputs (scales T/8, T/4, T/2, T) are resampled
   to ``T``, projected to ``fusion_width`` channels and summed (or
   concatenated);
5. pointwise head to 3 channels, added to the input when
   ``residual_output`` is set.
"""

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import BadTemporalLength, ConfigInvalid, ConfigMismatch, FormatError, ShapeMismatch
from .stgcn import Initializer, STGCNBlock
from .tensor import BatchNormState, add, as_tensor, batch_norm, concat, pointwise_conv, scale, time_resample
from .topology import default_topology, spatial_adjacency


@dataclass
class ModelConfig:
    joints: int = 17
    input_channels: int = 3
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256, 256, 256, 256, 256])
    stride2_ordinals: list = field(default_factory=lambda: [2, 4, 6, 8])
    decoder_channels: list = field(default_factory=lambda: [128, 64, 32, 16])
    temporal_kernel: int = 3
    dropout: float = 0.05
    fusion_width: int = 16
    residual_output: bool = True
    fusion_mode: str = "sum"
    # head output is in units of this many millimeters
    output_scale: float = 10.0
    # stride-1 blocks run before the nine encoder blocks; [16, 32, 64, 128, 256]
    # gives the 14-module reading of the architecture
    channel_raise: list = field(default_factory=list)

    def validate(self):
        def fail(rule):
            raise ConfigInvalid(rule)

        if self.joints < 1:
            fail("joints must be >= 1")
        if self.input_channels != 3:
            fail("input_channels must be 3 (x, y, z)")
        if len(self.encoder_channels) != 9:
            fail(f"encoder must have 9 modules, got {len(self.encoder_channels)}")
        if len(self.decoder_channels) != 4:
            fail(f"decoder must have 4 modules, got {len(self.decoder_channels)}")
        bad = [o for o in self.stride2_ordinals if not (1 <= o <= 9 and o % 2 == 0)]
        if bad:
            fail(f"stride2_ordinals must be even ordinals in 1..9, got {bad}")
        if len(set(self.stride2_ordinals)) != len(self.stride2_ordinals):
            fail("stride2_ordinals contains duplicates")
        if 2 ** len(self.stride2_ordinals) != 16:
            fail(f"product of encoder strides must be 16, got {2 ** len(self.stride2_ordinals)}")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels + self.channel_raise):
            fail("channel counts must be positive")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            fail(f"temporal_kernel must be odd and positive, got {self.temporal_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            fail(f"dropout must be in [0, 1), got {self.dropout}")
        if self.fusion_width < 1:
            fail("fusion_width must be >= 1")
        if not self.output_scale > 0:
            fail(f"output_scale must be positive, got {self.output_scale}")
        if self.fusion_mode not in ("sum", "concat"):
            fail(f"fusion_mode must be 'sum' or 'concat', got {self.fusion_mode!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown model config fields {sorted(extra)}")
        return cls(**d).validate()

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                desc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not valid JSON ({exc.msg})", offset=exc.pos) from None
        if not isinstance(desc, dict):
            raise FormatError(f"{path}: expected a JSON object of config fields")
        return cls.from_dict(desc)


def desk_config(joints=17):
    """Small profile used for laptop-scale runs and the test suite."""
    return ModelConfig(
        joints=joints,
        encoder_channels=[16, 16, 32, 32, 32, 32, 32, 32, 32],
        decoder_channels=[32, 32, 16, 16],
        dropout=0.05,
        fusion_width=16,
    )


class UGCNModel:
    def __init__(self, config, topology, seed=0):
        config.validate()
        if topology.joint_count != config.joints:
            raise ConfigInvalid(f"config has {config.joints} joints, topology has {topology.joint_count}")
        self.config = config
        self.topology = topology
        self.seed = seed
        self.adjacency = spatial_adjacency(topology)
        self.calls = 0
        self.trace = []
        init = Initializer(seed)
        k, p = config.temporal_kernel, config.dropout
        self.input_bn = BatchNormState(config.input_channels)

        self.raise_blocks, c = [], config.input_channels
        for width in config.channel_raise:
            self.raise_blocks.append(STGCNBlock(c, width, init, temporal_kernel=k, dropout_rate=p))
            c = width
        self.encoder = []
        for i, width in enumerate(config.encoder_channels, start=1):
            stride = 2 if i in config.stride2_ordinals else 1
            self.encoder.append(STGCNBlock(c, width, init, temporal_kernel=k, stride=stride, dropout_rate=p))
            c = width

        # channel count and time divisor of every feature a skip may draw from
        sources = [(config.input_channels, 1)] + [(w, 1) for w in config.channel_raise]
        div = 1
        for i, width in enumerate(config.encoder_channels, start=1):
            div *= 2 if i in config.stride2_ordinals else 1
            sources.append((width, div))
        self.skip_index = []
        self.decoder, self.skip_w, self.skip_b = [], [], []
        for level, width in enumerate(config.decoder_channels):
            target = 16 >> (level + 1)
            idx = max(j for j, (_, d) in enumerate(sources) if d == target)
            self.skip_index.append(idx)
            self.decoder.append(STGCNBlock(c, width, init, temporal_kernel=k, dropout_rate=p))
            self.skip_w.append(init.uniform((width, sources[idx][0]), sources[idx][0]))
            self.skip_b.append(init.zeros(width))
            c = width

        fw = config.fusion_width
        self.fuse_w = [init.uniform((fw, w), w) for w in config.decoder_channels]
        self.fuse_b = [init.zeros(fw) for _ in config.decoder_channels]
        head_in = fw * (len(config.decoder_channels) if config.fusion_mode == "concat" else 1)
        self.head_w = init.uniform((3, head_in), head_in)
        self.head_b = init.zeros(3)

    # -- state ---------------------------------------------------------------

    def named_parameters(self):
        out = {"input_bn.scale": self.input_bn.scale, "input_bn.shift": self.input_bn.shift}
        for tag, blocks in (("raise", self.raise_blocks), ("enc", self.encoder), ("dec", self.decoder)):
            for i, blk in enumerate(blocks):
                out.update(blk.named_tensors(f"{tag}.{i:02d}"))
        for i in range(len(self.decoder)):
            out[f"skip.{i:02d}.weight"] = self.skip_w[i]
            out[f"skip.{i:02d}.bias"] = self.skip_b[i]
            out[f"fuse.{i:02d}.weight"] = self.fuse_w[i]
            out[f"fuse.{i:02d}.bias"] = self.fuse_b[i]
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def _buffers(self):
        out = {
            "input_bn.running_mean": (self.input_bn, "running_mean"),
            "input_bn.running_var": (self.input_bn, "running_var"),
        }
        for tag, blocks in (("raise", self.raise_blocks), ("enc", self.encoder), ("dec", self.decoder)):
            for i, blk in enumerate(blocks):
                out.update(blk.named_buffers(f"{tag}.{i:02d}"))
        return out

    def state_dict(self):
        """Every tensor that defines the model, as ``name -> array``."""
        state = {name: t.data for name, t in self.named_parameters().items()}
        state.update({name: getattr(obj, attr) for name, (obj, attr) in self._buffers().items()})
        state["graph.adjacency"] = self.adjacency.parts
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        for name in sorted(set(expected) | set(state), key=str.encode):
            if name not in state:
                raise ConfigMismatch(f"tensor {name!r} missing from weights")
            if name not in expected:
                raise ConfigMismatch(f"unexpected tensor {name!r} in weights")
            if np.shape(state[name]) != np.shape(expected[name]):
                raise ConfigMismatch(
                    f"tensor {name!r}: weights have shape {np.shape(state[name])}, "
                    f"config expects {np.shape(expected[name])}"
                )
        if not np.array_equal(state["graph.adjacency"], self.adjacency.parts):
            raise ConfigMismatch("tensor 'graph.adjacency': weights were trained on a different topology")
        params = self.named_parameters()
        buffers = self._buffers()
        for name, value in state.items():
            if name in params:
                params[name].data = np.array(value, dtype=np.float64)
            elif name in buffers:
                obj, attr = buffers[name]
                setattr(obj, attr, np.array(value, dtype=np.float64))

    def parameters(self):
        return list(self.named_parameters().values())

    def parameter_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def zero_head(self):
        self.head_w.data[...] = 0.0
        self.head_b.data[...] = 0.0

    # -- forward -------------------------------------------------------------

    def forward(self, x, mode="eval", step=None):
        """Refine ``(B, 3, T, N)`` coordinates; ``T`` must be a multiple of 16.

        ``step`` keys the dropout masks; when omitted an internal call
        counter is used and advanced.
        """
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[3] != cfg.joints:
            raise ShapeMismatch(f"expected (B, {cfg.input_channels}, T, {cfg.joints}), got {x.shape}")
        T = x.shape[2]
        if T % 16 != 0 or T == 0:
            raise BadTemporalLength(f"T = {T} is not a positive multiple of 16")
        if step is None:
            step = self.calls
            self.calls += 1
        parts = self.adjacency.parts
        self.trace = []
        ordinal = 0

        def run(block, h, name):
            nonlocal ordinal
            out = block.forward(h, parts, mode, seed=self.seed, ordinal=(step, ordinal))
            ordinal += 1
            self.trace.append((name, out.shape))
            return out

        h = batch_norm(x, self.input_bn, mode)
        sources = [h]
        for i, blk in enumerate(self.raise_blocks):
            h = run(blk, h, f"raise.{i:02d}")
            sources.append(h)
        for i, blk in enumerate(self.encoder):
            h = run(blk, h, f"enc.{i:02d}")
            sources.append(h)

        decoded = []
        for level, blk in enumerate(self.decoder):
            h = run(blk, h, f"dec.{level:02d}")
            h = time_resample(h, 2 * h.shape[2])
            skip = pointwise_conv(sources[self.skip_index[level]], self.skip_w[level], self.skip_b[level])
            h = add(h, skip)
            decoded.append(h)

        projected = [
            pointwise_conv(time_resample(d, T), w, b) for d, w, b in zip(decoded, self.fuse_w, self.fuse_b)
        ]
        if cfg.fusion_mode == "concat":
            fused = concat(projected, axis=1)
        else:
            fused = projected[0]
            for p in projected[1:]:
                fused = add(fused, p)
        out = scale(pointwise_conv(fused, self.head_w, self.head_b), cfg.output_scale)
        if cfg.residual_output:
            out = add(out, x)
        return out

    __call__ = forward

    def encoder_time_scales(self):
        """Frame count after each encoder block in the most recent forward."""
        return [shape[2] for name, shape in self.trace if name.startswith("enc.")]


def build_model(config, topology=None, seed=0):
    if topology is None:
        topology = default_topology()
    return UGCNModel(config, topology, seed)


# ---------------------------------------------------------------------------
# weights file: little-endian, tensors sorted bytewise by name

MAGIC = b"UGCW"
VERSION = 1


def encode_state(state):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state, key=str.encode):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_state(buf):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated weights file: need {n} bytes", offset=pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError("bad magic, expected b'UGCW'", offset=0)
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version}", offset=4)
    state = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", take(2))
        at = pos
        try:
            name = take(length).decode()
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=at) from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", offset=pos)
    return state


def save_weights(model, path):
    with open(path, "wb") as fh:
        fh.write(encode_state(model.state_dict()))


def load_weights(path, config, topology=None, seed=0):
    with open(path, "rb") as fh:
        state = decode_state(fh.read())
    model = build_model(config, topology, seed)
    model.load_state_dict(state)
    return model
