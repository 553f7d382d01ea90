"""Pose sequences: file formats, synthetic motion, occlusion and gap filling."""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels, rng
from .errors import ConfigInvalid, FormatError, JointNeverVisible, ParseError, RateOutOfRange, ShapeMismatch
from .kinematics import RotationSet, axis_angle_matrix, forward_kinematics, rest_bones
from .topology import default_rest_positions, default_topology


@dataclass
class PoseSequence:
    positions: np.ndarray          # (T, N, 3) millimeters
    mask: np.ndarray = None        # (T, N) bool, True = observed
    label: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise ShapeMismatch(f"positions must be (T, N, 3), got {self.positions.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.positions.shape[:2]:
                raise ShapeMismatch(f"mask {self.mask.shape} does not match positions {self.positions.shape}")

    @property
    def frames(self):
        return self.positions.shape[0]

    @property
    def joints(self):
        return self.positions.shape[1]

    def dense(self):
        """Positions with hidden cells filled by :func:`interpolate_missing`."""
        if self.mask is None or self.mask.all():
            return self.positions
        return interpolate_missing(self).positions

    def to_channels(self):
        """``(3, T, N)`` layout used by the network."""
        return np.ascontiguousarray(self.dense().transpose(2, 0, 1))


@dataclass
class Sample:
    input: PoseSequence
    target: PoseSequence

    @property
    def label(self):
        return self.target.label or self.input.label


# ---------------------------------------------------------------------------
# synthetic motion


@dataclass
class SynthConfig:
    sequences: int = 8
    frames: int = 64
    components: int = 2                    # sinusoids per swing angle
    amplitude: tuple = (0.1, 0.5)          # radians
    frequency: tuple = (0.5, 2.0)          # cycles per sequence
    root_amplitude: float = 200.0          # mm
    noise_sigma: float = 20.0              # mm
    occlusion: float = 0.0                 # fraction of non-root cells hidden
    groups: int = 1
    seed: int = 0
    topology: object = None
    rest: np.ndarray = None

    def validate(self):
        if self.sequences < 1:
            raise ConfigInvalid("sequences must be >= 1")
        if self.frames < 16 or self.frames % 16:
            raise ConfigInvalid(f"frames must be a positive multiple of 16, got {self.frames}")
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise_sigma must be >= 0")
        if self.components < 1 or self.groups < 1:
            raise ConfigInvalid("components and groups must be >= 1")
        lo, hi = self.amplitude
        flo, fhi = self.frequency
        if not (0 <= lo <= hi and 0 <= flo <= fhi):
            raise ConfigInvalid("amplitude and frequency bounds must be ordered and non-negative")
        if not 0.0 <= self.occlusion < 1.0:
            raise RateOutOfRange(f"occlusion rate {self.occlusion} not in [0, 1)")
        return self


def _sinusoids(gen, shape, cfg, times):
    """Sum of ``cfg.components`` random sinusoids per entry of ``shape``."""
    k = (cfg.components,) + shape
    amp = gen.uniform(*cfg.amplitude, size=k)
    freq = gen.uniform(*cfg.frequency, size=k)
    phase = gen.uniform(0.0, 2 * np.pi, size=k)
    arg = 2 * np.pi * freq[..., None] * times + phase[..., None]
    return (amp[..., None] * np.sin(arg)).sum(axis=0)


def synth_motion(cfg, index, topology, rest):
    """Ground-truth ``(T, N, 3)`` trajectory for sequence ``index``."""
    gen = rng.generator(cfg.seed, rng.SYNTH, index)
    n, T = topology.joint_count, cfg.frames
    times = np.arange(T) / T
    bones = rest_bones(topology, rest)
    rot = RotationSet.identity(n, (T,))
    angles = _sinusoids(gen, (n, 2), cfg, times)            # (N, 2, T)
    for k, _ in topology.bones():
        bhat = bones[k] / np.linalg.norm(bones[k])
        e1 = np.cross(bhat, np.eye(3)[np.argmin(np.abs(bhat))])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(bhat, e1)
        swing = angles[k, 0][:, None] * e1 + angles[k, 1][:, None] * e2   # (T, 3), perpendicular to bone
        theta = np.linalg.norm(swing, axis=1)
        axis = np.where(theta[:, None] > 0, swing, e1)
        rot.rotations[:, k] = axis_angle_matrix(axis, theta)
    root = gen.uniform(0.0, cfg.root_amplitude, size=(cfg.components, 3)) if cfg.root_amplitude else None
    if root is not None:
        freq = gen.uniform(*cfg.frequency, size=(cfg.components, 3))
        phase = gen.uniform(0.0, 2 * np.pi, size=(cfg.components, 3))
        arg = 2 * np.pi * freq[..., None] * times + phase[..., None]
        rot.root_translation = (root[..., None] * np.sin(arg)).sum(axis=0).T
    return forward_kinematics(topology, rest, rot)


def generate_synthetic(cfg):
    """List of :class:`Sample` pairs (noisy, possibly occluded input; clean target)."""
    cfg.validate()
    topology = cfg.topology or default_topology()
    rest = default_rest_positions() if cfg.rest is None else np.asarray(cfg.rest, dtype=np.float64)
    samples = []
    for i in range(cfg.sequences):
        label = f"g{i % cfg.groups}"
        truth = synth_motion(cfg, i, topology, rest)
        noisy = truth.copy()
        if cfg.noise_sigma > 0:
            noisy += rng.generator(cfg.seed, rng.NOISE, i).normal(scale=cfg.noise_sigma, size=truth.shape)
        seq = PoseSequence(noisy, label=label)
        if cfg.occlusion > 0:
            seq = apply_occlusion(seq, cfg.occlusion, seed=(cfg.seed, i), root=topology.root)
        samples.append(Sample(seq, PoseSequence(truth, label=label)))
    return samples


# ---------------------------------------------------------------------------
# occlusion and gap filling


def apply_occlusion(seq, rate, seed=0, root=0):
    """Hide ``floor(rate * T * (N - 1))`` non-root cells chosen by a seeded shuffle."""
    if not 0.0 <= rate < 1.0:
        raise RateOutOfRange(f"occlusion rate {rate} not in [0, 1)")
    T, N = seq.frames, seq.joints
    cells = [(t, i) for t in range(T) for i in range(N) if i != root]
    count = math.floor(rate * len(cells) + 1e-9)
    key = tuple(seed) if isinstance(seed, tuple) else (seed,)
    order = rng.generator(key[0], rng.OCCLUSION, *key[1:]).permutation(len(cells))
    mask = np.ones((T, N), dtype=bool) if seq.mask is None else seq.mask.copy()
    for c in order[:count]:
        mask[cells[c]] = False
    positions = seq.positions.copy()
    positions[~mask] = 0.0
    return PoseSequence(positions, mask, seq.label)


def interpolate_missing(seq):
    """Fill hidden cells linearly in time; hold the nearest value past the ends."""
    if seq.mask is None:
        return PoseSequence(seq.positions.copy(), None, seq.label)
    never = np.flatnonzero(~seq.mask.any(axis=0))
    if len(never):
        raise JointNeverVisible(f"joints {never.tolist()} are hidden in every frame")
    filled = kernels.fill_gaps(seq.positions, seq.mask)
    filled[seq.mask] = seq.positions[seq.mask]
    return PoseSequence(filled, None, seq.label)


# ---------------------------------------------------------------------------
# .skl binary format

SKL_MAGIC = b"SKL1"
SKL_VERSION = 1


def encode_skl(seq):
    label = seq.label.encode()
    flags = 1 if seq.mask is not None else 0
    parts = [
        SKL_MAGIC,
        struct.pack("<IIIBH", SKL_VERSION, seq.frames, seq.joints, flags, len(label)),
        label,
        np.ascontiguousarray(seq.positions, dtype="<f4").tobytes(),
    ]
    if flags:
        parts.append(seq.mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_skl(buf):
    if len(buf) < 4 or buf[:4] != SKL_MAGIC:
        raise FormatError("bad magic, expected b'SKL1'", offset=0)
    head = struct.calcsize("<IIIBH")
    if len(buf) < 4 + head:
        raise FormatError("truncated header", offset=len(buf))
    version, T, N, flags, label_len = struct.unpack_from("<IIIBH", buf, 4)
    if version != SKL_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if flags & ~1:
        raise FormatError(f"unknown flag bits {flags:#x}", offset=16)
    pos = 4 + head
    need = label_len + 12 * T * N + (T * N if flags & 1 else 0)
    if len(buf) - pos < need:
        raise FormatError(f"truncated body: need {need} bytes, have {len(buf) - pos}", offset=len(buf))
    if len(buf) - pos > need:
        raise FormatError(f"{len(buf) - pos - need} trailing bytes", offset=pos + need)
    try:
        label = buf[pos:pos + label_len].decode()
    except UnicodeDecodeError:
        raise FormatError("label is not UTF-8", offset=pos) from None
    pos += label_len
    positions = np.frombuffer(buf, dtype="<f4", count=T * N * 3, offset=pos).astype(np.float64)
    pos += 12 * T * N
    mask = None
    if flags & 1:
        raw = np.frombuffer(buf, dtype=np.uint8, count=T * N, offset=pos)
        if np.any(raw > 1):
            raise FormatError("mask bytes must be 0 or 1", offset=pos + int(np.argmax(raw > 1)))
        mask = raw.reshape(T, N).astype(bool)
    return PoseSequence(positions.reshape(T, N, 3), mask, label)


def write_skl(seq, path):
    with open(path, "wb") as fh:
        fh.write(encode_skl(seq))


def read_skl(path):
    with open(path, "rb") as fh:
        return decode_skl(fh.read())


# ---------------------------------------------------------------------------
# text tables: T rows of 3N columns, joint-major x, y, z


def import_table(path, frames, joints):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            cells = text.replace(",", " ").split()
            if len(cells) != 3 * joints:
                raise ParseError(f"expected {3 * joints} columns, found {len(cells)}", row=len(rows) + 1)
            values = []
            for col, cell in enumerate(cells, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"not a number: {cell!r}", row=len(rows) + 1, column=col) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {cell!r}", row=len(rows) + 1, column=col)
                values.append(v)
            rows.append(values)
    if len(rows) != frames:
        raise ParseError(f"expected {frames} rows, found {len(rows)}", row=len(rows) + 1)
    return PoseSequence(np.array(rows, dtype=np.float64).reshape(frames, joints, 3))


def export_table(seq, path):
    flat = seq.dense().reshape(seq.frames, -1)
    with open(path, "w") as fh:
        for row in flat:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(samples, directory):
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        write_skl(s.input, os.path.join(directory, f"input_{i:05d}.skl"))
        write_skl(s.target, os.path.join(directory, f"target_{i:05d}.skl"))


def load_dataset(directory):
    names = sorted(f for f in os.listdir(directory) if f.startswith("input_") and f.endswith(".skl"))
    samples = []
    for name in names:
        target = os.path.join(directory, "target_" + name[len("input_"):])
        if not os.path.exists(target):
            raise FormatError(f"{name} has no matching target file {os.path.basename(target)}")
        samples.append(Sample(read_skl(os.path.join(directory, name)), read_skl(target)))
    return samples


def stack_inputs(samples):
    """``(B, 3, T, N)`` network input, gaps pre-filled."""
    return np.stack([s.input.to_channels() for s in samples])


def stack_targets(samples):
    return np.stack([s.target.to_channels() for s in samples])
