"""MPJPE metric and loss, SGD training loop, grouped evaluation reports."""

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .data import stack_inputs, stack_targets
from .errors import BadTemporalLength, EmptyDataset, ShapeMismatch, ValidationError
from .model import save_weights
from .tensor import Tensor, backward

LOSS_EPS = 1e-12


def mpjpe(pred, gt, root=0):
    """Root-relative mean per-joint position error in millimeters.

    ``pred`` and ``gt`` are ``(..., N, 3)``; the mean runs over every
    leading index and every joint (the root contributes zero).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim < 2 or pred.shape[-1] != 3:
        raise ShapeMismatch(f"mpjpe: shapes {pred.shape} and {gt.shape} must match and end in 3")
    if not 0 <= root < pred.shape[-2]:
        raise ValidationError(f"root {root} out of range for {pred.shape[-2]} joints")
    d = (pred - pred[..., root:root + 1, :]) - (gt - gt[..., root:root + 1, :])
    return float(np.sqrt((d ** 2).sum(axis=-1)).mean())


def mpjpe_loss(pred, gt, root=0, eps=LOSS_EPS):
    """Differentiable MPJPE on ``(B, 3, T, N)`` tensors; norm is ``sqrt(d^2 + eps)``."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 3:
        raise ShapeMismatch(f"mpjpe_loss: shapes {pred.shape} and {gt.shape}")
    p = pred.data
    d = (p - p[..., root:root + 1]) - (gt - gt[..., root:root + 1])
    norm = np.sqrt((d ** 2).sum(axis=1, keepdims=True) + eps)
    count = norm.size

    def back(g):
        gd = float(g) * d / norm / count
        gd[..., root] -= gd.sum(axis=-1)
        return (gd,)

    return Tensor._result(np.array(norm.mean()), (pred,), back, "mpjpe_loss")


@dataclass
class Hyperparams:
    batch_size: int = 256
    epochs: int = 110
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_at: tuple = (0.6, 0.85)
    decay_factor: float = 0.1
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("learning_rate must be >= 0 and momentum in [0, 1)")
        return self

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch`` under step decay."""
        lr = self.learning_rate
        for frac in self.decay_at:
            if epoch > int(frac * self.epochs):
                lr *= self.decay_factor
        return lr


PAPER_HYPERPARAMS = Hyperparams()
DESK_HYPERPARAMS = Hyperparams(batch_size=8, epochs=200)


def _check_dataset(samples):
    if not samples:
        raise EmptyDataset("dataset has no sequences")
    shapes = {s.input.positions.shape for s in samples} | {s.target.positions.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeMismatch(f"sequences differ in shape: {sorted(shapes)}")
    T = samples[0].input.frames
    if T % 16:
        raise BadTemporalLength(f"T = {T} is not a multiple of 16")


def train(model, samples, hp, val=None, checkpoint_dir=None, log=None):
    """SGD with momentum on the MPJPE loss.

    Returns a list of ``(epoch, mean train loss, val MPJPE or None)``.
    Batches are drawn from a per-epoch seeded permutation.
    """
    hp.validate()
    _check_dataset(samples)
    root = model.topology.root
    inputs = stack_inputs(samples)
    targets = stack_targets(samples)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    history = []
    step = 0
    for epoch in range(1, hp.epochs + 1):
        lr = hp.lr_at(epoch)
        order = rng.generator(hp.seed, rng.BATCHING, epoch).permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), hp.batch_size):
            idx = np.sort(order[start:start + hp.batch_size])
            model.zero_grad()
            loss = mpjpe_loss(model.forward(inputs[idx], "train", step=step), targets[idx], root)
            backward(loss)
            step += 1
            total += loss.item() * len(idx)
            for p, v in zip(params, velocity):
                if p.grad is None:
                    continue
                v *= hp.momentum
                v += p.grad
                p.data = p.data - lr * v
        val_score = None
        if val:
            val_score = evaluate(model, val).overall_refined
        history.append((epoch, total / len(samples), val_score))
        if checkpoint_dir is not None:
            save_weights(model, os.path.join(checkpoint_dir, "checkpoint.ugcw"))
        if log is not None:
            log(epoch, history[-1])
    return history


def refine(model, samples, batch_size=16):
    """Eval-mode network output as ``(B, T, N, 3)`` positions."""
    out = []
    for start in range(0, len(samples), batch_size):
        x = stack_inputs(samples[start:start + batch_size])
        y = model.forward(x, "eval", step=0).data
        out.append(y.transpose(0, 2, 3, 1))
    return np.concatenate(out)


@dataclass
class GroupResult:
    group: str
    count: int
    baseline_mpjpe_mm: float
    refined_mpjpe_mm: float


@dataclass
class EvalReport:
    groups: list = field(default_factory=list)
    overall_baseline: float = 0.0
    overall_refined: float = 0.0
    count: int = 0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "count", "baseline_mpjpe_mm", "refined_mpjpe_mm"])
        for g in self.groups:
            w.writerow([g.group, g.count, f"{g.baseline_mpjpe_mm:.6f}", f"{g.refined_mpjpe_mm:.6f}"])
        w.writerow(["all", self.count, f"{self.overall_baseline:.6f}", f"{self.overall_refined:.6f}"])
        return buf.getvalue()

    def to_text(self):
        width = max([5] + [len(g.group) for g in self.groups])
        lines = [f"{'group':<{width}}  {'count':>5}  {'baseline':>10}  {'refined':>10}"]
        for g in self.groups:
            lines.append(f"{g.group:<{width}}  {g.count:>5}  {g.baseline_mpjpe_mm:>10.3f}  {g.refined_mpjpe_mm:>10.3f}")
        lines.append(f"{'all':<{width}}  {self.count:>5}  {self.overall_baseline:>10.3f}  {self.overall_refined:>10.3f}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return asdict(self)


def _score(model, sample, root):
    """(baseline, refined) MPJPE of one sequence."""
    gt = sample.target.positions
    base = sample.input.dense()
    y = model.forward(sample.input.to_channels()[None], "eval", step=0).data[0].transpose(1, 2, 0)
    return mpjpe(base, gt, root), mpjpe(y, gt, root)


def evaluate(model, samples, group_key=None, threads=1):
    """Per-group and overall MPJPE of network output and of its input.

    ``group_key`` maps a sample to its group name (default: its label).
    Sequences may be scored on a thread pool; the reduction order is fixed.
    """
    if not samples:
        raise EmptyDataset("dataset has no sequences")
    key = group_key or (lambda s: s.label or "all")
    root = model.topology.root
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            scores = list(pool.map(lambda s: _score(model, s, root), samples))
    else:
        scores = [_score(model, s, root) for s in samples]
    by_group = {}
    for s, sc in zip(samples, scores):
        by_group.setdefault(key(s), []).append(sc)
    report = EvalReport(count=len(samples))
    for name in sorted(by_group):
        arr = np.array(by_group[name])
        report.groups.append(GroupResult(name, len(arr), float(arr[:, 0].mean()), float(arr[:, 1].mean())))
    all_scores = np.array(scores)
    report.overall_baseline = float(all_scores[:, 0].mean())
    report.overall_refined = float(all_scores[:, 1].mean())
    return report
