"""Training loops for ContrastNet and ClusterNet, with the staircase learning-rate schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from decimal import Decimal
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..data import AugmentationConfig, augment_points
from ..errors import NumericFailure
from ..segment import Segment, resample_segment, sample_pairs
from .checkpoint import load_checkpoint, save_checkpoint
from .heads import ClusterNet, ContrastNet, cross_entropy

logger = logging.getLogger(__name__)

MIN_LR = 1e-5


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    lr_decay_rate: float = 0.7
    lr_decay_steps: int = 200000
    batch_size: int = 32
    dropout: float = 0.5
    epochs: int = 10
    seed: int = 0
    pairs_per_epoch: int = 2048
    positive_fraction: float = 0.5
    segment_points: int = 512
    center_segments: bool = True
    nan_check_every: int = 100

    def validate(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if not 0 < self.lr_decay_rate <= 1:
            raise ValueError("lr_decay_rate must be in (0, 1]")
        if self.lr_decay_steps < 1 or self.batch_size < 2 or self.epochs < 0:
            raise ValueError("lr_decay_steps >= 1, batch_size >= 2 and epochs >= 0 required")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """``base_lr * rate ** floor(step / decay_steps)``, floored at 1e-5.

    Evaluated in decimal so that the decayed constants come out as the
    nearest doubles (0.0007, 0.00049, ...).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    k = step // cfg.lr_decay_steps
    lr = float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.lr_decay_rate)) ** k)
    return max(lr, MIN_LR)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    accuracy: float


class History(list):
    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "lr", "loss", "accuracy"])
            for r in self:
                w.writerow([r.epoch, r.step, f"{r.lr:.8g}", f"{r.loss:.6f}", f"{r.accuracy:.6f}"])


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=(cfg.momentum, 0.999), eps=1e-8)


def prepare_points(point_sets: Sequence[np.ndarray], rng: np.random.Generator, n_points: int | None,
                   aug: AugmentationConfig | None, center: bool) -> torch.Tensor:
    out = []
    for pts in point_sets:
        if n_points is not None and len(pts) != n_points:
            seg = resample_segment(Segment(pts, "", 0, ""), n_points, int(rng.integers(2**63)))
            pts = seg.points
        if center:
            pts = pts - pts.mean(axis=0)
        if aug is not None:
            pts = augment_points(pts, aug, rng)
        out.append(pts)
    return torch.as_tensor(np.stack(out), dtype=torch.float32)


def _params_finite(model) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def _snapshot(model, optimizer, step, epoch, kind, path, meta):
    if path is None:
        return None
    snap = Path(path).with_suffix(".nan-snapshot.npz")
    save_checkpoint(snap, model, kind, step, epoch, meta, optimizer)
    return str(snap)


def _run_epochs(model, kind, batches_for_epoch, cfg, checkpoint_path, resume, meta):
    """Shared optimizer loop. ``batches_for_epoch(epoch, rng)`` yields (inputs, targets)."""
    cfg.validate()
    optimizer = make_optimizer(model, cfg)
    step, start_epoch, history = 0, 0, History()
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        info = load_checkpoint(checkpoint_path, model, optimizer)
        step, start_epoch = info["step"], info["epoch"]
        history.extend(EpochRecord(**r) for r in info.get("history", []))
        logger.info("resuming %s from step %d (epoch %d)", kind, step, start_epoch)
    for epoch in range(start_epoch, cfg.epochs):
        ss = np.random.SeedSequence([cfg.seed, epoch])
        torch.manual_seed(int(ss.generate_state(1)[0]))
        rng = np.random.default_rng(ss)
        model.train()
        losses, correct, seen = [], 0, 0
        for inputs, targets in batches_for_epoch(epoch, rng):
            lr = lr_at(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits = model(*inputs)
            loss = cross_entropy(logits, targets)
            if not torch.isfinite(loss):
                snap = _snapshot(model, optimizer, step, epoch, kind, checkpoint_path, meta)
                raise NumericFailure(f"{kind}: non-finite loss at step {step}", snap)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            if step % cfg.nan_check_every == 0 and not _params_finite(model):
                snap = _snapshot(model, optimizer, step, epoch, kind, checkpoint_path, meta)
                raise NumericFailure(f"{kind}: non-finite parameters at step {step}", snap)
            losses.append(loss.item() * len(targets))
            correct += int((logits.argmax(-1) == targets).sum())
            seen += len(targets)
        rec = EpochRecord(epoch + 1, step, lr_at(max(step - 1, 0), cfg),
                          float(np.sum(losses) / max(seen, 1)), correct / max(seen, 1))
        history.append(rec)
        logger.info("%s epoch %d step %d loss %.4f acc %.3f", kind, rec.epoch, step, rec.loss, rec.accuracy)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, kind, step, epoch + 1,
                            {**meta, "history": [asdict(r) for r in history]}, optimizer)
    model.eval()
    return model, history


def train_contrast(parts: Sequence[Segment], model: ContrastNet, cfg: TrainConfig,
                   aug: AugmentationConfig | None = None, checkpoint_path=None, resume=False,
                   meta: dict | None = None):
    """Siamese part-verification training on freshly sampled pairs every epoch."""
    if not parts:
        raise ValueError("empty part dataset")

    def batches(epoch, rng):
        pairs = sample_pairs(parts, cfg.pairs_per_epoch, cfg.positive_fraction, int(rng.integers(2**63)))
        for i in batch_starts(len(pairs), cfg.batch_size):
            chunk = pairs[i:i + cfg.batch_size]
            a = prepare_points([p.a.points for p in chunk], rng, cfg.segment_points, aug, cfg.center_segments)
            b = prepare_points([p.b.points for p in chunk], rng, cfg.segment_points, aug, cfg.center_segments)
            yield (a, b), torch.tensor([p.label for p in chunk])

    return _run_epochs(model, "contrastnet", batches, cfg, checkpoint_path, resume, meta or {})


def train_cluster(points: np.ndarray | Sequence[np.ndarray], pseudo_labels, model: ClusterNet,
                  cfg: TrainConfig, aug: AugmentationConfig | None = None, checkpoint_path=None,
                  resume=False, meta: dict | None = None, n_points: int | None = None):
    """Cluster-ID classification on full objects; inputs carry no class labels."""
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if len(labels) != len(points):
        raise ValueError("pseudo_labels and points differ in length")
    if labels.min() < 0 or labels.max() >= model.n_clusters:
        raise ValueError(f"pseudo-labels must lie in [0, {model.n_clusters})")

    def batches(epoch, rng):
        order = rng.permutation(len(labels))
        for i in batch_starts(len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = prepare_points([points[j] for j in idx], rng, n_points, aug, False)
            yield (x,), torch.from_numpy(labels[idx])

    return _run_epochs(model, "clusternet", batches, cfg, checkpoint_path, resume, meta or {})


def batch_starts(n_items: int, batch_size: int) -> range:
    """Batch offsets; a trailing batch shorter than half a batch (or than 2) is dropped."""
    min_tail = max(2, batch_size // 2)
    return range(0, max(n_items - min_tail + 1, 0), batch_size)
