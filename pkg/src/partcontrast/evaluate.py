"""Frozen-feature evaluation: extraction, linear SVM probe, transfer, pair accuracy, plots."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cluster import ClusteringResult, nearest_to_centroid
from .data import PointCloud
from .segment import Segment, SegmentPair, random_part, random_view, resample_segment

logger = logging.getLogger(__name__)

MODES = ("full", "part", "perspective")
RESULT_COLUMNS = ["stage", "mode", "train_ds", "eval_ds", "k_clusters", "C", "accuracy", "seed",
                  "checkpoint_id", "config_hash"]


@dataclass
class FeatureTable:
    sample_ids: list[str]
    embeddings: np.ndarray
    labels: np.ndarray
    split: str = "train"
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids in feature table")
        if len(self.sample_ids) != len(self.embeddings) or len(self.labels) != len(self.embeddings):
            raise ValueError("feature table columns differ in length")

    def __len__(self):
        return len(self.sample_ids)

    def subset(self, idx) -> "FeatureTable":
        idx = np.asarray(idx)
        return FeatureTable([self.sample_ids[i] for i in idx], self.embeddings[idx], self.labels[idx], self.split)


@dataclass
class ProbeResult:
    train_dataset: str
    eval_dataset: str
    accuracy: float
    regularization: float
    feature_stage: str
    input_mode: str


@dataclass
class LinearProbe:
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray
    classes: np.ndarray
    C: float

    def decision(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.coef.T + self.intercept

    def predict(self, x):
        return self.classes[self.decision(x).argmax(axis=1)]


def partial_input(points: np.ndarray, mode: str, seed: int, min_points: int, sid: str = "",
                  n_planes: int = 15) -> np.ndarray | None:
    if mode == "full":
        return points
    if mode == "part":
        seg = random_part(points, seed, min_points, n_planes, sid)
    elif mode == "perspective":
        seg = random_view(points, seed, min_points, sid)
    else:
        raise ValueError(f"unknown input mode {mode!r}")
    return None if seg is None else seg.points


def _fixed_size(points, n_points, center, seed):
    if n_points is not None and len(points) != n_points:
        points = resample_segment(Segment(points, "", 0, ""), n_points, seed).points
    if center:
        points = points - points.mean(0)
    return points


@torch.no_grad()
def embed_batches(encoder, point_sets: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    was = encoder.training
    encoder.eval()
    out = []
    try:
        for i in range(0, len(point_sets), batch_size):
            x = torch.as_tensor(np.stack(point_sets[i:i + batch_size]), dtype=torch.float32)
            out.append(encoder(x).numpy().astype(np.float64))
    finally:
        encoder.train(was)
    return np.concatenate(out) if out else np.zeros((0, encoder.out_channels))


def derive_inputs(clouds: Sequence[PointCloud], mode: str, seed: int, min_points: int = 512,
                  n_points: int | None = None, center: bool = False, n_planes: int = 15):
    """Per-object network inputs for ``mode``; returns (kept indices, point arrays, skipped ids)."""
    if mode not in MODES:
        raise ValueError(f"unknown input mode {mode!r}")
    seeds = np.random.SeedSequence(seed).spawn(len(clouds))
    kept, inputs, skipped = [], [], []
    for i, (c, ss) in enumerate(zip(clouds, seeds)):
        s1, s2 = (int(v) for v in ss.generate_state(2))
        pts = partial_input(c.points, mode, s1, min_points, c.source_id, n_planes)
        if pts is None:
            logger.warning("%s: no %s input with >= %d points after 20 tries; skipped", c.source_id, mode, min_points)
            skipped.append(c.source_id)
            continue
        if mode == "full":
            inputs.append(_fixed_size(pts, None, False, s2))
        else:
            inputs.append(_fixed_size(pts, n_points, center, s2))
        kept.append(i)
    return kept, inputs, skipped


def extract_features(clouds: Sequence[PointCloud], encoder, mode: str = "full", seed: int = 0,
                     min_points: int = 512, n_points: int | None = None, center: bool = True,
                     split: str = "train", batch_size: int = 64, n_planes: int = 15) -> FeatureTable:
    """Eval-mode embeddings of full objects, one random part, or one random perspective view."""
    kept, inputs, skipped = derive_inputs(clouds, mode, seed, min_points, n_points, center, n_planes)
    emb = embed_batches(encoder, inputs, batch_size)
    labels = np.array([-1 if clouds[i].label is None else clouds[i].label for i in kept], dtype=np.int64)
    table = FeatureTable([clouds[i].source_id for i in kept], emb, labels, split, skipped)
    return table


def train_linear_probe(table: FeatureTable, regularization: float = 1.0, seed: int = 0,
                       tol: float = 1e-4, max_iter: int = 100000) -> LinearProbe:
    """One-vs-rest hinge-loss linear SVM on standardized features."""
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.svm import LinearSVC

    y = np.asarray(table.labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    x = np.asarray(table.embeddings, dtype=np.float64)
    mean = x.mean(0)
    scale = x.std(0)
    scale[scale == 0] = 1.0
    svc = LinearSVC(C=regularization, loss="hinge", dual=True, tol=tol, max_iter=max_iter,
                    random_state=seed % 2**32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        svc.fit((x - mean) / scale, y)
    coef, intercept = svc.coef_, svc.intercept_
    if len(classes) == 2:
        coef = np.vstack([-coef, coef])
        intercept = np.concatenate([-intercept, intercept])
    return LinearProbe(mean, scale, coef, intercept, classes, regularization)


def probe_accuracy(probe: LinearProbe, table: FeatureTable) -> float:
    if table.embeddings.shape[1] != probe.mean.shape[0]:
        raise ValueError(f"feature dimension {table.embeddings.shape[1]} != probe dimension {probe.mean.shape[0]}")
    if len(table) == 0:
        raise ValueError("empty evaluation table")
    return float(np.mean(probe.predict(table.embeddings) == table.labels))


def select_probe(table: FeatureTable, c_values=(0.1, 1.0, 10.0), val_fraction: float = 0.1,
                 seed: int = 0) -> tuple[LinearProbe, dict[float, float]]:
    """Pick C on a stratified validation carve-out of the train table, then refit on all of it."""
    c_values = list(c_values)
    if len(c_values) == 1:
        return train_linear_probe(table, c_values[0], seed), {}
    rng = np.random.default_rng(seed)
    val = []
    for c in np.unique(table.labels):
        idx = np.flatnonzero(table.labels == c)
        n_val = int(round(len(idx) * val_fraction))
        if 0 < n_val < len(idx):
            val.extend(rng.choice(idx, n_val, replace=False))
    val = np.sort(np.asarray(val, dtype=int))
    fit = np.setdiff1d(np.arange(len(table)), val)
    scores = {}
    if len(val) and len(np.unique(table.labels[fit])) >= 2:
        for c in c_values:
            scores[c] = probe_accuracy(train_linear_probe(table.subset(fit), c, seed), table.subset(val))
        best = max(c_values, key=lambda c: (scores[c], -c_values.index(c)))
    else:
        best = c_values[0]
    return train_linear_probe(table, best, seed), scores


def evaluate_transfer(probe: LinearProbe, eval_table: FeatureTable, train_dataset: str = "",
                      eval_dataset: str = "", stage: str = "contrastnet", mode: str = "full") -> ProbeResult:
    return ProbeResult(train_dataset, eval_dataset, probe_accuracy(probe, eval_table), probe.C, stage, mode)


@torch.no_grad()
def pair_logits(model, pairs: Sequence[SegmentPair], segment_points: int, center: bool = True,
                seed: int = 0, batch_size: int = 64) -> np.ndarray:
    was = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    out = []
    try:
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            a = [_fixed_size(p.a.points, segment_points, center, int(rng.integers(2**63))) for p in chunk]
            b = [_fixed_size(p.b.points, segment_points, center, int(rng.integers(2**63))) for p in chunk]
            ta = torch.as_tensor(np.stack(a), dtype=torch.float32)
            tb = torch.as_tensor(np.stack(b), dtype=torch.float32)
            out.append(model(ta, tb).numpy())
    finally:
        model.train(was)
    return np.concatenate(out)


def part_contrast_accuracy(model, pairs: Sequence[SegmentPair], segment_points: int, center: bool = True,
                           seed: int = 0, batch_size: int = 64) -> float:
    """Fraction of held-out pairs whose argmax logit equals the same-object label."""
    if not pairs:
        raise ValueError("empty pair stream")
    logits = pair_logits(model, pairs, segment_points, center, seed, batch_size)
    labels = np.array([p.label for p in pairs])
    return float(np.mean(logits.argmax(1) == labels))


def tsne_embedding(table: FeatureTable, seed: int = 0, perplexity: float = 30.0, n_iter: int = 1000) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(table)
    if n < 2:
        raise ValueError("t-SNE needs at least two samples")
    perplexity = min(perplexity, max((n - 1) / 3, 1.0))
    tsne = TSNE(n_components=2, perplexity=perplexity, max_iter=n_iter, random_state=seed % 2**32, init="pca",
                learning_rate="auto")
    return tsne.fit_transform(np.asarray(table.embeddings, dtype=np.float64))


def tsne_plot(table: FeatureTable, out_path, seed: int = 0, perplexity: float = 30.0, n_iter: int = 1000,
              class_names: Sequence[str] | None = None) -> np.ndarray:
    """Write a label-coloured t-SNE scatter (PNG) and ``<out>.csv`` with the 2-D coordinates."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    coords = tsne_embedding(table, seed, perplexity, n_iter)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "x", "y"])
        for sid, lab, (cx, cy) in zip(table.sample_ids, table.labels, coords):
            w.writerow([sid, int(lab), f"{cx:.6f}", f"{cy:.6f}"])
    fig, ax = plt.subplots(figsize=(7, 6))
    cmap = plt.get_cmap("tab20" if len(np.unique(table.labels)) > 10 else "tab10")
    for i, lab in enumerate(np.unique(table.labels)):
        m = table.labels == lab
        name = class_names[lab] if class_names is not None and 0 <= lab < len(class_names) else str(lab)
        ax.scatter(coords[m, 0], coords[m, 1], s=6, color=cmap(i % cmap.N), label=name)
    ax.legend(markerscale=3, fontsize=7, loc="best")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return coords


def montage_rows(features, clustering: ClusteringResult, top_n: int, max_clusters: int | None = None):
    """Cluster ids (largest first) and their nearest-to-centroid sample indices."""
    near = nearest_to_centroid(features, clustering.centroids, clustering.assignment, top_n)
    sizes = np.bincount(clustering.assignment, minlength=clustering.k)
    order = [int(j) for j in np.argsort(-sizes, kind="stable") if sizes[j] > 0]
    if max_clusters is not None:
        order = order[:max_clusters]
    return [(j, near[j]) for j in order]


def cluster_montage(clouds: Sequence[PointCloud], features, clustering: ClusteringResult, top_n: int,
                    out_path, max_clusters: int | None = 10):
    """One row per cluster: the sample nearest its centroid followed by the next ``top_n - 1``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = montage_rows(features, clustering, top_n, max_clusters)
    fig = plt.figure(figsize=(1.6 * top_n, 1.6 * max(len(rows), 1)))
    for r, (j, members) in enumerate(rows):
        for col, idx in enumerate(members):
            ax = fig.add_subplot(len(rows), top_n, r * top_n + col + 1, projection="3d")
            p = clouds[idx].points
            ax.scatter(p[:, 0], p[:, 1], p[:, 2], s=0.5, c=p[:, 2], cmap="viridis")
            ax.set_axis_off()
            if col == 0:
                ax.set_title(f"cluster {j}", fontsize=6)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return rows


def append_results(path, rows: Sequence[dict]):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
