"""KMeans++ pseudo-labels, cluster purity, and centroid-neighbourhood retrieval."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClusteringResult:
    centroids: np.ndarray
    assignment: np.ndarray
    objective: float
    n_iterations: int
    restarts_used: int
    history: list[float] = field(default_factory=list)
    seed: int | None = None
    restart_histories: list[list[float]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


def _check_features(features, k):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an N x d matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must be in [1, N={len(x)}]")
    return x


def sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0)


def kmeans_pp_init(features, k: int, seed: int) -> np.ndarray:
    """D^2 seeding: first centroid uniform, later ones proportional to squared distance."""
    x = _check_features(features, k)
    rng = np.random.default_rng(seed)
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # every point already coincides with a centroid
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def assign(features, centroids) -> np.ndarray:
    """Nearest centroid per row; ties go to the lower centroid index."""
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: features {x.shape}, centroids {c.shape}")
    return sq_distances(x, c).argmin(axis=1)


def objective_of(features, centroids, labels) -> float:
    x = np.asarray(features, dtype=np.float64)
    return float(((x - np.asarray(centroids)[labels]) ** 2).sum(1).mean())


def _repair_empty(x, centroids, labels):
    counts = np.bincount(labels, minlength=len(centroids))
    empty = np.flatnonzero(counts == 0)
    if not len(empty):
        return centroids, labels
    dist = ((x - centroids[labels]) ** 2).sum(1)
    order = np.argsort(-dist, kind="stable")
    used = 0
    for j in empty:
        if used >= len(order) or dist[order[used]] <= 0:
            break
        p = order[used]
        used += 1
        centroids[j] = x[p]
        labels[p] = j
    return centroids, labels


def _lloyd(x, centroids, max_iter, tol):
    labels = assign(x, centroids)
    centroids, labels = _repair_empty(x, centroids, labels)
    labels = assign(x, centroids)
    obj = objective_of(x, centroids, labels)
    history = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        new_c = centroids.copy()
        for j in range(len(centroids)):
            members = labels == j
            if members.any():
                new_c[j] = x[members].mean(0)
        new_labels = assign(x, new_c)
        new_c, new_labels = _repair_empty(x, new_c, new_labels)
        new_labels = assign(x, new_c)
        new_obj = objective_of(x, new_c, new_labels)
        if new_obj > obj:
            # rounding in the mean update only; keep the previous state
            break
        history.append(new_obj)
        converged = np.array_equal(new_labels, labels) or obj - new_obj <= tol * max(obj, 1e-300)
        centroids, labels, obj = new_c, new_labels, new_obj
        if converged or obj == 0:
            break
    return centroids, labels, obj, it, history


def kmeans_fit(features, k: int, restarts: int = 10, max_iter: int = 300, tol: float = 1e-6,
               seed: int = 0, l2_normalize: bool = False) -> ClusteringResult:
    """Best of ``restarts`` Lloyd runs from KMeans++ seeds (ties keep the earliest restart)."""
    x = _check_features(features, k)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if l2_normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    best, histories = None, []
    for r, ss in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        init = kmeans_pp_init(x, k, int(ss.generate_state(1)[0]))
        c, labels, obj, iters, hist = _lloyd(x, init, max_iter, tol)
        histories.append(hist)
        if best is None or obj < best.objective:
            best = ClusteringResult(c, labels, obj, iters, r + 1, hist, seed)
    best.restarts_used = restarts
    best.restart_histories = histories
    return best


def cluster_accuracy(assignment, true_labels) -> float:
    """Label each cluster by its majority class (ties to the lower id) and score all samples."""
    a = np.asarray(assignment)
    y = np.asarray(true_labels)
    if a.size == 0:
        raise ValueError("empty assignment")
    if a.shape != y.shape:
        raise ValueError("assignment and labels differ in length")
    correct = 0
    for c in np.unique(a):
        correct += np.bincount(y[a == c]).max()
    return correct / a.size


def nearest_to_centroid(features, centroids, assignment, top_n: int) -> dict[int, list[int]]:
    """Per cluster, sample indices ordered by distance to that cluster's centroid."""
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    a = np.asarray(assignment)
    out = {}
    for j in range(len(c)):
        members = np.flatnonzero(a == j)
        d = ((x[members] - c[j]) ** 2).sum(1)
        out[j] = members[np.argsort(d, kind="stable")[:top_n]].tolist()
    return out


def save_clustering(result: ClusteringResult, sample_ids, prefix, extra: dict | None = None):
    """Write ``<prefix>.assign.csv``, ``<prefix>.centroids.bin`` and ``<prefix>.summary.json``."""
    with open(f"{prefix}.assign.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "cluster"])
        for sid, c in zip(sample_ids, result.assignment):
            w.writerow([sid, int(c)])
    k, d = result.centroids.shape
    with open(f"{prefix}.centroids.bin", "wb") as fh:
        fh.write(struct.pack("<II", k, d))
        fh.write(np.ascontiguousarray(result.centroids, dtype="<f4").tobytes())
    summary = {"objective": result.objective, "iterations": result.n_iterations, "seed": result.seed,
               "k": k, "restarts": result.restarts_used, **(extra or {})}
    with open(f"{prefix}.summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_assignment(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["sample_id", "cluster"]:
        raise ValueError(f"{path}: expected header sample_id,cluster")
    return {sid: int(c) for sid, c in rows[1:]}


def read_centroids(path) -> np.ndarray:
    with open(path, "rb") as fh:
        k, d = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(4 * k * d), dtype="<f4").reshape(k, d).astype(np.float64)
