"""The three training stages plus evaluation, driven by an :class:`ExperimentConfig`.

Run directory layout::

    <out>/<name>/manifest.json
    <out>/<name>/pretrain/contrastnet.npz, history.csv, pair_accuracy.csv
    <out>/<name>/cluster/k<K>.assign.csv, k<K>.centroids.bin, k<K>.summary.json,
                         features.npz, purity.csv
    <out>/<name>/clusternet/clusternet-k<K>.npz, history-k<K>.csv
    <out>/<name>/evaluate/results.csv, tsne-*.png/.csv, montage-k<K>.png
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cluster import ClusteringResult, cluster_accuracy, kmeans_fit, read_assignment, read_centroids, save_clustering
from .config import DatasetSpec, ExperimentConfig
from .data import PointCloud, load_dataset, make_synthetic_dataset, normalize_unit_sphere
from .errors import ConfigError, DataError
from .evaluate import (append_results, cluster_montage, evaluate_transfer, extract_features,
                       part_contrast_accuracy, select_probe, tsne_plot)
from .nn.checkpoint import load_checkpoint, read_meta
from .nn.heads import ClusterNet, ContrastNet
from .nn.train import train_cluster, train_contrast
from .segment import build_part_dataset, sample_pairs

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *tags) -> int:
    """Stable per-purpose seed from the global seed and string tags."""
    h = hashlib.sha256(json.dumps([seed, *map(str, tags)]).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ------------------------------------------------------------------ manifest

class Manifest:
    """Append-only JSON record of stage runs in a run directory."""

    def __init__(self, run_dir: Path, config_hash: str):
        self.path = Path(run_dir) / "manifest.json"
        self.config_hash = config_hash

    def load(self) -> dict:
        if self.path.exists():
            with open(self.path) as fh:
                return json.load(fh)
        return {"config_hash": self.config_hash, "library_version": __version__, "stages": []}

    def append(self, stage: str, **info):
        data = self.load()
        entry = {"stage": stage, "config_hash": self.config_hash,
                 "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **info}
        data["stages"].append(entry)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(data, fh, indent=2)
            fh.write("\n")
        return entry


# -------------------------------------------------------------------- data

_DATA_CACHE: dict = {}


def load_split(spec: DatasetSpec, split: str) -> list[PointCloud]:
    key = (json.dumps(dataclasses.asdict(spec), sort_keys=True), split)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    if spec.kind == "synthetic":
        per_class = spec.train_per_class if split == "train" else spec.test_per_class
        _, clouds = make_synthetic_dataset(spec.classes, per_class, spec.points_per_sample, spec.seed,
                                           split, spec.name)
    else:
        path = spec.train_manifest if split == "train" else spec.test_manifest
        clouds = load_dataset(path, spec.name, split)
    clouds = [normalize_unit_sphere(c) for c in clouds]
    ids = [c.source_id for c in clouds]
    if len(set(ids)) != len(ids):
        raise DataError(f"dataset {spec.name}/{split}: duplicate source ids")
    _DATA_CACHE[key] = clouds
    return clouds


def unlabeled(clouds):
    """Training-path view of a dataset: (source_id, points) only."""
    return [(c.source_id, c.points) for c in clouds]


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _stage_dir(cfg: ExperimentConfig, stage: str) -> Path:
    d = cfg.run_dir / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _train_cfg(cfg: ExperimentConfig, section: str):
    tc = getattr(cfg, section)
    return dataclasses.replace(tc, seed=derive_seed(cfg.seed, section, tc.seed))


def checkpoint_id(path) -> str:
    meta = read_meta(path)
    return f"{Path(path).stem}@{meta['step']}"


# ------------------------------------------------------------------ stages

def pretrain_checkpoint(cfg: ExperimentConfig) -> Path:
    return cfg.run_dir / "pretrain" / "contrastnet.npz"


def run_pretrain(cfg: ExperimentConfig, resume: bool = False) -> dict:
    """Build the part dataset, train ContrastNet, and score held-out test-split pairs."""
    chash = cfg.hash()
    out = _stage_dir(cfg, "pretrain")
    ds = cfg.source_dataset
    seg = cfg.segmenter
    train = unlabeled(load_split(ds, "train"))
    test = unlabeled(load_split(ds, "test"))
    parts = build_part_dataset(train, seg.n_planes, seg.min_points, derive_seed(cfg.seed, "parts", "train"))
    held_parts = build_part_dataset(test, seg.n_planes, seg.min_points, derive_seed(cfg.seed, "parts", "test"))
    logger.info("part dataset: %d train segments (%d objects skipped), %d held-out segments",
                len(parts), len(parts.skipped), len(held_parts))
    tc = dataclasses.replace(_train_cfg(cfg, "contrast_train"), segment_points=seg.segment_points,
                             positive_fraction=seg.positive_fraction, center_segments=seg.center_segments)
    torch.manual_seed(derive_seed(cfg.seed, "init", "contrastnet"))
    model = ContrastNet(dataclasses.replace(cfg.encoder), cfg.head.hidden, cfg.head.dropout)
    ckpt = pretrain_checkpoint(cfg)
    if ckpt.exists() and not resume:
        ckpt.unlink()
    t0 = time.time()
    model, history = train_contrast(parts, model, tc, cfg.augmentation, ckpt, resume,
                                    {"config_hash": chash, "dataset": ds.name})
    history.write_csv(out / "history.csv")
    pairs = sample_pairs(held_parts, seg.heldout_pairs, 0.5, derive_seed(cfg.seed, "heldout-pairs"))
    acc = part_contrast_accuracy(model, pairs, seg.segment_points, seg.center_segments,
                                 derive_seed(cfg.seed, "heldout-resample"))
    _write_rows(out / "pair_accuracy.csv", ["train_ds", "eval_ds", "pairs", "accuracy", "config_hash"],
                [[ds.name, ds.name, len(pairs), f"{acc:.6f}", chash]])
    logger.info("held-out pair verification accuracy %.4f", acc)
    Manifest(cfg.run_dir, chash).append("pretrain", checkpoints=[str(ckpt)], seconds=round(time.time() - t0, 1),
                                        pair_accuracy=acc, results=[str(out / "pair_accuracy.csv")])
    return {"checkpoint": ckpt, "pair_accuracy": acc, "history": history,
            "segments": len(parts), "heldout_segments": len(held_parts)}


def _cluster_prefix(cfg, k):
    return cfg.run_dir / "cluster" / f"k{k}"


def run_cluster(cfg: ExperimentConfig, checkpoint=None, force: bool = False) -> dict:
    """Embed the train split with ContrastNet and fit KMeans++ for k (or the k sweep)."""
    chash = cfg.hash()
    ckpt = Path(checkpoint) if checkpoint else pretrain_checkpoint(cfg)
    if not ckpt.exists():
        if not force:
            raise ConfigError(f"no pretrain checkpoint at {ckpt}; run pretrain first (or pass --force)")
        logger.warning("FORCED: clustering features of an untrained encoder (no checkpoint at %s)", ckpt)
        torch.manual_seed(derive_seed(cfg.seed, "init", "contrastnet"))
        encoder = ContrastNet(dataclasses.replace(cfg.encoder), cfg.head.hidden, cfg.head.dropout).encoder
    else:
        encoder = load_checkpoint(ckpt)["model"].encoder
    out = _stage_dir(cfg, "cluster")
    ds = cfg.source_dataset
    clouds = load_split(ds, "train")
    cl = cfg.clustering
    table = extract_features(clouds, encoder, cl.input_mode, derive_seed(cfg.seed, "cluster-features"),
                             cfg.evaluation.partial_min_points, cfg.segmenter.segment_points,
                             cfg.segmenter.center_segments, "train", n_planes=cfg.segmenter.n_planes)
    np.savez(out / "features.npz", sample_ids=np.array(table.sample_ids), embeddings=table.embeddings)
    ks = cl.k_sweep or [cl.k]
    results, purity_rows = {}, []
    for k in ks:
        if k > len(table):
            raise ConfigError(f"clustering.k={k} exceeds the {len(table)} train samples")
        res = kmeans_fit(table.embeddings, k, cl.restarts, cl.max_iter, cl.tol,
                         derive_seed(cfg.seed, "kmeans", k), cl.l2_normalize)
        extra = {"config_hash": chash, "checkpoint_id": checkpoint_id(ckpt) if ckpt.exists() else "untrained",
                 "input_mode": cl.input_mode}
        save_clustering(res, table.sample_ids, _cluster_prefix(cfg, k), extra)
        results[k] = res
        if np.all(table.labels >= 0):
            purity_rows.append([ds.name, k, f"{cluster_accuracy(res.assignment, table.labels):.6f}", chash])
    if purity_rows:
        _write_rows(out / "purity.csv", ["dataset", "k", "cluster_accuracy", "config_hash"], purity_rows)
    Manifest(cfg.run_dir, chash).append("cluster", checkpoints=[str(ckpt)], k=ks,
                                        results=[str(_cluster_prefix(cfg, k)) + ".assign.csv" for k in ks])
    return {"results": results, "table": table,
            "purity": {int(r[1]): float(r[2]) for r in purity_rows}}


def clusternet_checkpoint(cfg: ExperimentConfig, k: int | None = None) -> Path:
    return cfg.run_dir / "clusternet" / f"clusternet-k{k or cfg.clustering.k}.npz"


def run_clusternet(cfg: ExperimentConfig, assignment=None, resume: bool = False) -> dict:
    """Train ClusterNet from scratch on full train-split objects with cluster-ID targets."""
    chash = cfg.hash()
    path = Path(assignment) if assignment else Path(str(_cluster_prefix(cfg, cfg.clustering.k)) + ".assign.csv")
    if not path.exists():
        raise ConfigError(f"no cluster assignment at {path}; run cluster first")
    assign = read_assignment(path)
    summary_path = Path(str(path).replace(".assign.csv", ".summary.json"))
    k = None
    if summary_path.exists():
        with open(summary_path) as fh:
            k = json.load(fh).get("k")
    k = k or max(assign.values()) + 1
    ds = cfg.source_dataset
    clouds = load_split(ds, "train")
    missing = [c.source_id for c in clouds if c.source_id not in assign]
    if missing:
        raise DataError(f"assignment {path} lacks {len(missing)} train samples: {missing[:10]}")
    points = [c.points for c in clouds]
    labels = np.array([assign[c.source_id] for c in clouds])
    torch.manual_seed(derive_seed(cfg.seed, "init", "clusternet", k))
    model = ClusterNet(k, dataclasses.replace(cfg.encoder), cfg.head.hidden, cfg.head.dropout)
    ckpt = clusternet_checkpoint(cfg, k)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    if ckpt.exists() and not resume:
        ckpt.unlink()
    t0 = time.time()
    model, history = train_cluster(points, labels, model, _train_cfg(cfg, "cluster_train"), cfg.augmentation,
                                   ckpt, resume, {"config_hash": chash, "dataset": ds.name, "assignment": str(path)})
    history.write_csv(ckpt.parent / f"history-k{k}.csv")
    Manifest(cfg.run_dir, chash).append("clusternet", checkpoints=[str(ckpt)], k=k,
                                        seconds=round(time.time() - t0, 1))
    return {"checkpoint": ckpt, "history": history, "k": k}


def _encoder_for(cfg, stage, checkpoints):
    if stage == "untrained":
        torch.manual_seed(derive_seed(cfg.seed, "init", "untrained"))
        return ContrastNet(dataclasses.replace(cfg.encoder), cfg.head.hidden, cfg.head.dropout).encoder, "untrained"
    path = checkpoints.get(stage)
    if path is None or not Path(path).exists():
        return None, None
    return load_checkpoint(path)["model"].encoder, checkpoint_id(path)


def run_evaluate(cfg: ExperimentConfig, checkpoints: dict | None = None) -> dict:
    """Probe every (stage, mode, train_ds -> eval_ds) combination; emit CSV and plots."""
    chash = cfg.hash()
    ev = cfg.evaluation
    if checkpoints is None:
        checkpoints = {"contrastnet": pretrain_checkpoint(cfg), "clusternet": clusternet_checkpoint(cfg)}
    available = {s: p for s, p in checkpoints.items() if p is not None and Path(p).exists()}
    stages = [s for s in ev.stages if s == "untrained" or s in available]
    if not any(s != "untrained" for s in stages):
        raise ConfigError("no checkpoints found to evaluate; run pretrain/clusternet first")
    out = _stage_dir(cfg, "evaluate")
    results_path = out / "results.csv"
    if results_path.exists():
        results_path.unlink()
    pairs = [tuple(p) for p in ev.transfer] or [(d.name, d.name) for d in cfg.datasets]
    rows, tables = [], {}
    for stage in stages:
        encoder, cid = _encoder_for(cfg, stage, available)
        for mode in ev.modes:
            for train_ds, eval_ds in pairs:
                ftr = _features(cfg, encoder, stage, mode, cfg.dataset(train_ds), "train", tables)
                fte = _features(cfg, encoder, stage, mode, cfg.dataset(eval_ds), "test", tables)
                probe, _ = select_probe(ftr, ev.c_values, ev.val_fraction, derive_seed(cfg.seed, "probe"))
                res = evaluate_transfer(probe, fte, train_ds, eval_ds, stage, mode)
                rows.append({"stage": stage, "mode": mode, "train_ds": train_ds, "eval_ds": eval_ds,
                             "k_clusters": cfg.clustering.k if stage == "clusternet" else "",
                             "C": res.regularization, "accuracy": res.accuracy, "seed": cfg.seed,
                             "checkpoint_id": cid, "config_hash": chash})
                logger.info("%s %s %s->%s accuracy %.4f (C=%g)", stage, mode, train_ds, eval_ds,
                            res.accuracy, res.regularization)
    append_results(results_path, rows)
    plots = []
    if ev.tsne:
        for stage in stages:
            key = (stage, "full", cfg.source_dataset.name, "test")
            if key in tables:
                p = out / f"tsne-{stage}-{cfg.source_dataset.name}.png"
                tsne_plot(tables[key], p, derive_seed(cfg.seed, "tsne"), ev.tsne_perplexity, ev.tsne_iterations)
                plots.append(str(p))
    if ev.montage:
        prefix = _cluster_prefix(cfg, cfg.clustering.k)
        feats = cfg.run_dir / "cluster" / "features.npz"
        if Path(str(prefix) + ".assign.csv").exists() and feats.exists():
            plots.append(str(_montage(cfg, prefix, feats, out)))
    Manifest(cfg.run_dir, chash).append("evaluate", checkpoints=[str(p) for p in available.values()],
                                        results=[str(results_path)], plots=plots)
    return {"rows": rows, "results_csv": results_path, "plots": plots}


def _features(cfg, encoder, stage, mode, spec, split, cache):
    key = (stage, mode, spec.name, split)
    if key not in cache:
        clouds = load_split(spec, split)
        seg = cfg.segmenter
        cache[key] = extract_features(clouds, encoder, mode, derive_seed(cfg.seed, "extract", mode, spec.name, split),
                                      cfg.evaluation.partial_min_points, seg.segment_points, seg.center_segments,
                                      split, n_planes=seg.n_planes)
    return cache[key]


def _montage(cfg, prefix, feats_path, out):
    with np.load(feats_path) as z:
        ids = [str(s) for s in z["sample_ids"]]
        emb = z["embeddings"]
    assign = read_assignment(str(prefix) + ".assign.csv")
    centroids = read_centroids(str(prefix) + ".centroids.bin")
    by_id = {c.source_id: c for c in load_split(cfg.source_dataset, "train")}
    clouds = [by_id[s] for s in ids]
    labels = np.array([assign[s] for s in ids])
    res = ClusteringResult(centroids, labels, 0.0, 0, 0)
    path = out / f"montage-k{len(centroids)}.png"
    cluster_montage(clouds, emb, res, cfg.evaluation.montage_top_n, path, cfg.evaluation.montage_clusters)
    return path


def run_all(cfg: ExperimentConfig) -> dict:
    pre = run_pretrain(cfg)
    clus = run_cluster(cfg)
    cnet = run_clusternet(cfg)
    ev = run_evaluate(cfg)
    return {"pretrain": pre, "cluster": clus, "clusternet": cnet, "evaluate": ev}
