"""Command-line entry point.

Verbs: pretrain, cluster, clusternet, evaluate, synth-data, cache-data.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
``PARTCONTRAST_WORKERS`` sets the torch thread count.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import torch

from . import pipeline
from .config import ExperimentConfig, load_config
from .data import cache_mesh_dataset, make_synthetic_dataset, scan_modelnet, write_dataset
from .errors import ConfigError, PartContrastError

logger = logging.getLogger("partcontrast")


def _global_flags(p):
    p.add_argument("--config", help="experiment YAML file")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", help="override the output root directory")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partcontrast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train ContrastNet on part pairs")
    _global_flags(p)

    p = sub.add_parser("cluster", help="KMeans++ pseudo-labels from ContrastNet features")
    _global_flags(p)
    p.add_argument("--checkpoint", help="ContrastNet checkpoint (default: run dir)")
    p.add_argument("--k", type=int, help="override clustering.k")
    p.add_argument("--k-sweep", type=int, nargs="+", help="cluster for several k values")
    p.add_argument("--force", action="store_true", help="allow clustering without a pretrain checkpoint")

    p = sub.add_parser("clusternet", help="train ClusterNet on cluster-ID pseudo-labels")
    _global_flags(p)
    p.add_argument("--assignment", help="assignment CSV (default: run dir, clustering.k)")
    p.add_argument("--k", type=int, help="override clustering.k")

    p = sub.add_parser("evaluate", help="linear-SVM probes, transfer, t-SNE and montage")
    _global_flags(p)
    p.add_argument("--contrastnet", help="ContrastNet checkpoint")
    p.add_argument("--clusternet", help="ClusterNet checkpoint")
    p.add_argument("--modes", nargs="+", choices=["full", "part", "perspective"])

    p = sub.add_parser("synth-data", help="write a procedural labeled dataset cache")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("cache-data", help="sample a ModelNet-style OFF tree into cache files")
    p.add_argument("--root", required=True, help="directory with <class>/<split>/*.off")
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", nargs="+", default=["train", "test"])
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    overrides = {"seed": args.seed, "out": args.out}
    cfg = load_config(args.config, overrides)
    if getattr(args, "k", None) or getattr(args, "k_sweep", None):
        cl = cfg.clustering
        if args.k:
            cl.k = args.k
        if getattr(args, "k_sweep", None):
            cl.k_sweep = args.k_sweep
        cl.validate()
    if getattr(args, "modes", None):
        cfg.evaluation.modes = args.modes
    return cfg


def run(args) -> int:
    if args.command == "synth-data":
        for split, per in (("train", args.train_per_class), ("test", args.test_per_class)):
            manifest, clouds = make_synthetic_dataset(args.classes, per, args.points, args.seed, split, args.name)
            print(write_dataset(args.out, manifest, clouds))
        return 0
    if args.command == "cache-data":
        for split in args.splits:
            print(cache_mesh_dataset(scan_modelnet(args.root, split), args.points, args.seed, args.out))
        return 0

    cfg = _config(args)
    if args.command == "pretrain":
        res = pipeline.run_pretrain(cfg, resume=args.resume)
        print(f"checkpoint {res['checkpoint']}  held-out pair accuracy {res['pair_accuracy']:.4f}")
    elif args.command == "cluster":
        res = pipeline.run_cluster(cfg, args.checkpoint, force=args.force)
        for k, r in res["results"].items():
            purity = res["purity"].get(k)
            extra = f"  cluster accuracy {purity:.4f}" if purity is not None else ""
            print(f"k={k} objective {r.objective:.6g}{extra}")
    elif args.command == "clusternet":
        res = pipeline.run_clusternet(cfg, args.assignment, resume=args.resume)
        print(f"checkpoint {res['checkpoint']}  k={res['k']}")
    elif args.command == "evaluate":
        ckpts = None
        if args.contrastnet or args.clusternet:
            ckpts = {"contrastnet": args.contrastnet, "clusternet": args.clusternet}
        res = pipeline.run_evaluate(cfg, ckpts)
        for r in res["rows"]:
            print(f"{r['stage']:12s} {r['mode']:12s} {r['train_ds']}->{r['eval_ds']}  {r['accuracy']:.4f}")
        print(res["results_csv"])
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    workers = os.environ.get("PARTCONTRAST_WORKERS")
    if workers:
        torch.set_num_threads(int(workers))
    try:
        return run(args)
    except PartContrastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if getattr(exc, "snapshot", None):
            print(f"diagnostic snapshot: {exc.snapshot}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
