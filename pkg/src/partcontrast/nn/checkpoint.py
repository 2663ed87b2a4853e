"""Checkpoint container.

A checkpoint is a NumPy ``.npz`` archive:

``meta``
    UTF-8 JSON (stored as a uint8 array) with ``format`` = ``"partcontrast-checkpoint"``,
    ``version`` = 1, ``kind`` (``contrastnet`` | ``clusternet``), ``step``, ``epoch``,
    ``n_clusters``, ``encoder`` (EncoderConfig fields), ``head_hidden``, ``dropout``
    and any caller metadata (config hash, training history).
``param/<name>``
    float32 tensor for every entry of the module ``state_dict`` (batch-norm
    running statistics included), shape preserved.
``adam/<name>/exp_avg``, ``adam/<name>/exp_avg_sq``, ``adam/<name>/step``
    optional optimizer state keyed by parameter name, for ``--resume``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .heads import ClusterNet, ContrastNet
from .layers import EncoderConfig

FORMAT = "partcontrast-checkpoint"
VERSION = 1


def _model_meta(model):
    enc = model.encoder
    hidden = [m.out_features for m in model.head.hidden if isinstance(m, torch.nn.Linear)]
    drop = [m.p for m in model.head.hidden if isinstance(m, torch.nn.Dropout)]
    return {
        "encoder": asdict(enc.cfg),
        "head_hidden": hidden,
        "dropout": drop[0] if drop else 0.0,
        "n_clusters": getattr(model, "n_clusters", None),
    }


def save_checkpoint(path, model, kind: str, step: int, epoch: int = 0, meta: dict | None = None,
                    optimizer=None):
    meta = {**(meta or {}), **_model_meta(model), "format": FORMAT, "version": VERSION,
            "kind": kind, "step": int(step), "epoch": int(epoch)}
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, t in model.state_dict().items():
        arrays[f"param/{name}"] = t.detach().cpu().numpy().astype(np.float32)
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    arrays[f"adam/{names[id(p)]}/{key}"] = np.asarray(
                        state[key].detach().cpu().numpy(), dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def read_meta(path) -> dict:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta


def build_model(meta: dict):
    enc = EncoderConfig(**meta["encoder"])
    if meta["kind"] == "contrastnet":
        return ContrastNet(enc, meta["head_hidden"], meta["dropout"])
    if meta["kind"] == "clusternet":
        return ClusterNet(meta["n_clusters"], enc, meta["head_hidden"], meta["dropout"])
    raise ValueError(f"unknown model kind {meta['kind']!r}")


def load_checkpoint(path, model=None, optimizer=None):
    """Restore into ``model`` (built from the stored config when omitted).

    Returns the metadata dict with the model under ``"model"``.
    """
    meta = read_meta(path)
    if model is None:
        model = build_model(meta)
    with np.load(path) as z:
        state = {}
        for name, ref in model.state_dict().items():
            key = f"param/{name}"
            if key not in z.files:
                raise ValueError(f"{path}: missing tensor {name}")
            arr = z[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(ref.shape)}")
            state[name] = torch.as_tensor(arr).to(ref.dtype)
        model.load_state_dict(state)
        if optimizer is not None:
            params = dict(model.named_parameters())
            for name, p in params.items():
                if f"adam/{name}/step" in z.files:
                    optimizer.state[p] = {
                        "step": torch.tensor(float(z[f"adam/{name}/step"])),
                        "exp_avg": torch.as_tensor(z[f"adam/{name}/exp_avg"]).to(p.dtype),
                        "exp_avg_sq": torch.as_tensor(z[f"adam/{name}/exp_avg_sq"]).to(p.dtype),
                    }
    meta["model"] = model
    return meta
