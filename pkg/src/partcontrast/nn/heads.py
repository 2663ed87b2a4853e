"""Siamese verification head, cluster-ID classifier head, and the two full networks."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Encoder, EncoderConfig, _bn, init_parameters


class DenseHead(nn.Module):
    """Hidden dense layers with batch norm, ReLU and dropout, then a linear logit layer."""

    def __init__(self, in_features, out_features, hidden=(1024, 512), dropout=0.5,
                 bn_momentum=0.9, init_std=0.03):
        super().__init__()
        layers, prev = [], in_features
        for h in hidden:
            layers += [nn.Linear(prev, h, bias=False), _bn(h, bn_momentum), nn.ReLU(), nn.Dropout(dropout)]
            prev = h
        self.hidden = nn.Sequential(*layers)
        self.out = nn.Linear(prev, out_features)
        self.in_features = in_features
        self.out_features = out_features
        init_parameters(self, init_std)

    def forward(self, x):
        return self.out(self.hidden(x))


def contrast_forward(emb_a: torch.Tensor, emb_b: torch.Tensor, head: DenseHead) -> torch.Tensor:
    return head(torch.cat([emb_a, emb_b], dim=-1))


def cluster_forward(emb: torch.Tensor, head: DenseHead, n_clusters: int) -> torch.Tensor:
    if head.out_features != n_clusters:
        raise ValueError(f"head has {head.out_features} outputs, expected {n_clusters}")
    if emb.shape[-1] != head.in_features:
        raise ValueError(f"embedding has {emb.shape[-1]} dims, head expects {head.in_features}")
    return head(emb)


def cross_entropy(logits, label):
    """Softmax cross-entropy; accepts a single logit vector or a batch."""
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label, dtype=torch.long)
    n = logits.shape[-1]
    if torch.any(label < 0) or torch.any(label >= n):
        raise ValueError(f"label out of range [0, {n})")
    if logits.ndim == 1:
        return F.cross_entropy(logits.unsqueeze(0), label.reshape(1))
    return F.cross_entropy(logits, label)


class ContrastNet(nn.Module):
    """Both branches call the one ``encoder`` module, so the weights are shared by construction."""

    def __init__(self, enc_cfg: EncoderConfig | None = None, hidden=(1024, 512), dropout=0.5):
        super().__init__()
        self.encoder = Encoder(enc_cfg)
        e = self.encoder.out_channels
        self.head = DenseHead(2 * e, 2, hidden, dropout, self.encoder.cfg.bn_momentum,
                              self.encoder.cfg.init_std)

    def forward(self, a, b):
        if a.shape == b.shape:
            emb = self.encoder(torch.cat([a, b], dim=0))
            ea, eb = emb[:len(a)], emb[len(a):]
        else:
            ea, eb = self.encoder(a), self.encoder(b)
        return contrast_forward(ea, eb, self.head)


class ClusterNet(nn.Module):
    def __init__(self, n_clusters: int, enc_cfg: EncoderConfig | None = None, hidden=(1024, 512),
                 dropout=0.5):
        super().__init__()
        if n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        self.n_clusters = n_clusters
        self.encoder = Encoder(enc_cfg)
        self.head = DenseHead(self.encoder.out_channels, n_clusters, hidden, dropout,
                              self.encoder.cfg.bn_momentum, self.encoder.cfg.init_std)

    def forward(self, x):
        return cluster_forward(self.encoder(x), self.head, self.n_clusters)
