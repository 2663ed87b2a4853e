"""DGCNN encoder pieces: KNN graphs, EdgeConv, spatial transformer, global encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass
class EncoderConfig:
    k_neighbors: int = 20
    edgeconv_channels: list[int] = field(default_factory=lambda: [64, 64, 64, 128])
    embed_channels: int = 256
    use_spatial_transform: bool = True
    transform_channels: list[int] = field(default_factory=lambda: [64, 128, 1024])
    transform_hidden: list[int] = field(default_factory=lambda: [512, 256])
    init_std: float = 0.03
    bn_momentum: float = 0.9

    def validate(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not self.edgeconv_channels or min(self.edgeconv_channels) < 1:
            raise ValueError("edgeconv_channels must be a nonempty list of positive ints")
        if self.embed_channels < 1:
            raise ValueError("embed_channels must be positive")
        if len(self.transform_channels) != 3 or len(self.transform_hidden) < 1:
            raise ValueError("transform_channels needs 3 entries and transform_hidden at least one")


def knn_graph(points: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbours of every row, self excluded, ties to the lower index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k < n:
        raise ValueError(f"k={k} must satisfy 1 <= k < N={n}")
    if np.isnan(points).any():
        raise ValueError("NaN coordinates")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def knn_indices(x: torch.Tensor, k: int) -> torch.Tensor:
    """Batched KNN in feature space: (B, N, C) -> (B, N, k), self excluded."""
    sq = (x * x).sum(-1)
    dist = sq.unsqueeze(-1) - 2 * x @ x.transpose(1, 2) + sq.unsqueeze(-2)
    n = x.shape[1]
    dist = dist + torch.diag(torch.full((n,), float("inf"), dtype=x.dtype, device=x.device))
    return dist.topk(k, dim=-1, largest=False).indices


def gather_neighbors(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """(B, N, C), (B, N, k) -> (B, N, k, C)."""
    b, n, k = idx.shape
    flat = idx.reshape(b, n * k, 1).expand(-1, -1, x.shape[-1])
    return torch.gather(x, 1, flat).reshape(b, n, k, x.shape[-1])


def _bn(channels, momentum):
    # torch's momentum weights the new batch statistic
    return nn.BatchNorm1d(channels, momentum=1.0 - momentum)


def _apply_bn(bn: nn.BatchNorm1d, x: torch.Tensor) -> torch.Tensor:
    shape = x.shape
    return bn(x.reshape(-1, shape[-1])).reshape(shape)


class EdgeConv(nn.Module):
    """Shared affine map on (x_i, x_j - x_i), batch norm, ReLU, max over the k edges."""

    def __init__(self, in_channels, out_channels, bn_momentum=0.9):
        super().__init__()
        self.linear = nn.Linear(2 * in_channels, out_channels, bias=False)
        self.bn = _bn(out_channels, bn_momentum)

    def edge_features(self, x, idx):
        neigh = gather_neighbors(x, idx)
        center = x.unsqueeze(2).expand_as(neigh)
        return torch.cat([center, neigh - center], dim=-1)

    def forward(self, x, idx):
        # W [x_i, x_j - x_i] = (W_c - W_d) x_i + W_d x_j: project per point, then gather
        c = x.shape[-1]
        w_center, w_diff = self.linear.weight[:, :c], self.linear.weight[:, c:]
        own = x @ (w_center - w_diff).T
        neigh = gather_neighbors(x @ w_diff.T, idx)
        h = torch.relu(_apply_bn(self.bn, own.unsqueeze(2) + neigh))
        return h.max(dim=2).values


def edge_conv(features: torch.Tensor, neighbors: torch.Tensor, layer: EdgeConv) -> torch.Tensor:
    """Apply ``layer`` to unbatched (N, C) features with an (N, k) neighbour table."""
    features = torch.as_tensor(features)
    neighbors = torch.as_tensor(neighbors, dtype=torch.long)
    if features.shape[-1] * 2 != layer.linear.in_features:
        raise ValueError(f"features have {features.shape[-1]} channels, layer expects "
                         f"{layer.linear.in_features // 2}")
    if neighbors.shape[0] != features.shape[0]:
        raise ValueError("neighbor table and features disagree on N")
    return layer(features.unsqueeze(0), neighbors.unsqueeze(0)).squeeze(0)


class SpatialTransform(nn.Module):
    """Predicts a 3x3 matrix T from the cloud and returns ``points @ T``."""

    def __init__(self, k, channels=(64, 128, 1024), hidden=(512, 256), bn_momentum=0.9):
        super().__init__()
        self.k = k
        c1, c2, c3 = channels
        self.edge1 = nn.Linear(6, c1, bias=False)
        self.bn1 = _bn(c1, bn_momentum)
        self.edge2 = nn.Linear(c1, c2, bias=False)
        self.bn2 = _bn(c2, bn_momentum)
        self.point = nn.Linear(c2, c3, bias=False)
        self.bn3 = _bn(c3, bn_momentum)
        layers, prev = [], c3
        for h in hidden:
            layers += [nn.Linear(prev, h, bias=False), _bn(h, bn_momentum)]
            prev = h
        self.fc = nn.ModuleList(layers)
        self.out = nn.Linear(prev, 9)

    def matrix(self, points):
        idx = knn_indices(points, self.k)
        neigh = gather_neighbors(points, idx)
        center = points.unsqueeze(2).expand_as(neigh)
        e = torch.relu(_apply_bn(self.bn1, self.edge1(torch.cat([center, neigh - center], dim=-1))))
        e = torch.relu(_apply_bn(self.bn2, self.edge2(e)))
        h = e.max(dim=2).values
        h = torch.relu(_apply_bn(self.bn3, self.point(h))).max(dim=1).values
        for lin, bn in zip(self.fc[::2], self.fc[1::2]):
            h = torch.relu(bn(lin(h)))
        return self.out(h).reshape(-1, 3, 3)

    def forward(self, points):
        return points @ self.matrix(points)


class Encoder(nn.Module):
    """f_theta: spatial transform, EdgeConv stack on dynamic graphs, pointwise embed, max-pool."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        cfg.validate()
        self.cfg = cfg
        self.transform = (SpatialTransform(cfg.k_neighbors, cfg.transform_channels,
                                           cfg.transform_hidden, cfg.bn_momentum)
                          if cfg.use_spatial_transform else None)
        convs, prev = [], 3
        for c in cfg.edgeconv_channels:
            convs.append(EdgeConv(prev, c, cfg.bn_momentum))
            prev = c
        self.convs = nn.ModuleList(convs)
        self.embed = nn.Linear(sum(cfg.edgeconv_channels), cfg.embed_channels, bias=False)
        self.embed_bn = _bn(cfg.embed_channels, cfg.bn_momentum)
        self.graph_hook = None
        init_parameters(self, cfg.init_std)

    @property
    def out_channels(self):
        return self.cfg.embed_channels

    def forward(self, points):
        if points.shape[1] <= self.cfg.k_neighbors:
            raise ValueError(f"need more than k={self.cfg.k_neighbors} points, got {points.shape[1]}")
        h = self.transform(points) if self.transform is not None else points
        outs = []
        for layer, conv in enumerate(self.convs):
            idx = knn_indices(h, self.cfg.k_neighbors)
            if self.graph_hook is not None:
                self.graph_hook(layer, idx)
            h = conv(h, idx)
            outs.append(h)
        h = torch.relu(_apply_bn(self.embed_bn, self.embed(torch.cat(outs, dim=-1))))
        return h.max(dim=1).values


def init_parameters(module: nn.Module, std: float):
    """Truncated-normal weights, zero biases, identity output for spatial transforms."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, SpatialTransform):
            nn.init.zeros_(m.out.weight)
            with torch.no_grad():
                m.out.bias.copy_(torch.eye(3).flatten())


def spatial_transform(points, transform: SpatialTransform) -> torch.Tensor:
    """Unbatched convenience wrapper: (N, 3) -> (N, 3)."""
    return transform(torch.as_tensor(points).unsqueeze(0)).squeeze(0)


@torch.no_grad()
def encode(points, encoder: Encoder, train_mode: bool = False) -> np.ndarray:
    """Embedding of one (N, 3) cloud or a (B, N, 3) batch."""
    was_training = encoder.training
    encoder.train(train_mode)
    try:
        dtype = next(encoder.parameters()).dtype
        x = torch.as_tensor(np.asarray(points), dtype=dtype)
        single = x.ndim == 2
        if single:
            x = x.unsqueeze(0)
        out = encoder(x).numpy()
    finally:
        encoder.train(was_training)
    return out[0] if single else out
