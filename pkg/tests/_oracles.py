"""Independent reference implementations shared by unit and acceptance tests."""

import itertools

import numpy as np
import torch

from partcontrast.nn import ClusterNet, ContrastNet, EncoderConfig

TOY_ENCODER = dict(k_neighbors=3, edgeconv_channels=[4, 4], embed_channels=8,
                   transform_channels=[4, 4, 8], transform_hidden=[8])


def toy_encoder_config(**kw):
    return EncoderConfig(**{**TOY_ENCODER, **kw})


def numeric_gradients(loss_fn, params, h=1e-6):
    """Central finite differences of a scalar ``loss_fn()`` for every entry of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def gradient_errors(model, loss_fn, h=1e-6):
    """Per-parameter relative error ``|g_a - g_n| / max(|g_a|, |g_n|)`` over whole tensors."""
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    # resolution of a central difference in float64 at this loss magnitude
    floor = 1e3 * np.finfo(np.float64).eps * max(1.0, abs(loss.item())) / h
    analytic = [p.grad.detach().clone() for p in params]
    numeric = numeric_gradients(loss_fn, params, h)
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    out = {}
    for name, a, n in zip(names, analytic, numeric):
        scale = max(a.norm().item(), n.norm().item())
        diff = (a - n).norm().item()
        if scale > floor:
            out[name] = diff / scale
        else:
            # structurally zero (e.g. a shift undone by a later batch norm): compare absolutely
            out[name] = 0.0 if diff <= floor else float("inf")
    return out


def toy_gradient_check(kind, seed, n_points=16, batch=6, n_clusters=3):
    """Build a float64 toy network and return its per-parameter gradient errors."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = toy_encoder_config()
    if kind == "contrast":
        model = ContrastNet(cfg, hidden=[6, 5], dropout=0.0).double()
        a = torch.as_tensor(rng.standard_normal((batch, n_points, 3)))
        b = torch.as_tensor(rng.standard_normal((batch, n_points, 3)))
        inputs = (a, b)
        out_dim = 2
    else:
        model = ClusterNet(n_clusters, cfg, hidden=[6, 5], dropout=0.0).double()
        inputs = (torch.as_tensor(rng.standard_normal((batch, n_points, 3))),)
        out_dim = n_clusters
    # perturb away from the symmetric init so every path carries gradient
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.as_tensor(rng.standard_normal(tuple(p.shape))))
    weights = torch.as_tensor(rng.standard_normal((batch, out_dim)))
    model.train()

    def loss_fn():
        return (model(*inputs) * weights).sum()

    return gradient_errors(model, loss_fn)


def exhaustive_kmeans_objective(x, k):
    """Minimum mean squared distance to the assigned centroid over every k-partition."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean(axis=0)
    n = len(x)
    labels = np.array(list(itertools.product(range(k), repeat=n)))
    onehot = labels[:, :, None] == np.arange(k)
    counts = onehot.sum(axis=1)
    labels, onehot, counts = labels[(counts > 0).all(1)], onehot[(counts > 0).all(1)], counts[(counts > 0).all(1)]
    sums = np.einsum("mnk,nd->mkd", onehot, x)
    sse = (x * x).sum() - ((sums ** 2).sum(-1) / counts).sum(-1)
    # rescore the winner directly to avoid the cancellation in the expanded form
    best = labels[np.argmin(sse)]
    total = sum(((x[best == c] - x[best == c].mean(axis=0)) ** 2).sum() for c in range(k))
    return total / n


def edge_conv_scalar(x, nbr, w, train=True, eps=1e-5):
    """Loop-by-loop EdgeConv: w @ [x_i, x_j - x_i], batch norm, ReLU, max over neighbours."""
    n, c = len(x), len(x[0])
    out_c, k = len(w), len(nbr[0])
    edges = [[[0.0] * out_c for _ in range(k)] for _ in range(n)]
    for i in range(n):
        for jj in range(k):
            j = nbr[i][jj]
            feat = list(x[i]) + [x[j][t] - x[i][t] for t in range(c)]
            for o in range(out_c):
                edges[i][jj][o] = sum(w[o][t] * feat[t] for t in range(2 * c))
    out = [[0.0] * out_c for _ in range(n)]
    for o in range(out_c):
        vals = [edges[i][jj][o] for i in range(n) for jj in range(k)]
        if train:
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
        else:
            mean, var = 0.0, 1.0
        for i in range(n):
            best = -float("inf")
            for jj in range(k):
                y = max((edges[i][jj][o] - mean) / (var + eps) ** 0.5, 0.0)
                best = max(best, y)
            out[i][o] = best
    return out
