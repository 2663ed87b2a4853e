import math

import numpy as np
import pytest
import torch

from _oracles import edge_conv_scalar, toy_encoder_config, toy_gradient_check
from partcontrast.errors import NumericFailure
from partcontrast.nn import (
    ClusterNet, ContrastNet, DenseHead, EdgeConv, Encoder, EncoderConfig, SpatialTransform, TrainConfig,
    cluster_forward, contrast_forward, cross_entropy, edge_conv, encode, knn_graph, knn_indices,
    load_checkpoint, lr_at, read_meta, save_checkpoint, spatial_transform, train_cluster, train_contrast,
)
from partcontrast.nn.layers import init_parameters
from partcontrast.segment import POSITIVE, Segment


def test_knn_collinear():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    assert knn_graph(pts, 1).ravel().tolist() == [1, 0, 1]


def test_knn_brute_force():
    pts = np.random.default_rng(0).standard_normal((64, 3))
    got = knn_graph(pts, 8)
    for i, p in enumerate(pts):
        order = sorted((float(np.sum((p - q) ** 2)), j) for j, q in enumerate(pts) if j != i)
        assert got[i].tolist() == [j for _, j in order[:8]]


def test_knn_duplicates_and_errors():
    pts = np.array([[0.0, 0, 0], [5, 5, 5], [0, 0, 0], [9, 9, 9]])
    nn = knn_graph(pts, 1).ravel()
    assert nn[0] == 2 and nn[2] == 0
    with pytest.raises(ValueError):
        knn_graph(pts, 4)
    pts[1, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        knn_graph(pts, 1)


def test_torch_knn_matches_numpy():
    pts = np.random.default_rng(1).standard_normal((50, 3))
    ref = knn_graph(pts, 6)
    got = knn_indices(torch.as_tensor(pts).unsqueeze(0), 6)[0].numpy()
    assert np.array_equal(np.sort(ref, axis=1), np.sort(got, axis=1))


@pytest.mark.parametrize("train", [True, False])
def test_edge_conv_scalar_oracle(train):
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3))
    nbr = np.array([[1, 2], [0, 3], [3, 1], [2, 0]])
    layer = EdgeConv(3, 2).double()
    layer.train(train)
    with torch.no_grad():
        layer.linear.weight.copy_(torch.as_tensor(rng.standard_normal((2, 6))))
    got = edge_conv(torch.as_tensor(x), nbr, layer).detach().numpy()
    want = edge_conv_scalar(x.tolist(), nbr.tolist(), layer.linear.weight.detach().tolist(), train=train)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_edge_conv_matches_explicit_edge_features():
    torch.manual_seed(1)
    layer = EdgeConv(5, 7).double().eval()
    x = torch.randn(2, 30, 5, dtype=torch.float64)
    idx = knn_indices(x, 4)
    explicit = layer.bn(layer.linear(layer.edge_features(x, idx)).reshape(-1, 7)).reshape(2, 30, 4, 7)
    ref = torch.relu(explicit).max(dim=2).values
    torch.testing.assert_close(layer(x, idx), ref)


def test_edge_conv_zero_offset_and_neighbor_order():
    layer = EdgeConv(3, 3).double().eval()
    with torch.no_grad():
        layer.linear.weight.copy_(torch.cat([torch.eye(3), 5 * torch.eye(3)], dim=1))
    x = torch.tensor([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.5, 0.1, 0.2]], dtype=torch.float64)
    out = edge_conv(x, [[1], [0], [0]], layer)
    np.testing.assert_allclose(out[0].detach().numpy(), np.array([1, 2, 3]) / math.sqrt(1 + 1e-5))
    x = torch.randn(10, 3, dtype=torch.float64)
    nbr = torch.as_tensor(knn_graph(x.numpy(), 4))
    a = edge_conv(x, nbr, layer)
    b = edge_conv(x, nbr.flip(1), layer)
    assert torch.equal(a, b)


def test_edge_conv_shape_errors():
    layer = EdgeConv(3, 2)
    with pytest.raises(ValueError):
        edge_conv(torch.zeros(4, 5), torch.zeros(4, 2, dtype=torch.long), layer)
    with pytest.raises(ValueError):
        edge_conv(torch.zeros(4, 3), torch.zeros(3, 2, dtype=torch.long), layer)


def test_spatial_transform_identity_at_init():
    st = SpatialTransform(5, (8, 8, 16), (8,))
    init_parameters(st, 0.03)
    st.eval()
    pts = torch.randn(40, 3)
    torch.testing.assert_close(spatial_transform(pts, st), pts, atol=1e-6, rtol=0)


def test_spatial_transform_permutation_and_gradient():
    torch.manual_seed(3)
    st = SpatialTransform(4, (4, 4, 8), (6,)).double()
    init_parameters(st, 0.3)
    with torch.no_grad():
        st.out.weight.normal_(0, 0.3)
    st.eval()
    pts = torch.randn(1, 20, 3, dtype=torch.float64)
    perm = torch.randperm(20)
    torch.testing.assert_close(st.matrix(pts), st.matrix(pts[:, perm]))
    from _oracles import gradient_errors
    w = torch.randn(1, 20, 3, dtype=torch.float64)
    errs = gradient_errors(st, lambda: (st(pts) * w).sum())
    assert max(errs.values()) < 1e-4, errs


def test_encoder_shape_and_precondition():
    enc = Encoder(toy_encoder_config())
    assert encode(np.random.rand(16, 3), enc).shape == (8,)
    with pytest.raises(ValueError):
        encode(np.random.rand(3, 3), enc)
    full = Encoder(EncoderConfig(k_neighbors=4, transform_channels=[8, 8, 16], transform_hidden=[8]))
    assert encode(np.random.rand(2, 32, 3), full).shape == (2, 256)


def test_encoder_permutation_invariance():
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(k_neighbors=8, transform_channels=[16, 16, 32], transform_hidden=[16]))
    pts = np.random.default_rng(0).standard_normal((128, 3))
    perm = np.random.default_rng(1).permutation(128)
    assert np.abs(encode(pts, enc) - encode(pts[perm], enc)).max() < 1e-5


def test_dynamic_graph_uses_previous_features():
    torch.manual_seed(0)
    enc = Encoder(toy_encoder_config(use_spatial_transform=False)).double().eval()
    graphs, feats = {}, {}
    enc.graph_hook = lambda layer, idx: graphs.setdefault(layer, idx.clone())
    enc.convs[0].register_forward_hook(lambda m, i, o: feats.setdefault(0, o.detach()))
    pts = torch.as_tensor(np.random.default_rng(2).standard_normal((1, 16, 3)))
    enc(pts)
    coord_graph = knn_indices(pts, 3)
    assert torch.equal(graphs[0], coord_graph)
    assert torch.equal(graphs[1], knn_indices(feats[0], 3))
    assert not torch.equal(graphs[1], coord_graph)


@pytest.mark.parametrize("kind", ["contrast", "cluster"])
def test_toy_gradients(kind):
    errs = toy_gradient_check(kind, seed=0)
    assert max(errs.values()) < 1e-4, errs


def test_head_shapes_and_determinism():
    head = DenseHead(16, 2, hidden=(12, 8)).eval()
    a, b = torch.randn(3, 8), torch.randn(3, 8)
    out = contrast_forward(a, b, head)
    assert out.shape == (3, 2) and torch.isfinite(out).all()
    assert torch.equal(out, contrast_forward(a, b, head))
    assert torch.isfinite(contrast_forward(a, a, head)).all()
    big = DenseHead(8, 300, hidden=(12,)).eval()
    assert cluster_forward(torch.randn(2, 8), big, 300).shape == (2, 300)
    one = DenseHead(8, 1, hidden=(12,)).eval()
    logits = cluster_forward(torch.randn(2, 8), one, 1)
    assert torch.equal(torch.softmax(logits, -1), torch.ones(2, 1))
    with pytest.raises(ValueError):
        cluster_forward(torch.randn(2, 8), big, 10)
    with pytest.raises(ValueError):
        cluster_forward(torch.randn(2, 9), big, 300)


def test_cross_entropy():
    assert cross_entropy(torch.zeros(2), 0).item() == pytest.approx(math.log(2), abs=1e-7)
    assert cross_entropy(torch.tensor([10.0, -10.0], dtype=torch.float64), 0).item() < 1e-8
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(3), 3)
    logits = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 3, 1, 2, 2])
    assert cross_entropy(logits, labels).item() >= 0
    assert torch.autograd.gradcheck(lambda z: cross_entropy(z, labels), (logits,), eps=1e-6, rtol=1e-6)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.001
    assert lr_at(199999, cfg) == 0.001
    assert lr_at(200000, cfg) == 0.0007
    assert lr_at(400000, cfg) == 0.00049
    assert lr_at(10**9, cfg) == 1e-5
    values = [lr_at(s, cfg) for s in range(0, 2_000_000, 50_000)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_train_config_validation():
    for bad in (dict(base_lr=0), dict(dropout=1.0), dict(lr_decay_rate=0), dict(lr_decay_rate=1.5)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_siamese_weight_sharing():
    torch.manual_seed(0)
    net = ContrastNet(toy_encoder_config(), hidden=(6,), dropout=0.0).eval()
    assert sum(isinstance(m, Encoder) for m in net.modules()) == 1
    a, b = torch.randn(2, 16, 3), torch.randn(2, 16, 3)
    seen = []
    hook = net.encoder.register_forward_hook(lambda m, i, o: seen.append(o.detach().clone()))
    net(a, b)
    with torch.no_grad():
        net.encoder.embed.weight.mul_(1.5)
    net(a, b)
    hook.remove()
    before, after = seen
    assert not torch.equal(before[:2], after[:2]) and not torch.equal(before[2:], after[2:])
    torch.testing.assert_close(net.encoder(torch.cat([a, b])), after)


def _toy_parts():
    rng = np.random.default_rng(0)
    parts = []
    for obj, center in (("a", [0.6, 0, 0]), ("b", [-0.6, 0, 0])):
        for j in range(2):
            pts = rng.standard_normal((24, 3)) * (0.2 if obj == "a" else 0.05) + center
            parts.append(Segment(pts, obj, j, POSITIVE))
    return parts


def _small_train_cfg(**kw):
    base = dict(batch_size=8, pairs_per_epoch=8, epochs=50, segment_points=16, dropout=0.0)
    return TrainConfig(**{**base, **kw})


def test_contrast_training_loss_decreases():
    decreased = []
    for seed in range(5):
        torch.manual_seed(seed)
        net = ContrastNet(toy_encoder_config(), hidden=(16, 8), dropout=0.0)
        _, hist = train_contrast(_toy_parts(), net, _small_train_cfg(seed=seed))
        losses = [r.loss for r in hist]
        assert len(losses) == 50 and hist[-1].step == 50
        decreased.append(np.mean(losses[-10:]) < np.mean(losses[:10]))
    assert any(decreased)


def test_cluster_training_constant_labels():
    torch.manual_seed(0)
    pts = np.random.default_rng(0).standard_normal((32, 16, 3))
    net = ClusterNet(1, toy_encoder_config(), hidden=(8,), dropout=0.0)
    _, hist = train_cluster(pts, np.zeros(32, int), net, _small_train_cfg(epochs=2))
    assert hist[-1].accuracy == 1.0
    with pytest.raises(ValueError):
        train_cluster(pts, np.full(32, 2), net, _small_train_cfg(epochs=1))


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = ClusterNet(5, toy_encoder_config(), hidden=(8, 4), dropout=0.25)
    path = tmp_path / "c.npz"
    save_checkpoint(path, net, "clusternet", step=7, epoch=2, meta={"config_hash": "abc"})
    meta = read_meta(path)
    assert meta["step"] == 7 and meta["n_clusters"] == 5 and meta["config_hash"] == "abc"
    restored = load_checkpoint(path)["model"]
    for (n1, t1), (n2, t2) in zip(net.state_dict().items(), restored.state_dict().items()):
        assert n1 == n2 and torch.equal(t1, t2)
    with np.load(path) as z:
        assert all(z[f].dtype == np.float32 for f in z.files if f.startswith("param/"))
    with pytest.raises(ValueError):
        load_checkpoint(path, ClusterNet(4, toy_encoder_config(), hidden=(8, 4)))


def test_resume_matches_uninterrupted(tmp_path):
    def run(epochs, path, resume):
        torch.manual_seed(0)
        net = ContrastNet(toy_encoder_config(), hidden=(8,), dropout=0.0)
        if resume:
            net = load_checkpoint(path)["model"]
        return train_contrast(_toy_parts(), net, _small_train_cfg(epochs=epochs), checkpoint_path=path,
                              resume=resume)

    full, hist_full = run(4, tmp_path / "full.npz", False)
    run(2, tmp_path / "part.npz", False)
    resumed, hist_res = run(4, tmp_path / "part.npz", True)
    assert [r.step for r in hist_res] == [r.step for r in hist_full]
    for t1, t2 in zip(full.state_dict().values(), resumed.state_dict().values()):
        torch.testing.assert_close(t1, t2, atol=1e-6, rtol=1e-5)


def test_nan_loss_aborts_with_snapshot(tmp_path):
    net = ContrastNet(toy_encoder_config(), hidden=(8,), dropout=0.0)
    with torch.no_grad():
        net.head.out.bias.fill_(float("nan"))
    with pytest.raises(NumericFailure) as info:
        train_contrast(_toy_parts(), net, _small_train_cfg(epochs=1), checkpoint_path=tmp_path / "x.npz")
    assert info.value.exit_code == 4 and info.value.snapshot
    assert read_meta(info.value.snapshot)["kind"] == "contrastnet"
