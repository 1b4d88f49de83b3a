import numpy as np
import pytest

from dpfa import tensor as T
from dpfa.networks import ClsNet, ConfigurationError, SegNet, build_network, cls_forward, seg_forward
from dpfa.tensor import Tensor, grad_check


def small_seg(**kw):
    args = dict(in_width=9, num_classes=5, widths=(16, 16, 16), emb_width=64, head_widths=(32, 16), k=8, seed=0)
    args.update(kw)
    return SegNet(**args)


def small_cls(**kw):
    args = dict(in_width=3, num_classes=4, widths=(16, 16, 32), cls_hidden=(32,), k=8, seed=0)
    args.update(kw)
    return ClsNet(**args)


def block(n=96, width=9, seed=0):
    return np.random.default_rng(seed).random((n, width)).astype(np.float32)


def test_seg_output_shape_and_width_error():
    net = small_seg()
    assert seg_forward(block(), net).shape == (96, 5)
    with pytest.raises(ConfigurationError):
        net(block(width=6))


def test_seg_permutation_equivariance():
    net = small_seg()
    x = block(128)
    base = net(x).data
    rng = np.random.default_rng(1)
    for _ in range(20):
        perm = rng.permutation(128)
        assert np.allclose(net(x[perm]).data, base[perm], atol=1e-5)


def test_global_embedding_order_invariant():
    net = small_seg()
    x = block(64)
    emb = net.embed(x).data
    perm = np.random.default_rng(2).permutation(64)
    emb_p = net.embed(x[perm]).data
    # the broadcast global part is identical on every row and for every order
    d = net.embed_width - net.psi_emb.d_out
    assert np.allclose(emb[0, d:], emb_p[0, d:], atol=1e-5)


def test_duplicated_points_identical_rows():
    x = block(50, seed=3)
    x[7] = x[21]
    out = small_seg(dtype="float64")(x.astype(np.float64)).data
    assert np.array_equal(out[7], out[21])


def test_cls_probabilities():
    net = small_cls()
    x = block(80, 3)
    p = cls_forward(x, net).data
    assert p.shape == (4,)
    assert abs(p.sum() - 1) < 1e-6
    rng = np.random.default_rng(4)
    for _ in range(20):
        assert np.allclose(net(x[rng.permutation(80)]).data, p, atol=1e-5)


def test_single_point_cloud_is_finite():
    p = small_cls()(block(1, 3)).data
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-6
    assert np.all(np.isfinite(small_seg()(block(1)).data))


def test_paper_default_widths():
    seg = SegNet(num_classes=13)
    assert seg.psi_emb.d_in == 192 and seg.psi_emb.d_out == 1024
    assert seg.head.d_in == 1216
    assert [l.W.shape[1] for l in seg.head.layers] == [512, 256, 13]
    cls = ClsNet(num_classes=40)
    assert cls.psi_ccut.d_out == 448 and cls.psi_cls.d_in == 448


def test_build_network_round_trip():
    net = small_seg(standardize=True)
    twin = build_network(net.config)
    twin.load_arrays(net.state_arrays())
    x = block(40)
    assert np.array_equal(net(x).data, twin(x).data)


def test_mini_network_gradient():
    rng = np.random.default_rng(0)
    net = SegNet(in_width=9, num_classes=3, widths=(8, 8, 8), emb_width=8, head_widths=(8,), k=4, seed=0,
                 dtype="float64")
    x = Tensor(rng.random((12, 9)), requires_grad=True)
    labels = rng.integers(0, 3, 12)
    params = list(net.parameters().values())
    # freeze the dynamic graphs: indices are constants under differentiation
    with T.no_grad():
        _, graphs = net.concat_features(x)

    from dpfa.fa_layer import fa_forward

    # geometry reads raw coordinates as constants, so hold them fixed too
    P = x.data[:, :3].copy()

    def f(x, *_):
        h, outs = x, []
        for layer, g in zip(net.fa, graphs):
            h, _ = fa_forward(P, h, layer, 4, graph=g)
            outs.append(h)
        fcat = T.concat_axis(outs, -1)
        glob = net.psi_emb(T.reduce_max_axis(fcat, 0))
        emb = T.concat_axis([fcat, T.broadcast_rows(glob, 12)], -1)
        return T.cross_entropy(net.classify(emb), labels)

    rep = grad_check(f, [x, *params], tol=1e-4)
    assert rep.passed, str(rep)
    assert rep.checked > 500
