import numpy as np
import pytest

from contour_rl import nn
from contour_rl.errors import CheckpointError, ShapeMismatch


def naive_conv(x, w, b, stride=1):
    B, H, W, C = x.shape
    k, _, _, F = w.shape
    ho, wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((B, ho, wo, F))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                win = x[n, i * stride:i * stride + k, j * stride:j * stride + k, :]
                for f in range(F):
                    out[n, i, j, f] = np.sum(win * w[..., f]) + b[f]
    return out


def naive_pool(x, size=2, stride=2):
    B, H, W, C = x.shape
    ho, wo = (H - size) // stride + 1, (W - size) // stride + 1
    out = np.zeros((B, ho, wo, C))
    for i in range(ho):
        for j in range(wo):
            out[:, i, j, :] = x[:, i * stride:i * stride + size, j * stride:j * stride + size, :].max(axis=(1, 2))
    return out


def naive_forward(net, x):
    h = np.asarray(x, dtype=np.float64)
    for spec, params in zip(net.specs, net.params):
        if spec.kind == "conv2d":
            h = naive_conv(h, params[0].astype(np.float64), params[1], spec.stride)
        elif spec.kind == "maxpool2d":
            h = naive_pool(h, spec.size, spec.stride)
        elif spec.kind == "relu":
            h = np.maximum(h, 0)
        elif spec.kind == "flatten":
            h = h.reshape(len(h), -1)
        elif spec.kind == "fc":
            h = h @ params[0].astype(np.float64) + params[1]
        elif spec.kind == "softmax":
            e = np.exp(h - h.max(axis=1, keepdims=True))
            h = e / e.sum(axis=1, keepdims=True)
    return h


def test_policy_shapes_and_softmax(rng):
    net = nn.policy_network(seed=1)
    assert [s for s in net.shapes if len(s) == 3][:5] == [(21, 21, 1), (17, 17, 16), (17, 17, 16), (8, 8, 16), (6, 6, 64)]
    assert (576,) in net.shapes
    out, _ = net.forward(rng.random((4, 21, 21, 1)))
    assert out.shape == (4, 8) and np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1, atol=1e-6)
    zero, _ = net.forward(np.zeros((1, 21, 21, 1)))
    assert np.allclose(zero, 1 / 8)


def test_value_and_landing_shapes():
    v = nn.value_network(seed=0)
    p = nn.policy_network(seed=0)
    assert v.output_shape == (1,)
    assert v.shapes[:-2] == p.shapes[:-3]
    land = nn.landing_network()
    chain = [s[:2] for s in land.shapes if len(s) == 3]
    assert chain == [(100, 80), (96, 76), (96, 76), (48, 38), (44, 34), (44, 34), (22, 17),
                     (18, 13), (18, 13), (9, 6)]
    assert (3456,) in land.shapes and land.output_shape == (2,)


def test_seed_determinism():
    a, b = nn.value_network(seed=3), nn.value_network(seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert all(np.all(layer[1] == 0) for layer in a.params if layer)


def test_forward_matches_naive_oracle(rng):
    for net, shape in ((nn.policy_network(seed=2), (3, 21, 21, 1)), (nn.value_network(seed=4), (2, 21, 21, 1))):
        x = rng.random(shape)
        assert np.allclose(net.forward(x)[0], naive_forward(net, x), atol=1e-5)
    small = nn.Network([nn.conv(3, 3, stride=2), nn.RELU_SPEC, nn.pool(), nn.FLATTEN_SPEC, nn.fc(4)], (11, 9, 2), seed=5)
    x = rng.normal(size=(2, 11, 9, 2))
    assert np.allclose(small.forward(x)[0], naive_forward(small, x), atol=1e-5)


def test_landing_forward_matches_naive_oracle(rng):
    net = nn.landing_network(seed=1)
    x = rng.random((1, 100, 80, 1))
    assert np.allclose(net.forward(x)[0], naive_forward(net, x), rtol=1e-4, atol=1e-4)


def test_trivial_layers():
    fc = nn.Network([nn.fc(3)], (3,))
    fc.set_parameters([np.eye(3), np.zeros(3)])
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.allclose(fc.forward(x)[0], x)
    c = nn.Network([nn.conv(1, 1)], (4, 4, 1))
    c.set_parameters([np.full((1, 1, 1, 1), 2.0), np.zeros(1)])
    img = np.arange(16.0).reshape(1, 4, 4, 1)
    assert np.allclose(c.forward(img)[0], 2 * img)


def test_backward_trivial(rng):
    net = nn.Network([nn.fc(2)], (3,))
    x = rng.normal(size=(1, 3))
    out, cache = net.forward(x)
    g = net.backward(cache, np.zeros_like(out))
    assert all(np.all(a == 0) for a in g.arrays())
    g = net.backward(cache, np.array([[1.0, -2.0]]))
    assert np.allclose(g.arrays()[0], np.outer(x[0], [1.0, -2.0]), atol=1e-6)
    assert np.allclose(g.arrays()[1], [1.0, -2.0])


def test_shape_mismatch():
    net = nn.policy_network()
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 20, 21, 1)))


def quad_loss(target):
    def f(out):
        d = out - target
        return float(np.sum(d * d)), 2 * d
    return f


def test_grad_check_linear_exact(rng):
    net = nn.Network([nn.fc(2)], (4,), seed=1)
    x = rng.normal(size=(3, 4))
    assert nn.grad_check(net, x, quad_loss(rng.normal(size=(3, 2)))) < 1e-6


@pytest.mark.parametrize("arch,shape", [("policy", (2, 21, 21, 1)), ("value", (2, 21, 21, 1)),
                                        ("landing", (1, 100, 80, 1))])
def test_grad_check_architectures(arch, shape, rng):
    net = nn.ARCHITECTURES[arch](seed=7)
    x = rng.random(shape)
    out_dim = net.output_shape[0]
    res = nn.grad_check(net, x, quad_loss(rng.normal(size=(shape[0], out_dim))), max_params=200,
                        return_details=True)
    assert res["checked"] > 100
    assert res["max_relative_error"] < 1e-3


def test_update_rules(rng):
    net = nn.Network([nn.fc(2)], (3,), seed=0)
    before = [p.copy() for p in net.parameters()]
    grads = nn.Gradients([[rng.normal(size=(3, 2)).astype(np.float32), np.ones(2, dtype=np.float32)]])
    nn.apply_update(net, grads, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))
    one = net.copy()
    nn.apply_update(one, grads, 0.1)
    nn.apply_update(one, grads, 0.1)
    two = net.copy()
    nn.apply_update(two, grads, 0.2)
    assert all(np.allclose(a, b, atol=1e-6) for a, b in zip(one.parameters(), two.parameters()))


def test_scalar_sgd_sequence():
    # f(w) = (w - 3)^2 from w = 0 with lr 0.25: w_{k+1} = w_k - 0.5 (w_k - 3)
    net = nn.Network([nn.fc(1)], (1,))
    net.set_parameters([np.zeros((1, 1)), np.zeros(1)])
    x = np.ones((1, 1))
    ws = []
    for _ in range(4):
        out, cache = net.forward(x)
        g = net.backward(cache, 2 * (out - 3.0))
        g.per_layer[0][1][...] = 0.0  # freeze the bias
        nn.apply_update(net, g, 0.25)
        ws.append(float(net.params[0][0][0, 0]))
    assert np.allclose(ws, [1.5, 2.25, 2.625, 2.8125])


def test_adam_moves_downhill(rng):
    net = nn.Network([nn.fc(1)], (2,), seed=0)
    opt = nn.Adam(net)
    x, y = rng.normal(size=(32, 2)), rng.normal(size=(32, 1))
    losses = []
    for _ in range(50):
        out, cache = net.forward(x)
        losses.append(float(np.mean((out - y) ** 2)))
        opt.step(net, net.backward(cache, 2 * (out - y) / len(x)), 0.05)
    assert losses[-1] < losses[0]


def test_checkpoint_roundtrip(tmp_path, rng):
    net = nn.policy_network(seed=9)
    nn.save_checkpoint(tmp_path / "p.ckpt", net, iteration=12, extra={"val_return": -1.5})
    back, header = nn.load_checkpoint(tmp_path / "p.ckpt")
    assert header["iteration"] == 12 and header["extra"]["val_return"] == -1.5
    assert all(np.array_equal(a, b) for a, b in zip(net.parameters(), back.parameters()))
    x = rng.random((2, 21, 21, 1))
    assert np.array_equal(net.forward(x)[0], back.forward(x)[0])
    data = (tmp_path / "p.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        nn.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        nn.load_checkpoint(tmp_path / "m.ckpt")
