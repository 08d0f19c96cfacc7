import csv

import numpy as np
import pytest

from contour_rl import landing, nn
from contour_rl.contours import Contour, Pixel
from contour_rl.data import CROP_COLS, CROP_ROWS, Sample, SynthParams, synth_sample
from contour_rl.errors import EmptyTarget, ImageTooSmall, Stalled


@pytest.fixture(scope="module")
def pairs():
    samples = [synth_sample(SynthParams(seed=s)) for s in range(4)]
    return landing.make_pairs(samples)


def tiny_generator(seed=0):
    # a small stand-in with the landing input/output contract
    return nn.Network([nn.pool(4, 4), nn.FLATTEN_SPEC, nn.fc(2)], (100, 80, 1), seed=seed, arch="tiny")


def test_crop_and_target(synth_samples):
    s = synth_samples[0]
    sub = landing.crop_upper_right(s.image)
    assert sub.patch.shape == (CROP_ROWS, CROP_COLS) and sub.origin == (0, s.shape[1] - CROP_COLS)
    assert np.array_equal(sub.patch, s.image[:100, -80:])
    t = landing.landing_target(s, sub)
    assert len(t) > 0 and t[:, 0].max() < 100 and t[:, 1].min() >= 0 and t[:, 1].max() < 80
    with pytest.raises(ImageTooSmall):
        landing.crop_upper_right(np.zeros((99, 200)))


def test_empty_target():
    img = np.zeros((120, 120), dtype=np.float32)
    s = Sample(img, Contour([(110, 1), (110, 2), (111, 2)]), "far")
    with pytest.raises(EmptyTarget):
        landing.landing_target(s)


def test_flip_augment(pairs):
    assert len(landing.augment(pairs)) == 2 * len(pairs)
    for sub, t in pairs:
        f, ft = landing.flip_augment(sub, t)
        assert ft[:, 0].min() >= 0 and ft[:, 0].max() < CROP_ROWS
        ff, fft = landing.flip_augment(f, ft)
        assert np.array_equal(ff.patch, sub.patch) and np.array_equal(fft, t)
        assert np.array_equal(f.patch[0], sub.patch[-1])


def test_loss_is_mean_min_distance(pairs):
    net = tiny_generator()
    out = landing.generator_outputs(net, pairs)
    ref = np.mean([np.min(np.hypot(t[:, 0] - o[0], t[:, 1] - o[1])) for o, (_, t) in zip(out, pairs)])
    assert landing.landing_loss(net, pairs) == pytest.approx(ref, rel=1e-12)
    loss, _ = landing.loss_gradient(net, pairs)
    assert loss == landing.landing_loss(net, pairs)


def test_gradient_on_target_is_zero():
    net = nn.Network([nn.FLATTEN_SPEC, nn.fc(2)], (100, 80, 1))
    net.set_parameters([np.zeros((8000, 2), np.float32), np.array([3.0, 4.0], np.float32)])
    sub = landing.SubImage(np.ones((100, 80), np.float32), (0, 0))
    loss, g = landing.loss_gradient(net, [(sub, np.array([[3, 4], [9, 9]]))])
    assert loss == 0.0 and all(np.all(a == 0) for a in g.arrays())


def test_gradient_single_pair_linear_hand_derivative():
    net = nn.Network([nn.FLATTEN_SPEC, nn.fc(2)], (100, 80, 1))
    net.set_parameters([np.zeros((8000, 2), np.float32), np.array([0.0, 0.0], np.float32)])
    sub = landing.SubImage(np.zeros((100, 80), np.float32), (0, 0))
    loss, g = landing.loss_gradient(net, [(sub, np.array([[3, 4], [30, 40]]))])
    assert loss == pytest.approx(5.0)
    # d/db |b - (3,4)| at b = 0 is (b - p)/|b - p| = (-0.6, -0.8)
    assert np.allclose(g.arrays()[1], [-0.6, -0.8], atol=1e-6)


def test_gradient_finite_differences(pairs):
    net = tiny_generator(1).astype(np.float64)
    _, g = landing.loss_gradient(net, pairs)
    params = net.parameters()
    rng = np.random.default_rng(0)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        for j in rng.choice(flat.size, size=min(20, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + 1e-6
            up = landing.landing_loss(net, pairs)
            flat[j] = orig - 1e-6
            dn = landing.landing_loss(net, pairs)
            flat[j] = orig
            num = (up - dn) / 2e-6
            ana = g.arrays()[pi].reshape(-1)[j]
            if max(abs(num), abs(ana)) > 1e-8:
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
    assert worst < 1e-3


def test_secant_on_quadratic():
    lam_star = 0.3721
    phi = lambda lam: 2.5 * (lam - lam_star) ** 2 + 1.0  # noqa: E731
    lam = landing.secant_minimize(phi, landing.LineSearchConfig(lam_lo=1e-6, lam_hi=1.0))
    assert abs(lam - lam_star) < 1e-4
    # an optimum beyond the bracket clamps to the upper end
    lam = landing.secant_minimize(lambda x: (x - 3.0) ** 2, landing.LineSearchConfig(lam_hi=1.0))
    assert lam == pytest.approx(1.0)


def test_line_search_never_increases_loss(pairs):
    cfg = landing.LineSearchConfig(lam_hi=1e-2, secant_iters=4)
    rng = np.random.default_rng(0)
    for i in range(50):
        net = tiny_generator(seed=i)
        for p in net.parameters():
            p += rng.normal(scale=0.01, size=p.shape).astype(p.dtype)
        loss0, g = landing.loss_gradient(net, pairs)
        snapshot = [p.copy() for p in net.parameters()]
        try:
            lam = landing.line_search_lr(net, g, pairs, cfg, loss0)
        except Stalled:
            continue
        assert all(np.array_equal(a, b) for a, b in zip(snapshot, net.parameters()))
        nn.apply_update(net, g, lam)
        assert landing.landing_loss(net, pairs) <= loss0


def test_line_search_zero_gradient_stalls(pairs):
    net = tiny_generator()
    g = nn.Gradients([[np.zeros_like(p) for p in layer] for layer in net.params])
    with pytest.raises(Stalled):
        landing.line_search_lr(net, g, pairs, landing.LineSearchConfig())


def test_train_generator_monotone_and_logged(pairs, tmp_path):
    train, val = landing.augment(pairs[:3]), pairs[3:]
    net = tiny_generator(2)
    res = landing.train_generator(train, val, 200, landing.LineSearchConfig(lam_hi=1e-2, secant_iters=3),
                                  net=net, log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "g.ckpt")
    losses = [r["train_loss"] for r in res.history]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == len(res.history)
    assert res.stalled or len(res.history) == 200


def test_train_zero_iterations(pairs):
    net = tiny_generator(3)
    before = [p.copy() for p in net.parameters()]
    res = landing.train_generator(pairs, pairs, 0, net=net)
    assert res.history == [] and all(np.array_equal(a, b) for a, b in zip(before, res.net.parameters()))


def test_round_half_away_and_translation():
    assert [landing.round_half_away(v) for v in (2.5, -2.5, 2.49, -0.5, 0.0)] == [3, -3, 2, -1, 0]
    assert landing.to_full_image((10.5, 20.4), 208) == Pixel(11, 148)
    assert landing.to_full_image((-3.0, 95.0), 208) == Pixel(0, 207)
    assert landing.to_full_image((140.0, -7.0), 80) == Pixel(99, 0)


def test_predict_landing_and_distance(synth_samples):
    s = synth_samples[0]
    spot = landing.predict_landing(nn.landing_network(seed=0), s.image)
    assert 0 <= spot.row < 100 and s.shape[1] - 80 <= spot.col < s.shape[1]
    on = s.contour[0]
    assert landing.landing_distance(on, s) == 0.0
