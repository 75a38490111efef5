import math

import numpy as np
import pytest

from dermhybrid.hybridnet import (
    ConvBlock,
    HybridModelConfig,
    TrainConfig,
    batch_cross_entropy,
    cross_entropy,
    dice_loss,
    dice_loss_grad,
    embed,
    forward,
    gradient_check,
    init_model,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    softmax,
    train,
    write_history,
)

SMALL = dict(input_size=(8, 8), conv_blocks=(ConvBlock(4), ConvBlock(8), ConvBlock(8, pool=False)), fc_hidden=16)


def small_model(seed=0, **kw):
    return init_model(HybridModelConfig(**{**SMALL, "seed": seed}), **kw)


def test_init_deterministic_and_shapes():
    a = init_model(HybridModelConfig(seed=3))
    b = init_model(HybridModelConfig(seed=3))
    assert a.param_names() == b.param_names()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    cfg = HybridModelConfig(conv_blocks=(ConvBlock(16), ConvBlock(128)), seed=0)
    m = init_model(cfg)
    assert m.params["fc1_w"].shape[0] == 328
    assert m.params["fc2_w"].shape[1] == 7
    assert all(np.all(m.params[k] == 0) for k in m.params if k.endswith("_b"))


def test_init_uniform_fan_in_bound():
    m = init_model(HybridModelConfig(seed=1))
    w = m.params["conv1_w"]
    assert np.abs(w).max() <= math.sqrt(6.0 / (9 * 16))


def test_config_errors():
    with pytest.raises(ValueError):
        HybridModelConfig(conv_blocks=())
    with pytest.raises(ValueError):
        HybridModelConfig(conv_embed_dim=10)
    with pytest.raises(ValueError):
        HybridModelConfig(num_classes=5)
    with pytest.raises(ValueError):
        HybridModelConfig(injection_dim=100)
    with pytest.raises(ValueError):
        HybridModelConfig(input_size=(6, 6), conv_blocks=(ConvBlock(4), ConvBlock(4)))


def test_zero_parameters_give_zero_logits(rng):
    m = small_model()
    for k in m.params:
        m.params[k][...] = 0.0
    out = forward(m, rng.random((8, 8, 3)), rng.normal(size=200))
    np.testing.assert_array_equal(out, np.zeros(7))
    np.testing.assert_array_equal(embed(m, rng.random((8, 8, 3)), rng.normal(size=200)), np.zeros(16))


def test_forward_deterministic(rng):
    m = small_model(2)
    img, hand = rng.random((8, 8, 3)), rng.normal(size=200)
    np.testing.assert_array_equal(forward(m, img, hand), forward(m, img, hand))
    np.testing.assert_array_equal(embed(m, img, hand), embed(m, img, hand))
    assert embed(m, img, hand).shape == (16,)


def test_injection_path_is_live(rng):
    m = small_model(4)
    img, hand = rng.random((8, 8, 3)), rng.normal(size=200)
    assert np.any(m.params["fc1_w"][m.config.conv_embed_dim] != 0)
    h = 1e-6
    bumped = hand.copy()
    bumped[0] += h
    sensitivity = np.abs(forward(m, img, bumped) - forward(m, img, hand)) / h
    assert sensitivity.max() > 0


def test_forward_errors(rng):
    m = small_model()
    with pytest.raises(ValueError, match="does not match"):
        forward(m, rng.random((9, 8, 3)), rng.normal(size=200))
    with pytest.raises(ValueError, match="required"):
        forward(m, rng.random((8, 8, 3)), None)
    base = small_model(use_injection=False)
    with pytest.raises(ValueError):
        forward(base, rng.random((8, 8, 3)), rng.normal(size=200))
    assert forward(base, rng.random((8, 8, 3))).shape == (7,)


def test_softmax_sums_to_one(rng):
    z = rng.normal(0, 30, (50, 7))
    assert np.max(np.abs(softmax(z).sum(axis=1) - 1)) < 1e-12


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros(7), 3) == pytest.approx(math.log(7), abs=1e-12)
    assert cross_entropy(np.array([100.0] + [0.0] * 6), 0) == pytest.approx(0.0, abs=1e-12)
    z = np.array([1.0] + [0.0] * 6)
    oracle = -math.log(math.exp(z[1]) / sum(math.exp(v) for v in z))
    assert cross_entropy(z, 1) == pytest.approx(oracle, abs=1e-12)
    assert cross_entropy(z, 1) == pytest.approx(2.1654221804855953, abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(np.array([np.nan] * 7), 0)


def test_batch_cross_entropy_gradient_fd(rng):
    z = rng.normal(size=(4, 7))
    y = np.array([0, 3, 6, 2])
    _, g = batch_cross_entropy(z, y)
    h = 1e-6
    for i in range(4):
        for j in range(7):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            fd = (batch_cross_entropy(zp, y)[0] - batch_cross_entropy(zm, y)[0]) / (2 * h)
            assert g[i, j] == pytest.approx(fd, abs=1e-8)


def test_dice_loss_examples():
    gt = np.zeros((6, 6), dtype=bool)
    gt[:3] = True
    assert dice_loss(gt.astype(float), gt) == pytest.approx(0.0, abs=1e-12)
    assert dice_loss(1.0 - gt, gt, eps=1.0) == pytest.approx(1 - 1 / 37)
    n = gt.size
    assert dice_loss(np.full(gt.shape, 0.5), gt, eps=1.0) == pytest.approx(1 - (0.5 * n + 1) / (n + 1))
    assert dice_loss(np.full(gt.shape, 0.5), gt, eps=1e-9) == pytest.approx(0.5, abs=1e-9)
    with pytest.raises(ValueError):
        dice_loss(np.zeros((2, 2)), np.zeros((3, 3)))


def test_dice_loss_bounds_and_monotone(rng):
    for _ in range(50):
        p = rng.random((5, 5))
        g = rng.random((5, 5)) > 0.5
        assert 0.0 <= dice_loss(p, g) <= 1.0
    g = np.zeros(10, dtype=bool)
    g[:5] = True
    # move mass from background to lesion, keeping sum(p) fixed
    low = np.r_[np.full(5, 0.2), np.full(5, 0.6)]
    high = np.r_[np.full(5, 0.6), np.full(5, 0.2)]
    assert dice_loss(high, g) < dice_loss(low, g)


def test_dice_loss_gradient_fd(rng):
    p = rng.random((4, 4))
    g = rng.random((4, 4)) > 0.5
    grad = dice_loss_grad(p, g)
    h = 1e-6
    worst = 0.0
    for idx in np.ndindex(p.shape):
        pp, pm = p.copy(), p.copy()
        pp[idx] += h
        pm[idx] -= h
        fd = (dice_loss(pp, g) - dice_loss(pm, g)) / (2 * h)
        worst = max(worst, abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-8))
    assert worst < 1e-6


def test_gradient_check_output_layer_is_exact(rng):
    # the loss is smooth in the output affine layer, so only round-off remains;
    # biases have O(1) gradients (p - y) and land far below 1e-8
    m = small_model(5)
    sample = (rng.random((8, 8, 3)), rng.normal(size=200), 2)
    assert gradient_check(m, sample, 1e-5, layers=["fc2_b"]) < 1e-8
    # weight gradients scale with the hidden activation, so round-off (~1e-11
    # absolute) is relatively larger there
    assert gradient_check(m, sample, 1e-5, layers=["fc2_w"]) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_gradient_check_full_model(seed):
    r = np.random.default_rng(seed)
    m = small_model(seed)
    err = gradient_check(m, (r.random((8, 8, 3)), r.normal(size=200), seed % 7), 1e-5, seed=seed)
    assert err < 1e-4


def test_gradient_check_without_injection(rng):
    m = small_model(7, use_injection=False)
    err = gradient_check(m, (rng.random((8, 8, 3)), None, 1), 1e-5, layers=["conv0_w", "conv2_w", "fc1_w"])
    assert err < 1e-4


def test_gradient_check_rejects_bad_eps(rng):
    with pytest.raises(ValueError):
        gradient_check(small_model(), (rng.random((8, 8, 3)), rng.normal(size=200), 0), 1e-2)


def toy_two_class(rng):
    """8 samples, 8x8 images: class 0 dark, class 1 bright."""
    images = np.concatenate([rng.uniform(0.0, 0.3, (4, 8, 8, 3)), rng.uniform(0.7, 1.0, (4, 8, 8, 3))])
    labels = np.array([0] * 4 + [1] * 4)
    hands = rng.normal(size=(8, 200))
    return images, hands, labels


def test_train_zero_learning_rate_is_identity(rng):
    m = small_model(1)
    x, h, y = toy_two_class(rng)
    out, hist = train(m, x, h, y, TrainConfig(learning_rate=0.0, epochs=2, batch_size=3))
    for k in m.params:
        np.testing.assert_array_equal(out.params[k], m.params[k])
    assert len(hist) == 2


def test_train_fits_separable_toy(rng):
    x, h, y = toy_two_class(rng)
    m = small_model(3, use_injection=False)
    out, hist = train(m, x, None, y, TrainConfig(learning_rate=0.05, epochs=200, batch_size=4, use_injection=False))
    pred = predict_logits(out, x).argmax(axis=1)
    assert np.mean(pred == y) == 1.0
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_train_deterministic(rng):
    x, h, y = toy_two_class(rng)
    tc = TrainConfig(learning_rate=0.02, epochs=5, batch_size=3, seed=9)
    a, ha = train(small_model(2), x, h, y, tc, val=(x, h, y))
    b, hb = train(small_model(2), x, h, y, tc, val=(x, h, y))
    assert ha == hb
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert all(np.isfinite(r["val_bacc"]) for r in ha)


def test_train_errors(rng):
    with pytest.raises(ValueError):
        train(small_model(), np.zeros((0, 8, 8, 3)), np.zeros((0, 200)), [], TrainConfig())
    x, h, y = toy_two_class(rng)
    with pytest.raises(ValueError):
        train(small_model(), x, None, y, TrainConfig(use_injection=True))


def test_checkpoint_round_trip(tmp_path, rng):
    m = small_model(11)
    save_checkpoint(m, tmp_path / "m.hybn")
    raw = (tmp_path / "m.hybn").read_bytes()
    assert raw[:4] == b"HYBN"
    assert int.from_bytes(raw[4:8], "little") == 1
    back = load_checkpoint(tmp_path / "m.hybn")
    assert back.config == m.config and back.use_injection
    img, hand = rng.random((8, 8, 3)), rng.normal(size=200)
    np.testing.assert_array_equal(forward(back, img, hand), forward(m, img, hand))
    # trailing float64 block equals fc2_b
    np.testing.assert_array_equal(np.frombuffer(raw[-56:], "<f8"), m.params["fc2_b"])
    (tmp_path / "bad.hybn").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.hybn")


def test_history_csv(tmp_path):
    write_history(tmp_path / "h.csv", [{"epoch": 1, "train_loss": 0.5, "val_loss": 0.6, "val_bacc": 0.25}])
    assert (tmp_path / "h.csv").read_text().splitlines() == ["epoch,train_loss,val_loss,val_bacc", "1,0.5,0.6,0.25"]
