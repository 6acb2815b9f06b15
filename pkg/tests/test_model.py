import numpy as np
import pytest

from fedgid import model as M
from conftest import rel_err


def test_init_is_seeded_and_biases_zero():
    a, b, c = M.init_params(1), M.init_params(1), M.init_params(2)
    assert a.equals(b)
    assert not a.equals(c)
    for name in ("conv_b", "fc1_b", "fc2_b"):
        assert np.all(a[name] == 0)
    for name, shape in M.Arch().shapes().items():
        assert a[name].shape == shape


def test_architecture_shapes():
    arch = M.Arch()
    assert arch.shapes()["conv_w"] == (16, 3, 5, 5)
    assert arch.shapes()["fc1_w"][1] == 64
    assert arch.shapes()["fc2_w"] == (64, 10)


def test_zero_image_gives_zero_feature_map():
    p = M.init_params(0)
    out = M.forward(p, np.zeros((2, 10, 10, 3)))
    assert np.all(out.feature_map == 0)
    assert out.feature_map.shape == (2, 6, 6, 16)


def test_identical_images_identical_rows(small_train):
    p = M.init_params(0)
    x = np.repeat(small_train.pixels[:1], 2, axis=0)
    out = M.forward(p, x)
    assert np.array_equal(out.feature[0], out.feature[1])
    assert np.array_equal(out.logits[0], out.logits[1])


def test_forward_is_pure(small_train):
    p = M.init_params(0)
    a = M.forward(p, small_train.pixels[:8])
    b = M.forward(p, small_train.pixels[:8])
    for name in ("feature_map", "feature", "logits"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_conv_weight_finite_difference(tiny_params):
    rng = np.random.default_rng(0)
    x = rng.random((2, 6, 6, 3))
    probe = rng.normal(size=(2, 3))

    def objective(p):
        return float(np.sum(M.forward(p, x).logits * probe))

    bundle = M.forward(tiny_params, x)
    grads = M.backward(tiny_params, bundle, d_logits=probe)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 2, 1, 2), (0, 1, 2, 1)]:
        plus, minus = tiny_params.copy(), tiny_params.copy()
        plus.tensors["conv_w"][idx] += eps
        minus.tensors["conv_w"][idx] -= eps
        fd = (objective(plus) - objective(minus)) / (2 * eps)
        assert rel_err(grads["conv_w"][idx], fd) < 1e-4


def test_classify_feature_decomposition(small_train):
    p = M.init_params(5)
    out = M.forward(p, small_train.pixels[:16])
    assert np.array_equal(M.classify_feature(p, out.feature), out.logits)
    _, feat = M.encode(p, small_train.pixels[:16])
    assert np.array_equal(feat, out.feature)


def test_classify_feature_zero_and_shape():
    p = M.init_params(0)
    assert np.all(M.classify_feature(p, np.zeros((3, 64))) == 0)
    assert M.classify_feature(p, np.ones((5, 64))).shape == (5, 10)
    with pytest.raises(ValueError):
        M.classify_feature(p, np.zeros((3, 63)))


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        M.forward(M.init_params(0), np.zeros((2, 12, 12, 3)))
    with pytest.raises(ValueError):
        M.forward(M.init_params(0), np.zeros((10, 10, 3)))


def test_pool_ties_route_to_first_position(tiny_params):
    fmap = np.ones((1, 4, 4, 2))
    _, cache = M.tail_stage(tiny_params, fmap)
    _, dmap = M.tail_backward(tiny_params, cache, np.ones((1, 4)))
    # only the top-left cell of each 2x2 window can receive gradient
    assert np.all(dmap[:, 1::2] == 0) and np.all(dmap[:, :, 1::2] == 0)


def _scalar(p):
    return M.ModelParams(M.TINY_ARCH, {"w": np.array(float(p))})


@pytest.mark.parametrize("p,g,lr,wd,want", [
    (1.0, 1.0, 0.1, 0.0, 0.9),
    (1.0, 0.0, 0.1, 0.01, 0.999),
    (1.0, 5.0, 0.0, 0.01, 1.0),
])
def test_sgd_step_arithmetic(p, g, lr, wd, want):
    out = M.sgd_step(_scalar(p), {"w": np.array(g)}, lr, wd)
    assert out["w"] == pytest.approx(want, abs=1e-15)


def test_sgd_step_zero_lr_is_identity():
    p = M.init_params(0)
    grads = {k: np.ones_like(v) for k, v in p.tensors.items()}
    assert M.sgd_step(p, grads, 0.0, 0.01).equals(p)


def test_sgd_step_errors():
    p = M.init_params(0)
    grads = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    bad = dict(grads, fc2_b=np.zeros(3))
    with pytest.raises(ValueError):
        M.sgd_step(p, bad, 0.1)
    nan = dict(grads, fc1_w=np.full_like(grads["fc1_w"], np.nan))
    with pytest.raises(M.NonFiniteGradientError):
        M.sgd_step(p, nan, 0.1)
    with pytest.raises(ValueError):
        M.sgd_step(p, {k: v for k, v in grads.items() if k != "conv_b"}, 0.1)


def test_softmax_cross_entropy_matches_direct_sum():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 5))
    y = np.array([0, 3, 4, 1])
    loss, _ = M.softmax_cross_entropy(z, y)
    direct = -np.mean([z[i, y[i]] - np.log(np.sum(np.exp(z[i]))) for i in range(4)])
    assert loss == pytest.approx(direct, abs=1e-12)
    with pytest.raises(ValueError):
        M.softmax_cross_entropy(z, np.array([0, 1, 2, 5]))


def test_checkpoint_round_trip(tmp_path):
    p = M.init_params(7)
    M.save_checkpoint(tmp_path / "c.ckpt", p, seed=7, extra={"round": 3})
    back, meta = M.load_checkpoint(tmp_path / "c.ckpt")
    assert back.equals(p)
    assert meta["seed"] == 7 and meta["extra"] == {"round": 3}
    assert meta["arch"]["conv_channels"] == 16
