import numpy as np
import pytest

from fedgid import model as M
from fedgid.datagen import DatasetSpec, ImageSet, LabeledImage, generate_dataset
from fedgid.intervention import (BackgroundExtractor, InterventionConfig, extract_background,
                                 injected_background_ids, intervention_loss, mix_features,
                                 mutual_information_bits, read_bbox_table, sample_backgrounds,
                                 write_bbox_table)


def _image(pixels, bbox):
    h, w = pixels.shape[:2]
    return LabeledImage(pixels, 0, np.zeros((h, w), bool), bbox, 0)


def loop_mask_oracle(pixels, bbox):
    x1, y1, x2, y2 = bbox
    out = pixels.copy()
    for y in range(pixels.shape[0]):
        for x in range(pixels.shape[1]):
            if x1 <= x <= x2 and y1 <= y <= y2:
                out[y, x] = 0.0
    return out


def test_full_box_zeroes_everything():
    px = np.random.default_rng(0).random((5, 7, 3)) + 0.1
    assert np.all(extract_background(_image(px, (0, 0, 6, 4))) == 0)


def test_single_pixel_box():
    px = np.random.default_rng(1).random((5, 5, 3)) + 0.1
    out = extract_background(_image(px, (2, 3, 2, 3)))
    assert np.all(out[3, 2] == 0)
    keep = np.ones((5, 5), bool)
    keep[3, 2] = False
    assert np.array_equal(out[keep], px[keep])


def test_4x4_box_matches_loop_oracle():
    px = np.random.default_rng(2).random((4, 4, 3)) + 0.1
    out = extract_background(_image(px, (1, 1, 2, 2)))
    assert np.array_equal(out, loop_mask_oracle(px, (1, 1, 2, 2)))
    assert np.count_nonzero(np.all(out == 0, axis=-1)) == 4


def test_loop_oracle_on_generated_images(small_train):
    for i in range(30):
        im = small_train[i]
        assert np.array_equal(extract_background(im), loop_mask_oracle(im.pixels, im.bbox))


def test_extraction_is_idempotent(small_train):
    im = small_train[0]
    once = extract_background(im)
    twice = extract_background(_image(once, im.bbox))
    assert np.array_equal(once, twice)


def test_bbox_file_mode(tmp_path, small_train):
    boxes = small_train.bboxes[:5]
    path = write_bbox_table(tmp_path / "boxes.txt", boxes, ids=range(100, 105))
    table = read_bbox_table(path)
    assert table[102] == tuple(boxes[2])
    ex = BackgroundExtractor.from_file(path)
    assert np.array_equal(extract_background(small_train[2], ex, image_id=102), extract_background(small_train[2]))
    with pytest.raises(KeyError):
        extract_background(small_train[2], ex, image_id=7)
    with pytest.raises(ValueError):
        BackgroundExtractor("bbox_file")
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ValueError):
        read_bbox_table(tmp_path / "bad.txt")


def test_sample_backgrounds_pair_of_two(small_train):
    batch = small_train.subset([0, 1])
    seed = next(s for s in range(100) if list(np.random.default_rng(s).permutation(2)) == [1, 0])
    bgs, perm = sample_backgrounds(batch, seed)
    assert list(perm) == [1, 0]
    assert np.array_equal(bgs[0], extract_background(batch[1]))
    assert np.array_equal(bgs[1], extract_background(batch[0]))


def test_sample_backgrounds_identical_images_and_determinism(small_train):
    same = small_train.subset([3] * 6)
    a, _ = sample_backgrounds(same, 0)
    b, _ = sample_backgrounds(same, 1)
    assert np.array_equal(a, b)
    batch = small_train.subset(range(10))
    x, p = sample_backgrounds(batch, 42)
    y, q = sample_backgrounds(batch, 42)
    assert np.array_equal(p, q) and np.array_equal(x, y)
    with pytest.raises(ValueError):
        sample_backgrounds(small_train.subset([0]), 0)


def test_mix_endpoints_and_arithmetic():
    rng = np.random.default_rng(0)
    fi, fb = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    assert np.array_equal(mix_features(fi, fb, 1.0), fi)
    assert np.array_equal(mix_features(fi, fb, 0.0), fb)
    assert np.allclose(mix_features(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5), [0.5, 0.5])
    with pytest.raises(ValueError):
        mix_features(fi, fb[:, :4], 0.5)
    with pytest.raises(ValueError):
        mix_features(fi, fb, 1.2)
    with pytest.raises(ValueError):
        InterventionConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        InterventionConfig(level="pixels")


def test_mix_jacobians_by_finite_difference():
    rng = np.random.default_rng(3)
    fi, fb = rng.normal(size=5), rng.normal(size=5)
    alpha, eps = 0.7, 1e-6
    for j in range(5):
        e = np.zeros(5)
        e[j] = eps
        d_i = (mix_features(fi + e, fb, alpha) - mix_features(fi - e, fb, alpha)) / (2 * eps)
        d_b = (mix_features(fi, fb + e, alpha) - mix_features(fi, fb - e, alpha)) / (2 * eps)
        assert np.allclose(d_i, alpha * np.eye(5)[j], atol=1e-8)
        assert np.allclose(d_b, (1 - alpha) * np.eye(5)[j], atol=1e-8)


def test_uniform_logits_give_log_c():
    p = M.init_params(0)
    p.tensors["fc2_w"][:] = 0.0
    loss = intervention_loss(p, np.random.default_rng(0).random((6, 64)), np.arange(6))
    assert loss == pytest.approx(np.log(10), abs=1e-12)


def test_loss_vanishes_with_margin():
    p = M.init_params(0)
    p.tensors["fc2_w"][:] = 0.0
    p.tensors["fc2_w"][np.arange(10), np.arange(10)] = 1.0
    feats = np.zeros((3, 64))
    labels = np.array([2, 5, 7])
    losses = []
    for margin in (1.0, 10.0, 50.0):
        feats[np.arange(3), labels] = margin
        losses.append(intervention_loss(p, feats, labels))
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-15


def test_loss_matches_direct_double_sum():
    rng = np.random.default_rng(5)
    p = M.init_params(1)
    p.tensors["fc2_b"][:] = rng.normal(size=10)
    f = rng.normal(size=(3, 64))
    y = np.array([4, 0, 9])
    z = f @ p["fc2_w"] + p["fc2_b"]
    onehot = np.eye(10)[y]
    direct = 0.0
    for i in range(3):
        denom = sum(np.exp(z[i, j]) for j in range(10))
        for c in range(10):
            direct -= onehot[i, c] * np.log(np.exp(z[i, c]) / denom)
    assert intervention_loss(p, f, y) == pytest.approx(direct / 3, abs=1e-9)
    with pytest.raises(ValueError):
        intervention_loss(p, f, np.array([4, 0, 10]))


def test_feature_map_level_goes_through_local_tail(small_train):
    p = M.init_params(2)
    out = M.forward(p, small_train.pixels[:4])
    fm = intervention_loss(p, out.feature_map, small_train.labels[:4], level="GI_FM")
    f = intervention_loss(p, out.feature, small_train.labels[:4], level="GI_F")
    assert fm == pytest.approx(f, abs=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    p = M.init_params(3)
    fi, fb = rng.normal(size=(6, 64)), rng.normal(size=(6, 64))
    y = rng.integers(0, 10, size=6)
    perm = rng.permutation(6)
    mixed = mix_features(fi, fb, 0.6)
    assert np.array_equal(mix_features(fi[perm], fb[perm], 0.6), mixed[perm])
    assert intervention_loss(p, mixed[perm], y[perm]) == pytest.approx(intervention_loss(p, mixed, y), abs=1e-14)


def test_mutual_information_estimator():
    x = np.repeat(np.arange(4), 100)
    assert mutual_information_bits(x, x) == pytest.approx(2.0, abs=1e-12)
    y = np.tile(np.arange(4), 100)
    assert mutual_information_bits(x, y) == pytest.approx(0.0, abs=1e-12)


def test_decorrelation_property():
    ds = generate_dataset(DatasetSpec(seed=21))
    raw = mutual_information_bits(ds.background_ids, ds.labels)
    order, injected = injected_background_ids(ds.background_ids, 64, seed=0)
    paired = mutual_information_bits(injected, ds.labels[order])
    assert raw > 1.0
    assert paired < 0.05
