import numpy as np
import pytest

from calibra import explain as X
from calibra import tensor as T
from calibra.errors import UsageError
from calibra.model import ActivationBundle, NetConfig, Network


def test_cam_zero_weights(rng):
    f = rng.normal(size=(4, 3, 3))
    assert np.all(X.compute_cam(f, np.zeros((3, 4)), 1).values == 0)


def test_cam_two_maps(rng):
    f = rng.normal(size=(2, 3, 3))
    w = np.array([[2.0, -1.0], [0, 0], [0, 0]])
    np.testing.assert_allclose(X.compute_cam(f, w, 0).values, 2 * f[0] - f[1])


def test_cam_single_map_identity(rng):
    f = rng.normal(size=(1, 4, 4))
    np.testing.assert_array_equal(X.compute_cam(f, np.ones((3, 1)), 2).values, f[0])


def test_cam_batch_per_sample_classes(rng):
    f = rng.normal(size=(2, 3, 2, 2))
    w = rng.normal(size=(3, 3, 1, 1))
    out = X.compute_cam(f, w, [0, 2]).values
    np.testing.assert_allclose(out[1], X.compute_cam(f[1], w, 2).values)


def test_caam_direct_sum():
    f = np.array([[[1.0, 0], [0, 0]], [[0, 1.0], [0, 0]]])
    np.testing.assert_array_equal(X.compute_caam(f).values, [[1, 1], [0, 0]])


def test_caam_equals_unit_weight_cam_and_is_linear(rng):
    f = rng.normal(size=(5, 3, 3))
    np.testing.assert_allclose(X.compute_caam(f).values, X.compute_cam(f, np.ones((3, 5)), 1).values)
    np.testing.assert_allclose(X.compute_caam(2 * f).values, 2 * X.compute_caam(f).values)


def test_cam_sum_over_classes_relation(rng):
    f = rng.normal(size=(4, 3, 3))
    w = rng.random((3, 4))
    w /= w.sum(axis=0, keepdims=True)  # per-channel weights sum to 1
    total = sum(X.compute_cam(f, w, i).values for i in range(3))
    np.testing.assert_allclose(total, X.compute_caam(f).values, atol=1e-12)


def test_minmax_examples():
    np.testing.assert_allclose(X.minmax_normalize(np.array([[0.0, 2.0, 4.0]])).values, [[0, 0.5, 1]])
    assert np.all(X.minmax_normalize(np.full((3, 3), 7.0)).values == 0)
    m = np.array([[0.0, 0.3], [1.0, 0.5]])
    np.testing.assert_allclose(X.minmax_normalize(m).values, m)


def test_saliency_to_map_examples():
    np.testing.assert_array_equal(X.saliency_to_map(np.array([[-1.0, -2.0]])), [[0, 0]])
    np.testing.assert_allclose(X.saliency_to_map(np.array([[-1.0, 0.0, 3.0]])), [[0, 0, 1]])
    m = np.array([[0.0, 1.0, 4.0]])
    np.testing.assert_allclose(X.saliency_to_map(m), m / 4)


def test_ig_linear_exact(rng):
    w = rng.normal(size=(5, 5))
    x = rng.normal(size=(5, 5))
    for t in (1, 3, 17):
        attr = X.integrated_gradients_fn(lambda p: (p * w).sum(axis=(1, 2)), x, None, t)
        np.testing.assert_allclose(attr, w * x, atol=1e-9)


def test_ig_quadratic_riemann():
    attr = X.integrated_gradients_fn(lambda p: (p * p).sum(axis=(1,)), np.array([1.0]), None, 10)
    assert attr[0] == pytest.approx(1.1, abs=1e-12)


def test_ig_rejects_zero_steps():
    with pytest.raises(UsageError):
        X.integrated_gradients_fn(lambda p: p.sum(axis=(1,)), np.ones(2), None, 0)


def test_ig_image_equals_baseline_is_zero():
    net = Network(NetConfig.tiny(dtype="float64"))
    sal = X.integrated_gradients(net, np.zeros((64, 64)), class_index=2, steps=4)
    assert np.all(sal.values == 0) and sal.values.shape == (64, 64)
    assert np.all(X.saliency_to_map(sal) == 0)


def test_ig_batch_matches_single():
    net = Network(NetConfig.tiny(dtype="float64", seed=1))
    imgs = np.random.default_rng(0).random((2, 64, 64))
    batch = X.integrated_gradients_batch(net, imgs, [0, 2], steps=3, chunk=4)
    single = X.integrated_gradients(net, imgs[1], class_index=2, steps=3).values
    np.testing.assert_allclose(batch[1], single, rtol=1e-9, atol=1e-12)


def test_ig_convergence_monotone():
    net = Network(NetConfig(widths=(2, 2, 4, 4, 4), dtype="float64", seed=2))
    x = np.random.default_rng(1).random((32, 32))
    ref = X.integrated_gradients(net, x, class_index=1, steps=2048, chunk=256).values
    errs = [np.abs(X.integrated_gradients(net, x, class_index=1, steps=t, chunk=256).values - ref).sum()
            for t in (8, 16, 32, 64, 128, 256)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:])), errs


def _bundle_with(caams):
    b = ActivationBundle(image=T.DiffArray(np.zeros((1, 1, 8, 8))))
    for s, m in caams.items():
        b.features[s] = T.DiffArray(m[None, None])
    return b


def test_refined_caam_identical_scales(rng):
    m = rng.random((4, 4))
    out = X.refined_caam(_bundle_with({3: m, 4: m, 5: m}), 8, 8)
    single = X.minmax_normalize(T.upsample_bilinear(T.DiffArray(m[None, None]), 8, 8)).values[0, 0]
    np.testing.assert_allclose(out[0], single, atol=1e-12)


def test_refined_caam_zero_scale(rng):
    m1, m2 = rng.random((4, 4)), rng.random((2, 2))
    out = X.refined_caam(_bundle_with({3: m1, 4: m2, 5: np.zeros((1, 1))}), 8, 8)
    up = [X.minmax_normalize(T.upsample_bilinear(T.DiffArray(m[None, None]), 8, 8)).values[0, 0]
          for m in (m1, m2)]
    np.testing.assert_allclose(out[0], (up[0] + up[1]) / 3, atol=1e-12)
    assert out.min() >= 0 and out.max() <= 1
