import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calibra import fusion as F
from calibra.errors import DegenerateInputError, UsageError

maps = arrays(np.float64, (4, 4), elements=st.floats(0, 1))


def test_norm3_examples():
    assert F.norm3([3.0], [4.0], [0.0]) == 5.0
    assert F.norm3([1.0], [1.0], [1.0]) == pytest.approx(np.sqrt(3), abs=1e-12)
    c, s, p = np.random.default_rng(0).random((3, 5))
    assert F.norm3(3 * c, 3 * s, 3 * p) == pytest.approx(3 * F.norm3(c, s, p))


def test_norm3_all_zero():
    with pytest.raises(DegenerateInputError):
        F.norm3(np.zeros(4), np.zeros(4), np.zeros(4))


def test_sharpen_examples():
    np.testing.assert_allclose(F.sharpen([0.5, 0.5], 0.3), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(F.sharpen([0.8, 0.2], 0.5), [0.94118, 0.05882], atol=1e-5)
    d = np.array([0.3, 0.7])
    np.testing.assert_allclose(F.sharpen(d, 1.0), d, atol=1e-15)


def test_sharpen_concentrates_and_limits():
    d = np.array([0.6, 0.4])
    assert F.sharpen(d, 0.5).max() >= d.max()
    np.testing.assert_allclose(F.sharpen(d, 1e-3), [1.0, 0.0], atol=1e-12)
    with pytest.raises(UsageError):
        F.sharpen(d, 0.0)


def test_weight_renormalization():
    pl = F.combine(np.full((2, 2), 0.2), np.full((2, 2), 0.7), np.full((2, 2), 0.9))
    np.testing.assert_allclose(pl.weights, (3 / 11, 4 / 11, 4 / 11), atol=1e-9)
    assert pl.raw_weights == (0.3, 0.4, 0.4)


@pytest.mark.parametrize("scope", ["image", "pixel"])
def test_equal_sources_ignore_weights(scope, rng):
    m = rng.random((6, 6))
    a = F.combine(m, m, m, 0.3, 0.4, 0.4, norm_scope=scope).probs
    b = F.combine(m, m, m, 0.9, 0.05, 0.05, norm_scope=scope).probs
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_single_source_image_scope(rng):
    c = rng.random((5, 5))
    s, p = rng.random((5, 5)), rng.random((5, 5))
    out = F.combine(c, s, p, 1.0, 0.0, 0.0, T=0.5).probs
    norm = F.norm3(c, s, p)
    logits = np.stack([c, 1 - c], axis=-1) / norm
    soft = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(out, F.sharpen(soft, 0.5), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(maps, maps, maps, st.sampled_from(["image", "pixel"]), st.booleans())
def test_output_on_simplex(c, s, p, scope, sharp):
    pr = F.combine(c, s, p, norm_scope=scope, sharpen_enabled=sharp).probs
    assert np.all(pr >= 0)
    np.testing.assert_allclose(pr.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(maps, maps, maps)
def test_source_order_symmetry(c, s, p):
    a = F.combine(c, s, p, 0.3, 0.4, 0.4, norm_scope="pixel").probs
    b = F.combine(s, c, p, 0.4, 0.3, 0.4, norm_scope="pixel").probs
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(maps, maps, maps)
def test_channel_swap_equivariance_pixel_scope(c, s, p):
    a = F.combine(c, s, p, norm_scope="pixel").probs
    b = F.combine(1 - c, 1 - s, 1 - p, norm_scope="pixel").probs
    np.testing.assert_allclose(a[..., ::-1], b, atol=1e-12)


def test_renormalize_flag_only_changes_logged_weights(rng):
    c, s, p = rng.random((3, 4, 4))
    a = F.combine(c, s, p, renormalize_weights=True)
    b = F.combine(c, s, p, renormalize_weights=False)
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)
    assert b.weights == (0.3, 0.4, 0.4)


def test_no_sharpen_is_plain_mix(rng):
    c, s, p = rng.random((3, 3, 3))
    unsharp = F.combine(c, s, p, sharpen_enabled=False).probs
    sharp = F.combine(c, s, p).probs
    np.testing.assert_allclose(F.sharpen(unsharp, 0.5), sharp, atol=1e-12)


def test_all_zero_triple_is_uniform(caplog):
    z = np.zeros((3, 3))
    with caplog.at_level(logging.WARNING):
        pl = F.combine(z, z, z)
    assert np.all(pl.probs == 0.5)
    assert "all-zero" in caplog.text


def test_batched_matches_per_image(rng):
    c, s, p = rng.random((3, 2, 4, 4))
    batch = F.combine(c, s, p).probs
    np.testing.assert_allclose(batch[1], F.combine(c[1], s[1], p[1]).probs, atol=1e-15)


def test_bad_inputs():
    with pytest.raises(UsageError):
        F.combine(np.zeros(3), np.zeros(4), np.zeros(3))
    with pytest.raises(UsageError):
        F.combine(np.ones(3), np.ones(3), np.ones(3), norm_scope="global")
    with pytest.raises(UsageError):
        F.combine(np.ones(3), np.ones(3), np.ones(3), -1, 1, 1)


def test_threshold_oracle():
    np.testing.assert_array_equal(F.threshold_pseudo_label([0.2, 0.5, 0.9]), [0, 1, 1])
