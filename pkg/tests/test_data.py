import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dede.data import (AugmentConfig, ImageBatch, SyntheticDatasetSpec, Trigger, apply_mask, apply_trigger,
                       augment, generate_dataset, generate_split, make_templates, nearest_template,
                       ood_noise_images, poison_dataset, sample_mask, visible_count)
from dede.nets import PatchGrid, patchify
from dede.rng import Rng

GRID = PatchGrid()
SPEC = SyntheticDatasetSpec()


def batch(n=40, seed=0):
    return generate_split(SPEC, n, Rng(seed))


# ------------------------------------------------------------------ datasets

def test_noiseless_samples_equal_templates():
    spec = SyntheticDatasetSpec(noise=0.0, jitter=0)
    b = generate_split(spec, 16, Rng(0))
    templates = make_templates(spec)
    np.testing.assert_array_equal(b.pixels, templates[b.labels])


def test_nearest_template_accuracy():
    b = generate_split(SPEC, 1000, Rng(1))
    acc = (nearest_template(b.pixels, make_templates(SPEC)) == b.labels).mean()
    assert acc >= 0.99


def test_generation_deterministic():
    a = generate_dataset(SPEC, Rng(4))
    b = generate_dataset(SPEC, Rng(4))
    for k in a:
        np.testing.assert_array_equal(a[k].pixels, b[k].pixels)
        np.testing.assert_array_equal(a[k].labels, b[k].labels)


def test_split_tags_and_sizes():
    d = generate_dataset(SyntheticDatasetSpec(sizes={"pretrain": 8, "dede_train": 4, "test": 4}), Rng(0))
    assert {k: len(v) for k, v in d.items()} == {"pretrain": 8, "dede_train": 4, "test": 4}
    assert d["dede_train"].tag == "dede-train" and d["test"].tag == "test"


@pytest.mark.parametrize("bad", [dict(classes=1), dict(sizes={"pretrain": 0}), dict(noise=-1.0)])
def test_degenerate_spec(bad):
    with pytest.raises(ValueError):
        generate_dataset(SyntheticDatasetSpec(**bad), Rng(0))


def test_image_batch_rejects_out_of_range():
    with pytest.raises(ValueError):
        ImageBatch(np.full((1, 3, 4, 4), 1.5, dtype=np.float32), np.zeros(1, int), np.zeros(1, bool))


# ------------------------------------------------------------------ triggers

def test_patch_trigger_idempotent_and_local():
    x = batch().pixels
    t = Trigger()
    once = apply_trigger(x, t)
    np.testing.assert_array_equal(apply_trigger(once, t), once)
    np.testing.assert_array_equal(once[..., 13:, 13:], 1.0)
    outside = np.ones((16, 16), bool)
    outside[13:, 13:] = False
    np.testing.assert_array_equal(once[..., outside], x[..., outside])


def test_spectral_zero_amplitude_is_identity():
    x = batch().pixels
    np.testing.assert_array_equal(apply_trigger(x, Trigger(kind="spectral", amplitude=0.0)), x)


def test_spectral_perturbation_matches_sinusoid():
    x = np.full((2, 3, 16, 16), 0.5, dtype=np.float32)  # far from the clip bounds
    t = Trigger(kind="spectral", amplitude=0.05)
    delta = apply_trigger(x, t) - x
    yy, xx = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    expected = 0.05 * np.sin(2 * np.pi * (6 * yy / 16 + 6 * xx / 16))
    np.testing.assert_allclose(delta, np.broadcast_to(expected, delta.shape), atol=1e-7)
    assert np.abs(delta).mean() == pytest.approx(np.abs(expected).mean(), abs=1e-7)


@given(st.integers(0, 2**32), st.floats(0.0, 0.1))
def test_spectral_linf_bound(seed, amp):
    x = Rng(seed).uniform01((3, 3, 16, 16)).astype(np.float32)
    xt = apply_trigger(x, Trigger(kind="spectral", amplitude=amp))
    assert np.abs(xt - x).max() <= amp + 1e-6
    assert xt.min() >= 0 and xt.max() <= 1


def test_trigger_bounds():
    with pytest.raises(ValueError):
        apply_trigger(batch().pixels, Trigger(size=5, row=14))
    with pytest.raises(ValueError):
        Trigger(kind="spectral", amplitude=0.2)


# ----------------------------------------------------------------- poisoning

def test_zero_rate_unchanged():
    b = batch()
    p = poison_dataset(b, Trigger(), 0.0, 0, Rng(0))
    np.testing.assert_array_equal(p.pixels, b.pixels)
    assert not p.poisoned.any()


def test_one_percent_of_ten_thousand():
    b = ImageBatch(np.zeros((10000, 1, 4, 4), np.float32), np.arange(10000) % 4, np.zeros(10000, bool))
    p = poison_dataset(b, Trigger(size=2), 0.01, 0, Rng(0))
    assert p.poisoned.sum() == 100
    assert (p.labels[p.poisoned] != 0).all()
    np.testing.assert_array_equal(p.labels, b.labels)


@given(st.integers(0, 2**32), st.floats(0.0, 0.7))
def test_only_flagged_rows_differ_within_support(seed, rate):
    b = batch(40, seed % 7)
    p = poison_dataset(b, Trigger(), rate, 1, Rng(seed))
    changed = (p.pixels != b.pixels).reshape(len(b), -1).any(axis=1)
    assert not (changed & ~p.poisoned).any()
    diff = p.pixels != b.pixels
    assert not diff[..., :13, :].any() and not diff[..., :, :13].any()


def test_target_pool():
    b = batch(80)
    p = poison_dataset(b, Trigger(), 0.1, 2, Rng(0), pool="target")
    assert p.poisoned.sum() == 8 and (p.labels[p.poisoned] == 2).all()


# --------------------------------------------------------------------- masks

def test_visible_count_rounding():
    assert visible_count(0.9, 16) == 2
    assert visible_count(0.99, 16) == 1
    assert visible_count(0.999, 16) == 1
    assert visible_count(0.75, 16) == 4
    assert visible_count(0.0, 16) == 16
    assert visible_count(1.0, 16) == 0


def test_fully_masked_image_is_zero(images):
    m = sample_mask(1.0, 16, Rng(0), len(images))
    assert m.k == 0
    assert (apply_mask(images, m, GRID).pixels == 0).all()


def test_unmasked_image_unchanged(images):
    m = sample_mask(0.0, 16, Rng(0), len(images))
    np.testing.assert_array_equal(apply_mask(images, m, GRID).pixels, images)


def test_alpha_point_nine_keeps_two_patches_exactly(images):
    m = sample_mask(0.9, 16, Rng(0), len(images))
    assert m.visible.shape == (len(images), 2)
    orig = patchify(images, GRID)
    got = patchify(apply_mask(images, m, GRID).pixels, GRID)
    for i in range(len(images)):
        for j in range(16):
            if j in m.visible[i]:
                np.testing.assert_array_equal(got[i, j], orig[i, j])
            else:
                assert (got[i, j] == 0).all()


@given(st.integers(0, 2**32), st.floats(0.0, 1.0))
def test_mask_invariants(seed, alpha):
    x = Rng(seed).uniform01((3, 3, 16, 16)).astype(np.float32)
    m = sample_mask(alpha, 16, Rng(seed + 1), 3)
    assert m.k == visible_count(alpha, 16)
    for row in m.visible:
        assert len(set(row.tolist())) == m.k and (row < 16).all()
    once = apply_mask(x, m, GRID).pixels
    np.testing.assert_array_equal(apply_mask(once, m, GRID).pixels, once)


# ------------------------------------------------------------- augment/noise

def test_augment_range_and_determinism(images):
    a = augment(images, AugmentConfig(), Rng(1))
    b = augment(images, AugmentConfig(), Rng(1))
    np.testing.assert_array_equal(a, b)
    assert a.shape == images.shape and a.min() >= 0 and a.max() <= 1


def test_ood_noise_empty_and_range():
    assert len(ood_noise_images(0, None, Rng(0))) == 0
    n = ood_noise_images(20, None, Rng(0))
    assert n.pixels.min() >= 0 and n.pixels.max() <= 1 and (n.labels == -1).all()
