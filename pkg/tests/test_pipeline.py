import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xraysep.pipeline import (TripleDataset, as_plane, batches, epoch_order, extract_patches,
                              luminance, mix_images, patch_count, stitch_patches)


def test_reference_patch_count():
    assert patch_count(1000, 1000, 64, 56) == 118 * 118 == 13_924


def test_small_grids():
    img = np.random.default_rng(0).uniform(size=(1, 64, 64))
    g = extract_patches(img, 64, 56)
    assert len(g) == 1
    np.testing.assert_array_equal(g.patches[0], img.astype(np.float32))
    g72 = extract_patches(np.zeros((1, 72, 72)), 64, 56)
    assert len(g72) == 4 and g72.stride == 8
    np.testing.assert_array_equal(g72.origins, [[0, 0], [0, 8], [8, 0], [8, 8]])


@pytest.mark.parametrize("size", [64, 72, 128])
def test_round_trip(size):
    img = np.random.default_rng(size).uniform(size=(3, size, size))
    out = stitch_patches(extract_patches(img, 64, 56))
    assert np.abs(out - img).max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.integers(2, 8), st.data())
def test_round_trip_any_geometry(h, w, p, data):
    p = min(p, h, w)
    overlap = data.draw(st.integers(0, p - 1))
    img = np.random.default_rng(h * w).uniform(size=(1, h, w))
    assert np.abs(stitch_patches(extract_patches(img, p, overlap)) - img).max() < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 60), st.integers(4, 60), st.integers(1, 4), st.data())
def test_count_matches_brute_force(h, w, p, data):
    p = min(p * 4, h, w)
    overlap = data.draw(st.integers(0, p - 1))
    s = p - overlap
    origins = {(r, c) for r in range(0, h - p + s, s) for c in range(0, w - p + s, s)}
    assert patch_count(h, w, p, overlap) == len(origins)
    if (h - p) % s == 0 and (w - p) % s == 0:
        assert patch_count(h, w, p, overlap) == ((h - p) // s + 1) * ((w - p) // s + 1)


def test_raster_order():
    g = extract_patches(np.zeros((1, 40, 48)), 16, 8)
    keys = [tuple(o) for o in g.origins]
    assert keys == sorted(keys)


def test_gradient_overlap_average():
    ramp = np.tile(np.arange(72, dtype=np.float64), (64, 1))[None]
    g = extract_patches(ramp, 64, 56)
    assert len(g) == 2
    out = stitch_patches(g)
    np.testing.assert_allclose(out[0, :, 8:64], ramp[0, :, 8:64])


def test_extract_errors():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((1, 32, 32)), 64, 56)
    with pytest.raises(ValueError):
        extract_patches(np.zeros((1, 64, 64)), 64, 64)


def test_stitch_rejects_bad_patches():
    g = extract_patches(np.zeros((1, 72, 72)), 64, 56)
    with pytest.raises(ValueError):
        stitch_patches(g.with_patches(np.zeros((3, 1, 64, 64))))


class TestMix:
    def test_zero_partner(self):
        x1 = np.random.default_rng(0).uniform(size=(1, 8, 8))
        out, f = mix_images(x1, np.zeros_like(x1))
        np.testing.assert_array_equal(out, x1)
        assert f == 1.0

    def test_exactly_one(self):
        out, f = mix_images(np.full((8, 8), 0.5), np.full((8, 8), 0.5))
        assert f == 1.0 and np.all(out == 1.0)

    def test_rescale(self):
        out, f = mix_images(np.full((8, 8), 0.8), np.full((8, 8), 0.8))
        assert f == pytest.approx(1 / 1.6)
        np.testing.assert_allclose(out, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_commutative(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(1, 5, 5)), rng.uniform(size=(1, 5, 5))
        assert mix_images(a, b)[0].tobytes() == mix_images(b, a)[0].tobytes()

    def test_errors(self):
        with pytest.raises(ValueError):
            mix_images(np.zeros((4, 4)), np.zeros((4, 5)))


def _dataset(n_side=4, p=8):
    rng = np.random.default_rng(1)
    size = p + (n_side - 1) * 4
    return TripleDataset.from_images(rng.uniform(size=(3, size, size)), rng.uniform(size=(3, size, size)),
                                     rng.uniform(size=(1, size, size)), p, p - 4)


def test_batches_cover_epoch_once():
    ds = _dataset()
    idx = np.concatenate([b[0] for b in batches(ds, 5, seed=3, epoch=0)])
    assert sorted(idx.tolist()) == list(range(len(ds)))


def test_batches_deterministic_and_reshuffled():
    ds = _dataset()
    a = [b[0].tolist() for b in batches(ds, 5, seed=3, epoch=0)]
    b = [b[0].tolist() for b in batches(ds, 5, seed=3, epoch=0)]
    c = [b[0].tolist() for b in batches(ds, 5, seed=3, epoch=1)]
    assert a == b and a != c
    assert np.array_equal(epoch_order(16, 3, 1), epoch_order(16, 3, 1))


def test_single_batch_and_alignment():
    ds = _dataset()
    out = list(batches(ds, len(ds), seed=0))
    assert len(out) == 1
    idx, r1, r2, x = out[0]
    for j, i in enumerate(idx):
        np.testing.assert_array_equal(r1[j], ds.r1.patches[i])
        np.testing.assert_array_equal(x[j], ds.x.patches[i])


def test_dataset_alignment_checks():
    with pytest.raises(ValueError):
        TripleDataset.from_images(np.zeros((3, 16, 16)), np.zeros((3, 16, 16)), np.zeros((1, 16, 20)), 8, 4)
    ds = _dataset()
    with pytest.raises(ValueError):
        TripleDataset(ds.r1, ds.r2, extract_patches(np.zeros((1, 40, 40)), 8, 4))


def test_plane_helpers():
    assert as_plane(np.zeros((4, 5))).shape == (1, 4, 5)
    with pytest.raises(ValueError):
        as_plane(np.zeros((2, 4, 5)))
    rgb = np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))])
    np.testing.assert_allclose(luminance(rgb), 0.299)
