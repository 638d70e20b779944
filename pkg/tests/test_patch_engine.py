import numpy as np
import pytest
from scipy import stats

from src.errors import AFPError, ErrorCode
from src.patch_engine import (PatchGrid, axis_starts, mean_blend, median_blend, sample_training_patches,
                              tile_volume)
from tests.conftest import random_pair


def _brute_force(grid, outputs, reducer):
    values = {}
    for (start, end), output in zip(grid.windows, outputs):
        for z, y, x in np.ndindex(*(e - s for s, e in zip(start, end))):
            values.setdefault((start[0] + z, start[1] + y, start[2] + x), []).append(output[z, y, x])
    out = np.zeros(grid.volume_shape, dtype=np.float64)
    for voxel in np.ndindex(*grid.volume_shape):
        out[voxel] = reducer(values[voxel])
    return out


def test_cubic_grid_has_27_windows():
    grid = tile_volume((64, 64, 64), (32, 32, 32), 0.5)
    assert len(grid.windows) == 27
    assert axis_starts(64, 32, 0.5) == [0, 16, 32]


def test_last_window_snaps_to_border():
    assert axis_starts(40, 32, 0.5) == [0, 8]
    grid = tile_volume((40, 32, 32), (32, 32, 32), 0.5)
    assert [w[0][0] for w in grid.windows] == [0, 8]
    assert grid.coverage().min() >= 1


def test_patch_too_large():
    with pytest.raises(AFPError) as exc:
        tile_volume((16, 16, 16), (32, 16, 16))
    assert exc.value.code == ErrorCode.PATCH_TOO_LARGE


def test_invalid_tiling():
    with pytest.raises(AFPError) as exc:
        tile_volume((16, 16, 16), (8, 8, 8), 1.0)
    assert exc.value.code == ErrorCode.INVALID_ARGUMENT


def _grid_outputs(grid, rng):
    # Multiplos de 2^-12: las sumas en float64 son exactas en cualquier orden
    return [(np.round(rng.standard_normal(grid.patch_size) * 4096) / 4096).astype(np.float32) for _ in grid.windows]


def _random_grid(rng):
    shape = tuple(int(s) for s in rng.integers(4, 13, size=3))
    patch = tuple(int(rng.integers(1, s + 1)) for s in shape)
    return tile_volume(shape, patch, float(rng.uniform(0.05, 0.95)))


def test_blends_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(10):
        grid = _random_grid(rng)
        outputs = _grid_outputs(grid, rng)
        median = _brute_force(grid, outputs, lambda v: np.median(np.asarray(v, dtype=np.float64)))
        mean = _brute_force(grid, outputs, lambda v: np.mean(np.asarray(v, dtype=np.float64)))
        np.testing.assert_array_equal(median_blend(grid, outputs), median.astype(np.float32))
        np.testing.assert_array_equal(mean_blend(grid, outputs), mean.astype(np.float32))


def test_identity_patches_reconstruct_the_volume():
    rng = np.random.default_rng(4)
    for _ in range(20):
        grid = _random_grid(rng)
        volume = rng.standard_normal(grid.volume_shape).astype(np.float32)
        assert grid.coverage().min() >= 1
        outputs = [volume[grid.slices(i)] for i in range(len(grid.windows))]
        np.testing.assert_array_equal(median_blend(grid, outputs), volume)
        np.testing.assert_array_equal(mean_blend(grid, outputs), volume)


def test_blends_do_not_depend_on_window_order():
    grid = tile_volume((12, 12, 12), (8, 8, 8), 0.5)
    rng = np.random.default_rng(2)
    outputs = [rng.standard_normal(grid.patch_size) for _ in grid.windows]
    order = rng.permutation(len(outputs))
    shuffled = PatchGrid(grid.volume_shape, grid.patch_size, grid.tiling, tuple(grid.windows[i] for i in order))
    shuffled_outputs = [outputs[i] for i in order]
    np.testing.assert_array_equal(median_blend(grid, outputs), median_blend(shuffled, shuffled_outputs))
    np.testing.assert_array_equal(mean_blend(grid, outputs), mean_blend(shuffled, shuffled_outputs))


def test_median_rejects_outlier_window():
    window = ((0, 0, 0), (2, 2, 2))
    grid = PatchGrid((2, 2, 2), (2, 2, 2), 0.5, (window, window, window))
    outputs = [np.full((2, 2, 2), v, dtype=np.float32) for v in (1.0, 2.0, 100.0)]
    np.testing.assert_allclose(median_blend(grid, outputs), 2.0)
    np.testing.assert_allclose(mean_blend(grid, outputs), 103.0 / 3.0, rtol=1e-6)


def test_constant_outputs_reconstruct_exactly():
    grid = tile_volume((20, 20, 20), (8, 8, 8), 0.5)
    outputs = [np.full(grid.patch_size, 3.25) for _ in grid.windows]
    assert np.all(median_blend(grid, outputs) == 3.25)


def test_count_mismatch():
    grid = tile_volume((16, 16, 16), (8, 8, 8), 0.5)
    with pytest.raises(AFPError) as exc:
        median_blend(grid, [np.zeros((8, 8, 8))])
    assert exc.value.code == ErrorCode.COUNT_MISMATCH


def test_sampler_is_seeded_and_biased(phantom_pair):
    a = sample_training_patches(phantom_pair, (16, 16, 16), 6, seed=11, fg_bias=0.5)
    b = sample_training_patches(phantom_pair, (16, 16, 16), 6, seed=11, fg_bias=0.5)
    assert [p.start for p in a] == [p.start for p in b]
    assert all(p.source.shape == (16, 16, 16) for p in a)
    assert all(p.labels.any() for p in a[:3])
    np.testing.assert_array_equal(a[0].target, phantom_pair.target.data[
        a[0].start[0]:a[0].start[0] + 16, a[0].start[1]:a[0].start[1] + 16, a[0].start[2]:a[0].start[2] + 16])


def test_sampler_rejects_bad_bias(phantom_pair):
    with pytest.raises(AFPError) as exc:
        sample_training_patches(phantom_pair, (8, 8, 8), 2, seed=0, fg_bias=1.5)
    assert exc.value.code == ErrorCode.INVALID_ARGUMENT


def test_full_bias_always_hits_foreground(phantom_pair):
    patches = sample_training_patches(phantom_pair, (8, 8, 8), 40, seed=3, fg_bias=1.0)
    assert len(patches) == 40
    assert all(p.labels.any() for p in patches)


def test_unbiased_starts_are_uniform():
    pair = random_pair()
    patches = sample_training_patches(pair, (8, 8, 8), 2700, seed=9, fg_bias=0.0)
    for axis in range(3):
        counts = np.bincount([p.start[axis] for p in patches], minlength=9)
        assert len(counts) == 9
        assert stats.chisquare(counts).pvalue > 1e-3
