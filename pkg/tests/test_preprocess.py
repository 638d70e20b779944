import numpy as np
import pytest

from src.errors import AFPError, ErrorCode
from src.preprocess import (Interpolation, IntensityStats, PreprocessConfig, denormalize, normalize_ct,
                            preprocess_pair, resample_volume, resampled_shape, zscore_normalize_mr)
from src.volume_io import LabelVolume, Modality, Volume


def test_resampled_shape_rounds_up():
    assert resampled_shape((10, 10, 10), (1.0, 1.0, 1.0), (0.6, 0.6, 0.6)) == (17, 17, 17)
    assert resampled_shape((4, 4, 4), (1.5, 1.5, 1.5), (1.0, 1.0, 1.0)) == (6, 6, 6)


def test_trilinear_resample_of_ramp_is_exact():
    n = 6
    ramp = np.broadcast_to(np.arange(n, dtype=np.float32)[:, None, None], (n, 4, 4))
    v = Volume(ramp, spacing=(2.0, 1.0, 1.0), origin=(5.0, 0.0, 0.0))
    out = resample_volume(v, (1.0, 1.0, 1.0), Interpolation.LINEAR)
    assert out.shape == (2 * n, 4, 4)
    assert out.spacing == (1.0, 1.0, 1.0)
    assert out.origin == v.origin
    np.testing.assert_allclose(out.data[:, 2, 2], np.arange(2 * n) * 0.5, atol=1e-5)
    np.testing.assert_allclose(np.diff(out.data[:, 2, 2]), 0.5, atol=1e-5)


@pytest.mark.parametrize("shape,spacing,target", [
    ((10, 10, 10), (1.0, 1.0, 1.0), (0.5, 0.5, 0.5)),
    ((10, 10, 10), (1.2, 1.2, 1.2), (0.6, 0.6, 0.6)),
    ((7, 9, 5), (1.0, 0.8, 1.5), (0.6, 0.6, 0.6)),
    ((8, 6, 9), (0.7, 1.3, 1.1), (0.9, 0.5, 0.8)),
])
def test_ramps_stay_ramps_up_to_the_border(shape, spacing, target):
    slope = np.array([0.7, -0.3, 0.2])
    grid = np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, spacing)], indexing="ij")
    ramp = 1.5 + sum(k * g for k, g in zip(slope, grid))
    out = resample_volume(Volume(ramp, spacing=spacing), target, Interpolation.LINEAR)

    out_grid = np.meshgrid(*[np.arange(n) * t for n, t in zip(out.shape, target)], indexing="ij")
    expected = 1.5 + sum(k * g for k, g in zip(slope, out_grid))
    assert np.abs(out.data - expected).max() < 1e-4
    for axis in range(3):
        steps = np.diff(out.data.astype(np.float64), axis=axis)
        assert np.abs(steps - slope[axis] * target[axis]).max() < 1e-4


def test_resample_preserves_constants():
    out = resample_volume(Volume(np.full((5, 7, 6), 3.25), spacing=(1.3, 0.9, 1.1)), (0.6, 0.6, 0.6))
    assert out.shape == resampled_shape((5, 7, 6), (1.3, 0.9, 1.1), (0.6, 0.6, 0.6))
    np.testing.assert_allclose(out.data, 3.25, atol=1e-6)


def test_labels_use_nearest_neighbour():
    labels = np.zeros((6, 6, 6), dtype=np.int32)
    labels[2:4] = 3
    lv = LabelVolume(labels, spacing=(1.0, 1.0, 1.0), label_names={3: "shaft"})
    out = resample_volume(lv, (0.5, 0.5, 0.5))
    assert isinstance(out, LabelVolume)
    assert set(np.unique(out.labels)) == {0, 3}
    assert out.label_names == {3: "shaft"}


def test_zscore_rejects_constant_volume():
    with pytest.raises(AFPError) as exc:
        zscore_normalize_mr(Volume(np.ones((4, 4, 4))))
    assert exc.value.code == ErrorCode.CONSTANT_VOLUME


def test_normalize_ct_uses_clipped_foreground():
    rng = np.random.default_rng(0)
    data = rng.normal(40.0, 10.0, (16, 16, 16)).astype(np.float32)
    mask = np.zeros(data.shape, dtype=bool)
    mask[4:12, 4:12, 4:12] = True
    out, stats = normalize_ct(Volume(data), mask)
    fg = out.data[mask].astype(np.float64)
    assert abs(fg.mean()) < 1e-5
    assert abs(fg.std() - 1.0) < 1e-5
    assert stats.clip_low < stats.clip_high
    restored = denormalize(out, stats)
    np.testing.assert_allclose(restored.data, np.clip(data, stats.clip_low, stats.clip_high), rtol=1e-5, atol=1e-3)


def test_normalize_ct_empty_foreground():
    with pytest.raises(AFPError) as exc:
        normalize_ct(Volume(np.zeros((4, 4, 4))), np.zeros((4, 4, 4), dtype=bool))
    assert exc.value.code == ErrorCode.EMPTY_FOREGROUND


def test_intensity_stats_round_trip():
    stats = IntensityStats(1.5, 2.0, -1.0, 3.0)
    assert IntensityStats.from_dict(stats.to_dict()) == stats


def test_preprocess_pair(phantom_pair):
    cfg = PreprocessConfig(target_spacing=(2.0, 2.0, 2.0))
    out, stats = preprocess_pair(phantom_pair, cfg)
    assert out.source.shape == (16, 16, 16)
    assert out.source.spacing == (2.0, 2.0, 2.0)
    assert out.labels.shape == out.target.shape
    assert out.source.modality == Modality.MR and out.target.modality == Modality.CT
    assert abs(float(out.source.data.mean())) < 1e-4
    assert set(stats) == {"source", "target"}
    assert stats["target"].clip_low is not None


def test_preprocess_config_validation():
    with pytest.raises(AFPError) as exc:
        PreprocessConfig(ct_clip_percentiles=(90.0, 10.0))
    assert exc.value.code == ErrorCode.CONFIG_INVALID
