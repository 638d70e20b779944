import json

import numpy as np
import pytest
import torch
from scipy import ndimage

from src.errors import AFPError, ErrorCode
from src.metrics import (LabelScores, MetricsReport, aggregate_reports, dice, evaluate_cases, mae, nsd,
                         resolve_tolerance, robust_range, silver_standard_eval, ssim3d, surface_distances,
                         surface_mask, write_reports)
from src.phantom import BLOB, LABEL_NAMES, TUBE, PhantomSpec, generate_phantom
from src.preprocess import IntensityStats
from src.volume_io import LabelVolume, Volume
from tests.conftest import cube_labels, random_volume


def _brute_force_surface_distances(from_surface, to_surface, spacing):
    targets = np.argwhere(to_surface) * np.asarray(spacing)
    return np.array([np.sqrt(((targets - p * np.asarray(spacing)) ** 2).sum(axis=1)).min()
                     for p in np.argwhere(from_surface)])


def _ssim_reference(a, b, data_range, window=7):
    # media uniforme, covarianza muestral y recorte del borde
    a, b = a.astype(np.float64), b.astype(np.float64)
    filt = lambda v: ndimage.uniform_filter(v, size=window)
    n = window ** 3
    cov_norm = n / (n - 1)
    ux, uy = filt(a), filt(b)
    vx = cov_norm * (filt(a * a) - ux * ux)
    vy = cov_norm * (filt(b * b) - uy * uy)
    vxy = cov_norm * (filt(a * b) - ux * uy)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    pad = (window - 1) // 2
    return s[pad:-pad, pad:-pad, pad:-pad].mean()


def test_mae_global_and_masked():
    a = Volume(np.zeros((4, 4, 4)))
    data = np.zeros((4, 4, 4))
    data[0] = 2.0
    b = Volume(data)
    assert mae(a, b) == pytest.approx(0.5)
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[0] = True
    assert mae(a, b, mask) == pytest.approx(2.0)
    with pytest.raises(AFPError) as exc:
        mae(a, b, np.zeros((4, 4, 4), dtype=bool))
    assert exc.value.code == ErrorCode.EMPTY_FOREGROUND


def test_metrics_require_alignment():
    with pytest.raises(AFPError) as exc:
        mae(random_volume((4, 4, 4)), random_volume((4, 4, 5)))
    assert exc.value.code == ErrorCode.MISALIGNED


def test_ssim_identity_and_reference():
    a = random_volume((16, 16, 16), seed=1)
    noisy = Volume(a.data + 0.3 * random_volume((16, 16, 16), seed=2).data)
    assert ssim3d(a, a) == pytest.approx(1.0)
    expected = _ssim_reference(a.data, noisy.data, robust_range(a))
    assert ssim3d(a, noisy) == pytest.approx(expected, rel=1e-6)
    assert ssim3d(a, noisy) < 1.0


def test_ssim_window_validation():
    a = random_volume((6, 6, 6))
    with pytest.raises(AFPError):
        ssim3d(a, a, window=4)
    with pytest.raises(AFPError):
        ssim3d(a, a, window=7)


def test_robust_range_of_constant_volume():
    assert robust_range(Volume(np.full((4, 4, 4), 3.0))) == 1.0


def test_dice_of_shifted_cubes():
    a = cube_labels(start=(4, 4, 4))
    b = cube_labels(start=(6, 4, 4))
    assert dice(a, b, 1) == pytest.approx(0.5)
    assert dice(a, a, 1) == 1.0
    empty = a.with_labels(np.zeros(a.shape, dtype=np.int32))
    assert dice(empty, empty, 1) == 1.0
    assert dice(a, empty, 1) == 0.0


def test_surface_mask_of_cube():
    surface = surface_mask(cube_labels().mask(1))
    assert int(surface.sum()) == 4 ** 3 - 2 ** 3


def test_surface_touching_the_border_counts():
    mask = np.ones((3, 3, 3), dtype=bool)
    assert surface_mask(mask).sum() == 26


def test_surface_distances_match_brute_force():
    spacing = (2.0, 1.0, 0.5)
    a = surface_mask(cube_labels(start=(3, 3, 3)).mask(1))
    b = surface_mask(cube_labels(start=(5, 4, 6), side=5).mask(1))
    fast = surface_distances(a, b, spacing)
    np.testing.assert_allclose(np.sort(fast), np.sort(_brute_force_surface_distances(a, b, spacing)), atol=1e-9)


def test_nsd_of_shifted_cubes():
    a = cube_labels(start=(4, 4, 4))
    b = cube_labels(start=(6, 4, 4))
    assert nsd(a, b, 1, 2.0) == pytest.approx(1.0)
    # 24 de los 56 vóxeles de superficie de cada cubo coinciden con la superficie del otro
    assert nsd(a, b, 1, 0.5) == pytest.approx(48 / 112)
    assert nsd(a, a, 1, 0.0) == 1.0


def test_nsd_empty_conventions():
    a = cube_labels()
    empty = a.with_labels(np.zeros(a.shape, dtype=np.int32))
    assert nsd(empty, empty, 1, 1.0) == 1.0
    assert nsd(a, empty, 1, 1.0) == 0.0
    with pytest.raises(AFPError):
        nsd(a, a, 1, -1.0)


def test_tolerance_resolution():
    assert resolve_tolerance((1.0, 1.0, 1.0), 3.0, "lung") == 3.0
    assert resolve_tolerance((1.0, 1.0, 1.0), None, "lung") == 1.2
    assert resolve_tolerance((1.0, 1.0, 1.0), None, "pelvis") == 2.0
    assert resolve_tolerance((0.5, 0.6, 0.8)) == pytest.approx(1.6)
    with pytest.raises(AFPError) as exc:
        resolve_tolerance((1.0, 1.0, 1.0), None, "brain")
    assert exc.value.code == ErrorCode.CONFIG_INVALID


def test_report_rejects_nonfinite_values():
    with pytest.raises(AFPError) as exc:
        MetricsReport("c", float("nan"), 1.0, {}, 1.0)
    assert exc.value.code == ErrorCode.DEGENERATE_OUTPUT


def test_silver_standard_of_identical_volumes(frozen_segmenter):
    real = random_volume((16, 16, 16), seed=3)
    report = silver_standard_eval(real, real, frozen_segmenter, patch_size=(8, 8, 8),
                                  label_names={1: "tube"}, case_id="c0",
                                  stats=IntensityStats(mean=0.0, std=100.0))
    assert report.mae == 0.0 and report.mae_denormalized == 0.0
    assert report.ssim == pytest.approx(1.0)
    assert set(report.per_label) == {"tube", "label_2", "label_3"}
    assert all(s.dice == 1.0 and s.nsd == 1.0 for s in report.per_label.values())
    assert report.tolerance_mm == 2.0


def test_mae_denormalized_scales_with_std(frozen_segmenter):
    real = random_volume((16, 16, 16), seed=3)
    synth = Volume(real.data + 0.5)
    report = silver_standard_eval(real, synth, frozen_segmenter, labels=[1], stats=IntensityStats(0.0, 300.0))
    assert report.mae == pytest.approx(0.5, rel=1e-5)
    assert report.mae_denormalized == pytest.approx(150.0, rel=1e-5)


def test_evaluate_cases_reports_missing_ids(frozen_segmenter):
    v = random_volume((8, 8, 8))
    with pytest.raises(AFPError) as exc:
        evaluate_cases({"a": v, "b": v}, {"a": v, "c": v}, frozen_segmenter)
    assert exc.value.code == ErrorCode.CASE_MISMATCH
    assert "'b'" in str(exc.value) and "'c'" in str(exc.value)


def test_evaluate_cases_parallel_matches_serial(frozen_segmenter):
    real = {f"c{i}": random_volume((8, 8, 8), seed=i) for i in range(3)}
    synth = {k: Volume(v.data * 0.9) for k, v in real.items()}
    serial = evaluate_cases(real, synth, frozen_segmenter, workers=1, labels=[1])
    parallel = evaluate_cases(real, synth, frozen_segmenter, workers=3, labels=[1])
    assert [r.case_id for r in serial] == ["c0", "c1", "c2"]
    assert [r.to_row() for r in serial] == [r.to_row() for r in parallel]


def test_aggregate_uses_population_std(tmp_path):
    reports = [
        MetricsReport("a", 1.0, 0.8, {"tube": LabelScores(0.5, 0.6)}, 2.0),
        MetricsReport("b", 3.0, 0.6, {"tube": LabelScores(0.7, 0.8)}, 2.0),
    ]
    agg = aggregate_reports(reports)
    assert agg["mae"] == {"mean": 2.0, "std": 1.0}
    assert agg["per_label"]["tube"]["dice"]["mean"] == pytest.approx(0.6)
    paths = write_reports(reports, tmp_path, {"seed": 0})
    assert json.loads(paths["aggregate"].read_text())["seed"] == 0
    assert paths["per_case"].read_text().splitlines()[0] == "case_id,mae,ssim,dice_tube,nsd_tube,tolerance_mm"
    assert aggregate_reports([]) == {"n_cases": 0, "per_label": {}}


def _brute_force_surface(mask):
    surface = np.zeros_like(mask)
    for voxel in map(tuple, np.argwhere(mask)):
        for axis in range(3):
            for step in (-1, 1):
                neighbour = list(voxel)
                neighbour[axis] += step
                outside = not 0 <= neighbour[axis] < mask.shape[axis]
                if outside or not mask[tuple(neighbour)]:
                    surface[voxel] = True
    return surface


def _brute_force_scores(a, b, spacing, tau):
    set_a, set_b = set(map(tuple, np.argwhere(a))), set(map(tuple, np.argwhere(b)))
    dice_value = 1.0 if not set_a and not set_b else 2 * len(set_a & set_b) / (len(set_a) + len(set_b))
    surf_a, surf_b = _brute_force_surface(a), _brute_force_surface(b)
    n_a, n_b = int(surf_a.sum()), int(surf_b.sum())
    if n_a == 0 and n_b == 0:
        return dice_value, 1.0
    if n_a == 0 or n_b == 0:
        return dice_value, 0.0
    close = (_brute_force_surface_distances(surf_a, surf_b, spacing) <= tau).sum() \
        + (_brute_force_surface_distances(surf_b, surf_a, spacing) <= tau).sum()
    return dice_value, close / (n_a + n_b)


def _random_mask_pair(rng, shape=(10, 10, 10)):
    smooth = lambda: ndimage.gaussian_filter(rng.standard_normal(shape), 1.5)
    level = rng.uniform(-0.05, 0.1)
    a = (smooth() > level).astype(np.int32)
    b = (smooth() > level).astype(np.int32)
    if rng.random() < 0.1:
        b[:] = 0
    spacing = tuple(float(s) for s in rng.uniform(0.5, 2.0, size=3))
    return LabelVolume(a, spacing), LabelVolume(b, spacing)


def test_dice_and_nsd_match_brute_force_on_random_masks():
    rng = np.random.default_rng(21)
    for _ in range(50):
        a, b = _random_mask_pair(rng)
        tau = float(rng.uniform(0.0, 3.0))
        expected_dice, expected_nsd = _brute_force_scores(a.mask(1), b.mask(1), a.spacing, tau)
        assert dice(a, b, 1) == pytest.approx(expected_dice, abs=1e-12)
        assert nsd(a, b, 1, tau) == pytest.approx(expected_nsd, abs=1e-12)


def test_dice_and_nsd_are_symmetric_and_nsd_grows_with_tolerance():
    rng = np.random.default_rng(22)
    taus = [0.0, 0.5, 1.0, 1.7, 2.5, 4.0, 10.0]
    for _ in range(20):
        a, b = _random_mask_pair(rng)
        assert dice(a, b, 1) == dice(b, a, 1)
        values = [nsd(a, b, 1, tau) for tau in taus]
        assert values == [nsd(b, a, 1, tau) for tau in taus]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert all(later >= earlier for earlier, later in zip(values, values[1:]))


def test_ssim_stays_in_range_and_detects_inversion():
    rng = np.random.default_rng(23)
    for seed in range(10):
        a = random_volume((12, 12, 12), seed=seed)
        b = Volume(rng.uniform(-5.0, 5.0) * a.data + rng.standard_normal(a.shape).astype(np.float32))
        assert -1.0 <= ssim3d(a, b) <= 1.0
    # Damero de media local casi nula: la inversión solo cambia el signo de la covarianza
    checker = Volume(np.where(np.indices((12, 12, 12)).sum(axis=0) % 2 == 0, 1.0, -1.0))
    assert ssim3d(checker, Volume(-checker.data)) < 0.0


def test_report_rejects_out_of_range_values():
    for args in [("c", 0.1, 1.5, {}, 2.0), ("c", -0.1, 0.5, {}, 2.0),
                 ("c", 0.1, 0.5, {"tube": LabelScores(1.2, 0.5)}, 2.0),
                 ("c", 0.1, 0.5, {"tube": LabelScores(0.5, -0.1)}, 2.0),
                 ("c", 0.1, 0.5, {}, -1.0)]:
        with pytest.raises(AFPError) as exc:
            MetricsReport(*args)
        assert exc.value.code == ErrorCode.METRIC_OUT_OF_RANGE
    MetricsReport("c", 0.0, -1.0, {"tube": LabelScores(0.0, 1.0)}, 0.0)


class IntensitySegmenter(torch.nn.Module):
    """Clasifica cada vóxel por la intensidad CT media más cercana de cada clase."""

    def __init__(self, means):
        super().__init__()
        self.register_buffer("means", torch.tensor(means, dtype=torch.float32).view(1, -1, 1, 1, 1))
        self.out_channels = len(means)

    def forward(self, x):
        return -(x - self.means) ** 2


def test_blurring_hurts_thin_tubes_more_than_blobs():
    spec = PhantomSpec(size=(64, 64, 64), seed=5, tree_depth=2, n_blobs=2, n_shafts=0, noise_sigma_ct=0.0)
    pair = generate_phantom(spec, "blur")
    means = [spec.intensity_table[name][1] for name in ("background", "tube", "blob", "shaft")]
    segmenter = IntensitySegmenter(means)

    sharp = silver_standard_eval(pair.target, pair.target, segmenter, labels=[TUBE, BLOB], label_names=LABEL_NAMES)
    assert sharp.per_label["tube"].dice == 1.0 and sharp.per_label["blob"].dice == 1.0

    blurred = Volume(ndimage.gaussian_filter(pair.target.data, 1.0), pair.target.spacing, pair.target.origin)
    report = silver_standard_eval(pair.target, blurred, segmenter, labels=[TUBE, BLOB], label_names=LABEL_NAMES)
    assert report.per_label["tube"].dice < report.per_label["blob"].dice
    assert report.per_label["tube"].dice < 0.9
