import numpy as np

from src.dataset import write_manifest
from src.viewer import LABELS_PANEL, SYNTH_PANEL, find_synthetic, slice_panels
from src.volume_io import Volume, save_volume


def test_panels_for_a_labelled_phantom(phantom_pair):
    panels = slice_panels(phantom_pair, axis=0, index=16)
    assert list(panels) == ["MR", "CT", LABELS_PANEL]
    for image in panels.values():
        assert image.shape == (32, 32)
        assert 0.0 <= image.min() and image.max() <= 1.0
    labels_plane = phantom_pair.labels.labels[16]
    np.testing.assert_allclose(panels[LABELS_PANEL], labels_plane / max(phantom_pair.labels.labels.max(), 1))


def test_panels_along_other_axes(phantom_pair):
    synthetic = phantom_pair.target.data.copy()
    panels = slice_panels(phantom_pair, axis=2, index=0, synthetic=synthetic)
    assert list(panels) == ["MR", "CT", SYNTH_PANEL, LABELS_PANEL]
    np.testing.assert_array_equal(panels[SYNTH_PANEL], panels["CT"])


def test_find_synthetic(tmp_path):
    volume = Volume(np.full((4, 4, 4), 2.0))
    save_volume(volume, tmp_path / "case_000")
    write_manifest({"cases": [{"case_id": "case_000", "file": "case_000", "checkerboard_energy": 0.125}]}, tmp_path)

    data, energy = find_synthetic(tmp_path, "case_000")
    assert energy == 0.125 and data.shape == (4, 4, 4)
    assert find_synthetic(tmp_path, "case_999") == (None, None)
    assert find_synthetic(tmp_path / "missing", "case_000") == (None, None)
    assert find_synthetic(None, "case_000") == (None, None)
