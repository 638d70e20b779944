import json

import pytest

from src.dataset import MANIFEST, load_dataset, load_manifest, load_stats, write_dataset
from src.errors import AFPError, ErrorCode
from src.preprocess import IntensityStats


def test_write_and_load_dataset(tmp_path, phantom_pairs):
    splits = {"train": ["case_000", "case_001"], "val": ["case_002"], "test": []}
    stats = IntensityStats(0.1, 2.0, -1.0, 3.0)
    info = {"case_001": {"stats": {"target": stats.to_dict()}}}
    written = write_dataset(phantom_pairs, tmp_path, splits, {"config_hash": "abc", "seed": 3}, info)
    assert written[-1] == tmp_path / MANIFEST

    manifest = load_manifest(tmp_path)
    assert manifest["n_cases"] == 3 and manifest["config_hash"] == "abc"
    assert manifest["cases"][0]["files"]["mr"] == "cases/case_000/mr"

    train = load_dataset(tmp_path, "train")
    assert [p.case_id for p in train] == ["case_000", "case_001"]
    assert train[0].target.data.tobytes() == phantom_pairs[0].target.data.tobytes()
    assert train[0].labels.label_names == phantom_pairs[0].labels.label_names
    assert [p.case_id for p in load_dataset(tmp_path, "val")] == ["case_002"]
    assert load_dataset(tmp_path, "test") == []
    assert load_stats(tmp_path) == {"case_001": stats}

    sidecar = json.loads((tmp_path / "cases" / "case_000" / "ct.json").read_text())
    assert sidecar["seed"] == 3


def test_missing_manifest(tmp_path):
    with pytest.raises(AFPError) as exc:
        load_dataset(tmp_path)
    assert exc.value.code == ErrorCode.DATASET_MISSING
