import numpy as np
import pytest

from src.errors import AFPError, ErrorCode
from src.phantom import (BLOB, SHAFT, TUBE, PhantomSpec, case_seed, connected_components, generate_dataset,
                         generate_phantom, generate_tube_tree, split_dataset)


def test_same_seed_same_phantom(small_spec):
    a = generate_phantom(small_spec, "a")
    b = generate_phantom(small_spec, "a")
    assert a.source.data.tobytes() == b.source.data.tobytes()
    assert a.target.data.tobytes() == b.target.data.tobytes()
    np.testing.assert_array_equal(a.labels.labels, b.labels.labels)


def test_different_seed_differs(small_spec):
    other = PhantomSpec.from_dict({**small_spec.to_dict(), "seed": small_spec.seed + 1})
    a = generate_phantom(small_spec)
    b = generate_phantom(other)
    assert not np.array_equal(a.labels.labels, b.labels.labels)


def test_labels_and_geometry(phantom_pair, small_spec):
    labels = phantom_pair.labels
    assert labels.shape == small_spec.size
    assert set(np.unique(labels.labels)) <= {0, TUBE, BLOB, SHAFT}
    assert labels.mask(TUBE).any()
    assert labels.label_names[TUBE] == "tube"
    assert phantom_pair.source.spacing == small_spec.spacing


def test_tube_tree_is_one_component(small_spec):
    for seed in range(4):
        spec = PhantomSpec.from_dict({**small_spec.to_dict(), "seed": seed, "tree_depth": 3})
        pair = generate_phantom(spec)
        assert connected_components(pair.labels.mask(TUBE)) == 1


def test_tree_radii_shrink(small_spec):
    segments = generate_tube_tree(PhantomSpec.from_dict({**small_spec.to_dict(), "tree_depth": 3}))
    assert segments[0].generation == 1
    by_generation = {}
    for s in segments:
        by_generation.setdefault(s.generation, []).append(s.radius)
    gens = sorted(by_generation)
    for g0, g1 in zip(gens, gens[1:]):
        assert max(by_generation[g1]) <= min(by_generation[g0])


def test_tube_contrast_is_high_in_ct_low_in_mr(phantom_pair):
    tube = phantom_pair.labels.mask(TUBE)
    background = phantom_pair.labels.labels == 0
    ct_gap = phantom_pair.target.data[tube].mean() - phantom_pair.target.data[background].mean()
    mr_gap = phantom_pair.source.data[tube].mean() - phantom_pair.source.data[background].mean()
    assert ct_gap > 5 * abs(mr_gap)


def test_invalid_spec():
    with pytest.raises(AFPError) as exc:
        PhantomSpec(size=(8, 8, 8), tube_radius_range=(3.0, 1.0))
    assert exc.value.code == ErrorCode.SPEC_INVALID
    assert "size" in str(exc.value) and "tube_radius_range" in str(exc.value)


def test_dataset_workers_do_not_change_result(small_spec):
    serial = generate_dataset(small_spec, 3, workers=1)
    parallel = generate_dataset(small_spec, 3, workers=3)
    assert [p.case_id for p in serial] == ["case_000", "case_001", "case_002"]
    for a, b in zip(serial, parallel):
        assert a.target.data.tobytes() == b.target.data.tobytes()


def test_case_seeds_are_distinct():
    assert len({case_seed(0, i) for i in range(50)}) == 50


def test_split_is_disjoint_and_deterministic():
    ids = [f"c{i}" for i in range(10)]
    train, val, test = split_dataset(ids, (0.8, 0.1, 0.1), seed=5)
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    assert sorted(train + val + test) == sorted(ids)
    assert split_dataset(ids, (0.8, 0.1, 0.1), seed=5) == (train, val, test)


def test_split_rejects_bad_fractions():
    with pytest.raises(AFPError) as exc:
        split_dataset(["a", "b"], (0.5, 0.6, 0.1))
    assert exc.value.code == ErrorCode.BAD_FRACTIONS
