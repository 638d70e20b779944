"""
Fixtures compartidas: phantoms pequeños y redes diminutas para CPU
"""

import numpy as np
import pytest

from src.phantom import PhantomSpec, generate_phantom
from src.seg_net import UNetConfig, build_segmenter, freeze
from src.synth_net import TranslatorConfig, build_translator
from src.volume_io import LabelVolume, Volume, VolumePair


@pytest.fixture
def small_spec():
    return PhantomSpec(size=(32, 32, 32), seed=3, tree_depth=2, n_blobs=1, n_shafts=1)


@pytest.fixture
def phantom_pair(small_spec):
    return generate_phantom(small_spec, "case_000")


@pytest.fixture
def phantom_pairs(small_spec):
    pairs = []
    for i in range(3):
        spec = PhantomSpec.from_dict({**small_spec.to_dict(), "seed": 100 + i})
        pairs.append(generate_phantom(spec, f"case_{i:03d}"))
    return pairs


@pytest.fixture
def tiny_segmenter():
    return build_segmenter(UNetConfig(base_channels=4, depth=2, out_labels=4), seed=0)


@pytest.fixture
def frozen_segmenter(tiny_segmenter):
    return freeze(tiny_segmenter)


@pytest.fixture
def tiny_translator():
    return build_translator(TranslatorConfig(base_channels=4, depth=2), seed=0)


def cube_labels(shape=(16, 16, 16), start=(4, 4, 4), side=4, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    labels = np.zeros(shape, dtype=np.int32)
    z, y, x = start
    labels[z:z + side, y:y + side, x:x + side] = 1
    return LabelVolume(labels, spacing, label_names={1: "cube"})


def random_volume(shape=(16, 16, 16), seed=0, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.random.default_rng(seed).standard_normal(shape).astype(np.float32), spacing)


def random_pair(shape=(16, 16, 16), seed=0, case_id="r0") -> VolumePair:
    rng = np.random.default_rng(seed)
    labels = np.zeros(shape, dtype=np.int32)
    labels[4:10, 4:10, 4:10] = 1
    source = rng.standard_normal(shape).astype(np.float32)
    target = (0.5 * source + labels).astype(np.float32)
    return VolumePair(Volume(source), Volume(target), LabelVolume(labels, label_names={1: "tube"}), case_id)
