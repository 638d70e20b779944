import numpy as np
import pytest
import torch

import config
from src.errors import AFPError, ErrorCode
from src.seg_net import FeatureTapConfig
from src.synth_net import (PatchDiscriminator3d, StagePlan, TrainMode, TrainPlan, TranslatorConfig,
                           build_translator, checkerboard_energy, decoder_parameter_difference,
                           parameter_report, plan_for_mode, restore_translator, synthesize_volume,
                           train_translation, write_loss_log)
from src.losses import LossConfig
from src.unet import DecoderMode
from src.volume_io import Modality, Volume
from tests.conftest import random_pair, random_volume


def tiny_plan(mode, epochs=1, **options):
    options = {"patch_size": (8, 8, 8), "batch_size": 2, "patches_per_case": 2, "seed": 3, **options}
    return plan_for_mode(mode, epochs, **options)


def test_translator_shape_and_decoder_modes():
    for mode in DecoderMode:
        model = build_translator(TranslatorConfig(base_channels=4, depth=3, decoder_mode=mode))
        assert model(torch.zeros(1, 1, 16, 16, 16)).shape == (1, 1, 16, 16, 16)


def test_translator_needs_single_output():
    with pytest.raises(AFPError) as exc:
        TranslatorConfig(out_channels=2)
    assert exc.value.code == ErrorCode.CONFIG_INVALID


def test_decoder_parameter_difference():
    cfg = TranslatorConfig(base_channels=8, depth=3)
    assert decoder_parameter_difference(cfg) == 16 * 8 * 19 + 32 * 16 * 19
    counts = parameter_report(cfg)
    assert counts["UPSAMPLE_CONV"] - counts["TRANSPOSED"] == decoder_parameter_difference(cfg)


def test_discriminator_levels():
    disc = PatchDiscriminator3d(in_channels=2, base_channels=4)
    scores, features = disc(torch.zeros(1, 2, 32, 32, 32))
    assert [f.shape[-1] for f in features] == [16, 8, 4, 4]
    assert scores.shape == (1, 1, 4, 4, 4)


def test_plans_per_mode():
    two_stage = plan_for_mode(TrainMode.L1_THEN_AFP, 3, 5)
    assert [name for name, _ in two_stage.stages] == ["stage1", "stage2"]
    assert two_stage.stage1.lr == config.STAGE1_LR and two_stage.stage2.lr == config.STAGE2_LR
    assert two_stage.stage1.epochs == 3 and two_stage.stage2.epochs == 5
    assert two_stage.stage2.loss.w_l1 == 0.0 and two_stage.stage2.loss.w_afp == 1.0
    assert two_stage.betas == (0.0, 0.999)

    single = plan_for_mode(TrainMode.L1, 4)
    assert [name for name, _ in single.stages] == ["stage2"]
    assert not single.needs_extractor

    gan = plan_for_mode(TrainMode.GAN_AFP, 1)
    assert gan.needs_discriminator and gan.needs_extractor
    assert gan.stage2.loss.weights() == {"l1": 1.0, "afp": 1.0, "adv": 1.0, "fm": 1.0}
    assert TrainPlan.from_dict(two_stage.to_dict()).to_dict() == two_stage.to_dict()


def test_afp_plan_without_extractor_is_a_conflict(tiny_translator):
    with pytest.raises(AFPError) as exc:
        train_translation(tiny_translator, [random_pair()], tiny_plan(TrainMode.AFP))
    assert exc.value.code == ErrorCode.CONFIG_CONFLICT
    assert exc.value.is_config_error


def test_afp_plan_needs_frozen_extractor(tiny_translator, tiny_segmenter):
    with pytest.raises(AFPError) as exc:
        train_translation(tiny_translator, [random_pair()], tiny_plan(TrainMode.AFP), extractor=tiny_segmenter)
    assert exc.value.code == ErrorCode.EXTRACTOR_NOT_FROZEN


def test_patch_size_must_fit_network(tiny_translator):
    with pytest.raises(AFPError) as exc:
        train_translation(tiny_translator, [random_pair()], tiny_plan(TrainMode.L1, patch_size=(7, 8, 8)))
    assert exc.value.code == ErrorCode.CONFIG_INVALID


def test_l1_training_is_deterministic(tmp_path):
    pairs = [random_pair(seed=0, case_id="a"), random_pair(seed=1, case_id="b")]
    cfg = TranslatorConfig(base_channels=4, depth=2)
    a = train_translation(build_translator(cfg, seed=0), pairs, tiny_plan(TrainMode.L1, epochs=2))
    b = train_translation(build_translator(cfg, seed=0), pairs, tiny_plan(TrainMode.L1, epochs=2))
    assert all(torch.equal(a.state_dict[k], b.state_dict[k]) for k in a.state_dict)
    assert [row["epoch"] for row in a.history] == [1, 2]
    assert a.history[0]["w_l1"] == 1.0 and a.history[0]["w_afp"] == 0.0
    log = write_loss_log(a.history, tmp_path / "loss.csv")
    assert log.read_text().splitlines()[0].startswith("stage,epoch,stage_epoch")


def test_two_stage_training_reports_each_stage(frozen_segmenter):
    pairs = [random_pair(seed=0, case_id="a")]
    seen = {}
    plan = tiny_plan(TrainMode.L1_THEN_AFP, epochs=1, stage2_epochs=2)
    ckpt = train_translation(build_translator(TranslatorConfig(base_channels=4, depth=2)), pairs, plan,
                             extractor=frozen_segmenter, taps=FeatureTapConfig(),
                             val_dataset=[random_pair(seed=5, case_id="v")],
                             on_stage_end=lambda name, best: seen.setdefault(name, best))
    assert list(seen) == ["stage1", "stage2"]
    assert seen["stage1"].fingerprint.epoch == 1
    assert ckpt.fingerprint.epoch in (2, 3)
    assert [row["stage"] for row in ckpt.history] == ["stage1", "stage2", "stage2"]
    assert all("val_loss" in row for row in ckpt.history)
    assert ckpt.history[1]["w_l1"] == 0.0 and ckpt.history[1]["afp"] > 0.0


def test_gan_mode_trains_discriminator(frozen_segmenter):
    plan = tiny_plan(TrainMode.GAN_AFP, epochs=1, patch_size=(16, 16, 16), disc_base_channels=4)
    ckpt = train_translation(build_translator(TranslatorConfig(base_channels=4, depth=2)), [random_pair()], plan,
                             extractor=frozen_segmenter)
    row = ckpt.history[0]
    assert {"adv", "fm", "disc"} <= set(row)
    assert np.isfinite(row["total"])


def test_divergence_is_reported(tiny_translator):
    plan = TrainPlan(stage2=StagePlan(LossConfig(w_l1=1.0), 1, lr=1e30), patch_size=(8, 8, 8),
                     batch_size=1, patches_per_case=4)
    with pytest.raises(AFPError) as exc:
        train_translation(tiny_translator, [random_pair()], plan)
    assert exc.value.code == ErrorCode.DIVERGENCE


def test_synthesis_keeps_geometry(tiny_translator):
    v = Volume(random_volume((20, 16, 16)).data, spacing=(0.5, 0.6, 0.7), origin=(1, 2, 3))
    out = synthesize_volume(tiny_translator, v, (8, 8, 8), 0.5, "median")
    assert out.shape == v.shape and out.spacing == v.spacing and out.origin == v.origin
    assert out.modality == Modality.SYNTH_CT
    assert tiny_translator.training


def test_synthesis_rejects_unknown_blend(tiny_translator):
    with pytest.raises(AFPError) as exc:
        synthesize_volume(tiny_translator, random_volume(), (8, 8, 8), 0.5, "max")
    assert exc.value.code == ErrorCode.CONFIG_INVALID


def test_restore_translator_round_trip(tiny_translator):
    from src.checkpoint import ModelCheckpoint, TrainingFingerprint, snapshot
    from src.synth_net import translator_config

    ckpt = ModelCheckpoint("translator", snapshot(tiny_translator), translator_config(tiny_translator).to_dict(),
                           TrainingFingerprint("", 0, 0))
    restored = restore_translator(ckpt)
    x = torch.rand(1, 1, 8, 8, 8)
    tiny_translator.eval()
    with torch.no_grad():
        assert torch.equal(restored(x), tiny_translator(x))


def test_checkerboard_energy():
    z, y, x = np.indices((16, 16, 16))
    assert checkerboard_energy(np.full((8, 8, 8), 4.0)) == 0.0
    assert checkerboard_energy((-1.0) ** (z + y + x)) == pytest.approx(1.0)
    smooth = np.sin(2 * np.pi * z / 16.0)
    assert checkerboard_energy(smooth) < 1e-12
    mixed = smooth + (-1.0) ** x
    assert checkerboard_energy(mixed) == pytest.approx(1.0 / 1.5, rel=1e-9)
