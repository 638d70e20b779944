"""
Traductor MR -> CT (U-Net 3D con salida lineal), discriminador de parches
opcional y entrenamiento en dos etapas (L1 global y refinamiento AFP).
"""

import logging
import os
import sys
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

# Agregar el directorio padre al path para importar config
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import config

from src.checkpoint import ModelCheckpoint, TrainingFingerprint, dataset_hash, load_weights, snapshot
from src.errors import AFPError, ErrorCode
from src.losses import (COMPONENTS, FeatureExtractor, LossConfig, afp_loss, compose, feature_matching_loss,
                        hinge_adv_losses, l1_loss)
from src.patch_engine import BLENDERS, PatchPair, sample_training_patches, tile_volume
from src.seg_net import FeatureTapConfig, as_batch, seed_for
from src.unet import DecoderMode, Norm, UNet3d, build_unet, count_parameters, level_channels
from src.volume_io import Modality, Volume, VolumePair

logger = logging.getLogger(__name__)


@dataclass
class TranslatorConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    channel_growth: float = 2.0
    norm: Norm = Norm.INSTANCE
    activation: str = "RELU"
    out_channels: int = 1
    decoder_mode: DecoderMode = DecoderMode.TRANSPOSED

    def __post_init__(self):
        self.norm = Norm(self.norm)
        self.decoder_mode = DecoderMode(self.decoder_mode)
        problems = []
        if self.out_channels != 1:
            problems.append(f"out_channels debe ser 1, recibido {self.out_channels}")
        if self.depth < 2:
            problems.append(f"depth debe ser >= 2, recibido {self.depth}")
        if self.base_channels < 4:
            problems.append(f"base_channels debe ser >= 4, recibido {self.base_channels}")
        if self.activation != "RELU":
            problems.append(f"Solo se admite activación RELU, recibido {self.activation}")
        if problems:
            raise AFPError(ErrorCode.CONFIG_INVALID, "TranslatorConfig inválido:\n  - " + "\n  - ".join(problems))

    @classmethod
    def from_dict(cls, data: Dict) -> "TranslatorConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["norm"] = self.norm.value
        out["decoder_mode"] = self.decoder_mode.value
        return out


def build_translator(cfg: TranslatorConfig, seed: Optional[int] = 0) -> UNet3d:
    """Traductor (N, 1, D, H, W) -> (N, 1, D, H, W), sin activación final."""
    return build_unet(cfg.in_channels, cfg.out_channels, cfg.base_channels, cfg.depth,
                      cfg.channel_growth, cfg.norm, cfg.decoder_mode, seed)


def translator_config(model: UNet3d) -> TranslatorConfig:
    return TranslatorConfig(model.in_channels, model.base_channels, model.depth, model.channel_growth,
                            model.norm, "RELU", model.out_channels, model.decoder_mode)


def decoder_parameter_difference(cfg: TranslatorConfig) -> int:
    """
    Parámetros de más de UPSAMPLE_CONV (conv 3x3x3) frente a TRANSPOSED
    (conv transpuesta 2x2x2): 19 pesos por par de canales en cada nivel.
    """
    channels = level_channels(cfg.base_channels, cfg.depth, cfg.channel_growth)
    return sum(channels[level + 1] * channels[level] * (27 - 8) for level in range(cfg.depth - 1))


def restore_translator(ckpt: ModelCheckpoint) -> UNet3d:
    if ckpt.kind != "translator":
        raise AFPError(ErrorCode.CHECKPOINT_INCOMPATIBLE, f"Checkpoint de tipo {ckpt.kind!r}, se esperaba 'translator'")
    model = build_translator(TranslatorConfig.from_dict(ckpt.config), seed=None)
    return load_weights(model, ckpt)


# ---------------------------------------------------------------------------
# Discriminador
# ---------------------------------------------------------------------------

class PatchDiscriminator3d(nn.Module):
    """
    Discriminador de parches 3D condicional de 4 niveles. Recibe la
    concatenación (MR, CT) y devuelve un mapa de scores más las activaciones
    de cada nivel para el feature matching.
    """

    def __init__(self, in_channels: int = 2, base_channels: int = 8, n_levels: int = 4):
        super().__init__()
        self.levels = nn.ModuleList()
        c_prev = in_channels
        for level in range(n_levels):
            c = base_channels * min(2 ** level, 8)
            stride = 2 if level < n_levels - 1 else 1
            layers: List[nn.Module] = [nn.Conv3d(c_prev, c, kernel_size=3, stride=stride, padding=1)]
            if level > 0:
                layers.append(nn.InstanceNorm3d(c, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            self.levels.append(nn.Sequential(*layers))
            c_prev = c
        self.head = nn.Conv3d(c_prev, 1, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        features = []
        h = x
        for level in self.levels:
            h = level(h)
            features.append(h)
        return self.head(h), features


# ---------------------------------------------------------------------------
# Plan de entrenamiento
# ---------------------------------------------------------------------------

class TrainMode(str, Enum):
    L1 = "L1"
    AFP = "AFP"
    L1_PLUS_AFP = "L1_PLUS_AFP"
    L1_THEN_AFP = "L1_THEN_AFP"
    GAN_AFP = "GAN_AFP"


@dataclass
class StagePlan:
    loss: LossConfig
    epochs: int
    lr: float = config.STAGE1_LR

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.epochs < 0 or self.lr <= 0:
            raise AFPError(ErrorCode.CONFIG_INVALID, f"Etapa inválida: epochs={self.epochs}, lr={self.lr}")

    def to_dict(self) -> Dict:
        return {"loss": self.loss.to_dict(), "epochs": self.epochs, "lr": self.lr}


@dataclass
class TrainPlan:
    stage2: StagePlan
    stage1: Optional[StagePlan] = None
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    batch_size: int = 2
    patches_per_case: int = 4
    fg_bias: float = 0.5
    # Adam sin momento (beta1 = 0)
    betas: Tuple[float, float] = (0.0, 0.999)
    disc_lr: float = config.STAGE1_LR
    disc_base_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.stage2, dict):
            self.stage2 = StagePlan(**self.stage2)
        if isinstance(self.stage1, dict):
            self.stage1 = StagePlan(**self.stage1)
        if self.stage2 is None:
            raise AFPError(ErrorCode.CONFIG_INVALID, "El plan necesita stage2")
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1 or self.patches_per_case < 1:
            raise AFPError(ErrorCode.CONFIG_INVALID, "batch_size y patches_per_case deben ser >= 1")

    @property
    def stages(self) -> List[Tuple[str, StagePlan]]:
        out = [("stage1", self.stage1)] if self.stage1 is not None else []
        return out + [("stage2", self.stage2)]

    @property
    def needs_extractor(self) -> bool:
        return any(stage.loss.w_afp > 0 for _, stage in self.stages)

    @property
    def needs_discriminator(self) -> bool:
        return any(stage.loss.uses_discriminator for _, stage in self.stages)

    def check_patch_size(self, multiple: int) -> None:
        if any(p % multiple for p in self.patch_size):
            raise AFPError(
                ErrorCode.CONFIG_INVALID,
                f"patch_size {self.patch_size} debe ser divisible por {multiple}",
                suggestion="Usa parches múltiplos de 2^(depth-1) de las redes implicadas",
            )

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainPlan":
        return cls(**data)

    def to_dict(self) -> Dict:
        return {
            "stage1": self.stage1.to_dict() if self.stage1 is not None else None,
            "stage2": self.stage2.to_dict(),
            "patch_size": list(self.patch_size),
            "batch_size": self.batch_size,
            "patches_per_case": self.patches_per_case,
            "fg_bias": self.fg_bias,
            "betas": list(self.betas),
            "disc_lr": self.disc_lr,
            "disc_base_channels": self.disc_base_channels,
            "seed": self.seed,
        }


def plan_for_mode(mode: TrainMode, epochs: int, stage2_epochs: Optional[int] = None, **options) -> TrainPlan:
    """
    Plan de entrenamiento para cada modo del CLI. Los modos de una sola etapa
    entrenan desde cero con el learning rate de la etapa global; en L1_THEN_AFP
    el refinamiento AFP usa el learning rate reducido.
    """
    mode = TrainMode(mode)
    stage2_epochs = epochs if stage2_epochs is None else stage2_epochs
    if mode == TrainMode.L1:
        return TrainPlan(stage2=StagePlan(LossConfig(w_l1=1.0), epochs, config.STAGE1_LR), **options)
    if mode == TrainMode.AFP:
        return TrainPlan(stage2=StagePlan(LossConfig(w_l1=0.0, w_afp=1.0), epochs, config.STAGE1_LR), **options)
    if mode == TrainMode.L1_PLUS_AFP:
        return TrainPlan(stage2=StagePlan(LossConfig(w_l1=1.0, w_afp=1.0), epochs, config.STAGE1_LR), **options)
    if mode == TrainMode.L1_THEN_AFP:
        return TrainPlan(
            stage1=StagePlan(LossConfig(w_l1=1.0), epochs, config.STAGE1_LR),
            stage2=StagePlan(LossConfig(w_l1=0.0, w_afp=1.0), stage2_epochs, config.STAGE2_LR),
            **options,
        )
    gan = LossConfig(w_l1=1.0, w_afp=1.0, w_adv=1.0, w_fm=1.0)
    return TrainPlan(stage2=StagePlan(gan, epochs, config.STAGE1_LR), **options)


# ---------------------------------------------------------------------------
# Entrenamiento
# ---------------------------------------------------------------------------

def _to_tensor(patches: Sequence[PatchPair], attr: str, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(p, attr) for p in patches])[:, None]).to(dtype)


def _validation_patches(pairs: Sequence[VolumePair], plan: TrainPlan) -> List[PatchPair]:
    patches = []
    for i, pair in enumerate(pairs):
        patches += sample_training_patches(pair, plan.patch_size, plan.patches_per_case,
                                           seed_for(plan.seed, 7919, i), plan.fg_bias)
    return patches


def _validation_loss(model: UNet3d, patches: Sequence[PatchPair], loss_cfg: LossConfig,
                     extractor: Optional[FeatureExtractor], taps: FeatureTapConfig, batch_size: int) -> float:
    """Pérdida de validación: w_l1 * L1 + w_afp * AFP (sin términos adversariales)."""
    dtype = next(model.parameters()).dtype
    model.eval()
    total = 0.0
    with torch.no_grad():
        for b in range(0, len(patches), batch_size):
            batch = patches[b:b + batch_size]
            x, y = _to_tensor(batch, "source", dtype), _to_tensor(batch, "target", dtype)
            fake = model(x)
            value = loss_cfg.w_l1 * float(l1_loss(fake, y))
            if loss_cfg.w_afp > 0:
                value += loss_cfg.w_afp * float(afp_loss(fake, y, extractor, taps, loss_cfg))
            total += value * len(batch)
    model.train()
    return total / max(len(patches), 1)


def train_translation(model: UNet3d, dataset: Sequence[VolumePair], plan: TrainPlan,
                      extractor: Optional[FeatureExtractor] = None, taps: Optional[FeatureTapConfig] = None,
                      val_dataset: Optional[Sequence[VolumePair]] = None,
                      on_stage_end: Optional[Callable[[str, ModelCheckpoint], None]] = None) -> ModelCheckpoint:
    """
    Ejecuta stage1 (si existe) y stage2 con sus LossConfig. Cada etapa parte
    del mejor estado de la anterior. Devuelve el mejor checkpoint de la etapa
    final según la pérdida de validación (o la de entrenamiento si no hay
    casos de validación).

    Args:
        model: Traductor sin congelar
        dataset: Pares MR/CT de entrenamiento
        plan: TrainPlan
        extractor: Segmentador congelado (obligatorio si alguna etapa usa w_afp > 0)
        taps: Puntos de extracción (por defecto los del extractor)
        val_dataset: Pares de validación
        on_stage_end: Callback(nombre_etapa, mejor checkpoint de la etapa)

    Returns:
        ModelCheckpoint; history contiene una fila por época con las
        componentes de la pérdida
    """
    if plan.needs_extractor and extractor is None:
        raise AFPError(
            ErrorCode.CONFIG_CONFLICT,
            "El plan usa la pérdida AFP (w_afp > 0) pero no hay extractor",
            suggestion="Configura un checkpoint de segmentador entrenado (train-seg)",
        )
    if extractor is not None and plan.needs_extractor and not getattr(extractor, "is_frozen", False):
        raise AFPError(ErrorCode.EXTRACTOR_NOT_FROZEN, "El extractor de la pérdida AFP debe estar congelado")
    if model.is_frozen:
        raise AFPError(ErrorCode.FROZEN_MODEL, "No se puede entrenar un traductor congelado")
    if not dataset:
        raise AFPError(ErrorCode.DATASET_MISSING, "No hay casos de entrenamiento")
    plan.check_patch_size(model.size_multiple)
    if plan.needs_extractor and hasattr(extractor, "size_multiple"):
        plan.check_patch_size(extractor.size_multiple)
    taps = taps or FeatureTapConfig()

    dtype = next(model.parameters()).dtype
    config_dict = translator_config(model).to_dict()
    data_hash = dataset_hash(dataset)
    val_patches = _validation_patches(val_dataset, plan) if val_dataset else None
    history: List[Dict] = []
    global_epoch = 0

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(plan.seed)
        disc = None
        if plan.needs_discriminator:
            disc = PatchDiscriminator3d(2 * model.in_channels, plan.disc_base_channels).to(dtype)
            disc_opt = torch.optim.Adam(disc.parameters(), lr=plan.disc_lr, betas=plan.betas)

        best = ModelCheckpoint("translator", snapshot(model), config_dict,
                               TrainingFingerprint(data_hash, plan.seed, 0), history)
        for stage_index, (stage_name, stage) in enumerate(plan.stages):
            loss_cfg = stage.loss
            optimizer = torch.optim.Adam(model.parameters(), lr=stage.lr, betas=plan.betas)
            best_score = np.inf
            logger.info("%s: %d épocas, pesos %s, lr %g", stage_name, stage.epochs, loss_cfg.weights(), stage.lr)
            model.train()
            for stage_epoch in tqdm(range(1, stage.epochs + 1), desc=f"train-synth {stage_name}", leave=False):
                global_epoch += 1
                patches = []
                for i, pair in enumerate(dataset):
                    patches += sample_training_patches(pair, plan.patch_size, plan.patches_per_case,
                                                       seed_for(plan.seed, stage_index, stage_epoch, i), plan.fg_bias)
                order = np.random.Generator(
                    np.random.Philox(seed_for(plan.seed, stage_index, stage_epoch))).permutation(len(patches))
                sums = {name: 0.0 for name in COMPONENTS + ("total", "disc")}
                n_batches = 0
                for b in range(0, len(order), plan.batch_size):
                    batch = [patches[j] for j in order[b:b + plan.batch_size]]
                    x, y = _to_tensor(batch, "source", dtype), _to_tensor(batch, "target", dtype)
                    fake = model(x)
                    components = {"l1": l1_loss(fake, y)}
                    if loss_cfg.w_afp > 0:
                        components["afp"] = afp_loss(fake, y, extractor, taps, loss_cfg)
                    if loss_cfg.uses_discriminator:
                        real_scores, real_feats = disc(torch.cat([x, y], dim=1))
                        fake_scores, _ = disc(torch.cat([x, fake.detach()], dim=1))
                        loss_d, _ = hinge_adv_losses(real_scores, fake_scores)
                        disc_opt.zero_grad()
                        loss_d.backward()
                        disc_opt.step()
                        sums["disc"] += float(loss_d.detach())

                        fake_scores, fake_feats = disc(torch.cat([x, fake], dim=1))
                        with torch.no_grad():
                            _, real_feats = disc(torch.cat([x, y], dim=1))
                        _, components["adv"] = hinge_adv_losses(real_scores.detach(), fake_scores)
                        components["fm"] = feature_matching_loss(real_feats, fake_feats)
                    total = compose(components, loss_cfg)
                    if not torch.isfinite(total):
                        values = {k: float(v.detach()) for k, v in components.items()}
                        raise AFPError(
                            ErrorCode.DIVERGENCE,
                            f"{stage_name}, época {stage_epoch}: pérdida no finita {values}",
                            suggestion="Reduce el learning rate o los pesos de la pérdida",
                        )
                    optimizer.zero_grad()
                    total.backward()
                    optimizer.step()
                    for name, value in components.items():
                        sums[name] += float(value.detach())
                    sums["total"] += float(total.detach())
                    n_batches += 1

                row = {"stage": stage_name, "epoch": global_epoch, "stage_epoch": stage_epoch}
                row.update({f"w_{name}": w for name, w in loss_cfg.weights().items()})
                row.update({name: sums[name] / n_batches for name in COMPONENTS + ("total",)})
                if disc is not None:
                    row["disc"] = sums["disc"] / n_batches
                if val_patches:
                    row["val_loss"] = _validation_loss(model, val_patches, loss_cfg, extractor, taps, plan.batch_size)
                score = row.get("val_loss", row["total"])
                history.append(row)
                logger.info("%s época %d: total=%.5f", stage_name, stage_epoch, row["total"])
                if score < best_score:
                    best_score = score
                    best = ModelCheckpoint("translator", snapshot(model), config_dict,
                                           TrainingFingerprint(data_hash, plan.seed, global_epoch), history)
            best = ModelCheckpoint(best.kind, best.state_dict, config_dict, best.fingerprint, list(history))
            model.load_state_dict(best.state_dict)
            if on_stage_end is not None:
                on_stage_end(stage_name, best)
    return best


def write_loss_log(history: Sequence[Dict], path: Union[str, Path]) -> Path:
    """Log de pérdidas por época en CSV (etapa, época, componentes, validación)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(list(history)).to_csv(path, index=False)
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudo escribir {path}: {e}")
    return path


# ---------------------------------------------------------------------------
# Inferencia y diagnóstico
# ---------------------------------------------------------------------------

def synthesize_volume(model: UNet3d, volume: Volume, patch_size: Sequence[int],
                      tiling: float = config.DEFAULT_TILING, blend: str = "median") -> Volume:
    """
    Inferencia por parches: teselado, forward de cada ventana y
    reconstrucción por mediana (o media). Conserva la geometría de entrada.
    """
    if blend not in BLENDERS:
        raise AFPError(ErrorCode.CONFIG_INVALID, f"blend desconocido: {blend!r} (opciones: {sorted(BLENDERS)})")
    grid = tile_volume(volume.shape, patch_size, tiling)
    was_training = model.training
    model.eval()
    outputs = []
    try:
        with torch.no_grad():
            for i in range(len(grid.windows)):
                out = model(as_batch(volume.data[grid.slices(i)], model))
                outputs.append(out[0, 0].cpu().numpy())
    finally:
        if was_training:
            model.train()
    return Volume(BLENDERS[blend](grid, outputs), volume.spacing, volume.origin, Modality.SYNTH_CT)


def checkerboard_energy(v: Union[Volume, np.ndarray]) -> float:
    """
    Fracción de la potencia espectral (sin la componente DC) en la octava
    superior: |f| >= 0.25 ciclos/vóxel en algún eje.
    """
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    data = data - data.mean()
    power = np.abs(np.fft.fftn(data)) ** 2
    total = float(power.sum())
    if total <= 0.0:
        return 0.0
    freqs = np.meshgrid(*[np.abs(np.fft.fftfreq(n)) for n in data.shape], indexing="ij")
    high = np.zeros(data.shape, dtype=bool)
    for f in freqs:
        high |= f >= 0.25
    return float(power[high].sum() / total)


def parameter_report(cfg: TranslatorConfig) -> Dict[str, int]:
    """Número de parámetros del traductor para cada modo de decoder."""
    counts = {}
    for mode in DecoderMode:
        data = cfg.to_dict()
        data["decoder_mode"] = mode.value
        counts[mode.value] = count_parameters(build_translator(TranslatorConfig.from_dict(data), seed=0))
    return counts
