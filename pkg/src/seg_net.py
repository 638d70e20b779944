"""
Segmentador 3D (U-Net) con puntos de extracción de features tras la ReLU.
Entrenado sobre phantoms y congelado, actúa como extractor de la pérdida AFP
y como segmentador del protocolo silver-standard.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from src.checkpoint import ModelCheckpoint, TrainingFingerprint, dataset_hash, load_weights, snapshot
from src.errors import AFPError, ErrorCode
from src.patch_engine import mean_blend, sample_training_patches, tile_volume
from src.unet import DecoderMode, Norm, UNet3d, build_unet
from src.volume_io import LabelVolume, Volume, VolumePair

logger = logging.getLogger(__name__)


@dataclass
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    channel_growth: float = 2.0
    norm: Norm = Norm.INSTANCE
    activation: str = "RELU"
    out_labels: int = 4

    def __post_init__(self):
        self.norm = Norm(self.norm)
        problems = []
        if self.depth < 2:
            problems.append(f"depth debe ser >= 2, recibido {self.depth}")
        if self.base_channels < 4:
            problems.append(f"base_channels debe ser >= 4, recibido {self.base_channels}")
        if self.out_labels < 2:
            problems.append(f"out_labels debe ser >= 2, recibido {self.out_labels}")
        if self.in_channels < 1 or self.channel_growth <= 0:
            problems.append("in_channels y channel_growth deben ser positivos")
        if self.activation != "RELU":
            problems.append(f"Solo se admite activación RELU, recibido {self.activation}")
        if problems:
            raise AFPError(ErrorCode.CONFIG_INVALID, "UNetConfig inválido:\n  - " + "\n  - ".join(problems))

    @classmethod
    def from_dict(cls, data: Dict) -> "UNetConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["norm"] = self.norm.value
        return out


@dataclass
class FeatureTapConfig:
    """
    Bloques cuyas activaciones (tras la ReLU) alimentan la pérdida AFP.
    tap_ids = None equivale a todos los bloques salvo el último decoder,
    que coincide con el mapa previo a la convolución final.
    """

    tap_ids: Optional[List[str]] = None
    include_prefinal: bool = True
    tap_point: str = "POST_ACTIVATION"

    def __post_init__(self):
        if self.tap_ids is not None:
            self.tap_ids = [str(t) for t in self.tap_ids]
            if not self.tap_ids:
                raise AFPError(ErrorCode.CONFIG_INVALID, "tap_ids no puede estar vacío")
        if self.tap_point != "POST_ACTIVATION":
            raise AFPError(ErrorCode.CONFIG_INVALID, f"tap_point no soportado: {self.tap_point}")

    def resolve(self, model: UNet3d) -> List[str]:
        return list(self.tap_ids) if self.tap_ids is not None else default_tap_ids(model)

    def n_maps(self, model: UNet3d) -> int:
        return len(self.resolve(model)) + int(self.include_prefinal)

    @classmethod
    def from_dict(cls, data: Dict) -> "FeatureTapConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


def default_tap_ids(model: UNet3d) -> List[str]:
    return list(model.block_ids[:-1])


def segmenter_config(model: UNet3d) -> UNetConfig:
    return UNetConfig(model.in_channels, model.base_channels, model.depth, model.channel_growth,
                      model.norm, "RELU", model.out_channels)


def build_segmenter(cfg: UNetConfig, seed: Optional[int] = 0) -> UNet3d:
    """
    U-Net de segmentación: (N, 1, D, H, W) -> (N, out_labels, D, H, W) scores.
    """
    return build_unet(cfg.in_channels, cfg.out_labels, cfg.base_channels, cfg.depth,
                      cfg.channel_growth, cfg.norm, DecoderMode.TRANSPOSED, seed)


def as_batch(x: Union[Volume, np.ndarray, torch.Tensor], like: Optional[torch.nn.Module] = None) -> torch.Tensor:
    """Convierte un volumen o array 3D/4D/5D en un tensor (N, C, D, H, W)."""
    if isinstance(x, Volume):
        x = x.data
    tensor = x if isinstance(x, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(x))
    while tensor.dim() < 5:
        tensor = tensor.unsqueeze(0)
    if like is not None:
        param = next(like.parameters(), None)
        if param is not None:
            tensor = tensor.to(dtype=param.dtype, device=param.device)
    return tensor


def freeze(model: UNet3d) -> UNet3d:
    """
    Congela el modelo: modo inferencia, parámetros sin gradiente y sin vuelta
    a modo entrenamiento. Idempotente.
    """
    if model.is_frozen:
        return model
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model._frozen = True
    return model


def extract_features(model: UNet3d, v: Union[Volume, np.ndarray, torch.Tensor],
                     taps: FeatureTapConfig) -> List[torch.Tensor]:
    """
    Mapas de features tras la ReLU de los bloques indicados, en orden de
    profundidad de la red (más el mapa previo a la conv final si se pide).
    El gradiente respecto a la entrada se conserva.
    """
    if not getattr(model, "is_frozen", False):
        raise AFPError(
            ErrorCode.EXTRACTOR_NOT_FROZEN,
            "El extractor debe estar congelado",
            suggestion="Llama a freeze(model) antes de extraer features",
        )
    return model.features(as_batch(v, model), taps.resolve(model), taps.include_prefinal)


# ---------------------------------------------------------------------------
# Inferencia
# ---------------------------------------------------------------------------

def predict_probabilities(model: UNet3d, volume: Volume, patch_size: Optional[Sequence[int]] = None,
                          tiling: float = 0.5) -> np.ndarray:
    """
    Probabilidades por clase (K, D, H, W). Con patch_size se hace inferencia
    por ventanas y las probabilidades se promedian.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if patch_size is None:
                logits = model(as_batch(volume, model))
                return torch.softmax(logits, dim=1)[0].cpu().numpy().astype(np.float32)
            grid = tile_volume(volume.shape, patch_size, tiling)
            outputs = []
            for i in range(len(grid.windows)):
                logits = model(as_batch(volume.data[grid.slices(i)], model))
                outputs.append(torch.softmax(logits, dim=1)[0].cpu().numpy())
            n_classes = outputs[0].shape[0]
            return np.stack([mean_blend(grid, [o[k] for o in outputs]) for k in range(n_classes)])
    finally:
        if was_training:
            model.train()


def segment_volume(model: UNet3d, volume: Volume, patch_size: Optional[Sequence[int]] = None,
                   tiling: float = 0.5, label_names: Optional[Dict[int, str]] = None) -> LabelVolume:
    """Segmenta un volumen completo (argmax de las probabilidades)."""
    probs = predict_probabilities(model, volume, patch_size, tiling)
    labels = np.argmax(probs, axis=0).astype(np.int32)
    known = label_names or {}
    names = {k: known.get(k, f"label_{k}") for k in range(1, probs.shape[0])}
    return LabelVolume(labels, volume.spacing, volume.origin, names)


# ---------------------------------------------------------------------------
# Entrenamiento
# ---------------------------------------------------------------------------

@dataclass
class SegTrainOptions:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 2
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    patches_per_case: int = 4
    fg_bias: float = 0.67
    seed: int = 0
    # Reasignación de etiquetas de origen -> destino (el resto pasa a fondo)
    label_map: Optional[Dict[int, int]] = None
    tiling: float = 0.5

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.label_map is not None:
            self.label_map = {int(k): int(v) for k, v in self.label_map.items()}
        if self.epochs < 0 or self.batch_size < 1 or self.patches_per_case < 1 or self.lr <= 0:
            raise AFPError(ErrorCode.CONFIG_INVALID, "Opciones de entrenamiento del segmentador inválidas")

    @classmethod
    def from_dict(cls, data: Dict) -> "SegTrainOptions":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["patch_size"] = list(self.patch_size)
        if self.label_map is not None:
            out["label_map"] = {str(k): v for k, v in self.label_map.items()}
        return out


def map_labels(labels: np.ndarray, label_map: Optional[Dict[int, int]]) -> np.ndarray:
    if label_map is None:
        return labels.astype(np.int64)
    out = np.zeros(labels.shape, dtype=np.int64)
    for src, dst in label_map.items():
        out[labels == src] = dst
    return out


def mapped_label_volume(lv: LabelVolume, label_map: Optional[Dict[int, int]]) -> LabelVolume:
    labels = map_labels(lv.labels, label_map)
    if label_map is None:
        return lv
    names = {dst: lv.label_names.get(src, f"label_{dst}") for src, dst in label_map.items() if dst != 0}
    return lv.with_labels(labels, names)


def seed_for(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Cross-entropy + (1 - Dice suave medio de las clases de foreground)."""
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, logits.shape[1]).permute(0, 4, 1, 2, 3).to(probs.dtype)
    dims = (0, 2, 3, 4)
    intersection = (probs * onehot).sum(dims)
    denominator = probs.sum(dims) + onehot.sum(dims)
    dice = (2.0 * intersection + eps) / (denominator + eps)
    return ce + (1.0 - dice[1:].mean())


def validation_dice(model: UNet3d, pairs: Sequence[VolumePair], opts: SegTrainOptions) -> float:
    """Dice medio de las clases de foreground sobre los casos de validación."""
    from src.metrics import dice

    scores = []
    for pair in pairs:
        reference = mapped_label_volume(pair.labels, opts.label_map)
        predicted = segment_volume(model, pair.target, opts.patch_size, opts.tiling, reference.label_names)
        for label in range(1, model.out_channels):
            scores.append(dice(predicted, reference, label))
    return float(np.mean(scores)) if scores else float("nan")


def _check_dataset(model: UNet3d, pairs: Sequence[VolumePair], opts: SegTrainOptions) -> None:
    for pair in pairs:
        if pair.labels is None:
            raise AFPError(ErrorCode.INVALID_ARGUMENT, f"Caso {pair.case_id!r} sin etiquetas")
        top = int(map_labels(pair.labels.labels, opts.label_map).max(initial=0))
        if top >= model.out_channels:
            raise AFPError(
                ErrorCode.LABEL_OUT_OF_RANGE,
                f"Caso {pair.case_id!r}: etiqueta {top} >= out_labels ({model.out_channels})",
                suggestion="Ajusta out_labels o usa label_map para reasignar clases",
            )


def train_segmentation(model: UNet3d, dataset: Sequence[VolumePair], opts: SegTrainOptions,
                       val_dataset: Optional[Sequence[VolumePair]] = None) -> ModelCheckpoint:
    """
    Entrena con Dice + cross-entropy sobre parches del CT (target) y devuelve
    el mejor checkpoint según el Dice de validación (o la pérdida de
    entrenamiento si no hay validación). El modelo queda con esos pesos.

    Args:
        model: Segmentador sin congelar
        dataset: Casos de entrenamiento con etiquetas
        opts: Opciones de entrenamiento
        val_dataset: Casos de validación (opcional)

    Returns:
        ModelCheckpoint con la curva de entrenamiento en history
    """
    if model.is_frozen:
        raise AFPError(ErrorCode.FROZEN_MODEL, "No se puede entrenar un modelo congelado")
    _check_dataset(model, list(dataset) + list(val_dataset or []), opts)

    config = segmenter_config(model).to_dict()
    fingerprint = TrainingFingerprint(dataset_hash(dataset), opts.seed, 0)
    best_state = snapshot(model)
    best_score = -np.inf
    history: List[Dict] = []
    if opts.epochs == 0:
        return ModelCheckpoint("segmenter", best_state, config, fingerprint, history)

    param = next(model.parameters())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(opts.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=opts.lr)
        for epoch in tqdm(range(1, opts.epochs + 1), desc="train-seg", leave=False):
            model.train()
            patches = []
            for i, pair in enumerate(dataset):
                patches += sample_training_patches(pair, opts.patch_size, opts.patches_per_case,
                                                   seed_for(opts.seed, epoch, i), opts.fg_bias)
            order = np.random.Generator(np.random.Philox(seed_for(opts.seed, epoch))).permutation(len(patches))
            losses = []
            for b in range(0, len(order), opts.batch_size):
                batch = [patches[j] for j in order[b:b + opts.batch_size]]
                x = torch.from_numpy(np.stack([p.target for p in batch])[:, None]).to(param.dtype)
                y = torch.from_numpy(np.stack([map_labels(p.labels, opts.label_map) for p in batch]))
                loss = dice_ce_loss(model(x), y)
                if not torch.isfinite(loss):
                    raise AFPError(
                        ErrorCode.DIVERGENCE,
                        f"Pérdida no finita en la época {epoch}, lote {b // opts.batch_size}; "
                        f"última pérdida finita: {losses[-1] if losses else 'ninguna'}",
                        suggestion="Reduce el learning rate",
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))

            train_loss = float(np.mean(losses))
            row = {"epoch": epoch, "train_loss": train_loss}
            if val_dataset:
                row["val_dice"] = validation_dice(model, val_dataset, opts)
                score = row["val_dice"]
            else:
                score = -train_loss
            history.append(row)
            logger.info("train-seg época %d: %s", epoch, row)
            if score > best_score:
                best_score = score
                best_state = snapshot(model)
                fingerprint = TrainingFingerprint(fingerprint.dataset_hash, opts.seed, epoch)

    model.load_state_dict(best_state)
    return ModelCheckpoint("segmenter", best_state, config, fingerprint, history)


def restore_segmenter(ckpt: ModelCheckpoint, frozen: bool = True) -> UNet3d:
    """Reconstruye el segmentador de un checkpoint (congelado por defecto)."""
    if ckpt.kind != "segmenter":
        raise AFPError(ErrorCode.CHECKPOINT_INCOMPATIBLE, f"Checkpoint de tipo {ckpt.kind!r}, se esperaba 'segmenter'")
    model = build_segmenter(UNetConfig.from_dict(ckpt.config), seed=None)
    load_weights(model, ckpt)
    return freeze(model) if frozen else model
