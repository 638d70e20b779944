"""
Pérdidas del traductor: L1 global, AFP (features de un segmentador congelado),
hinge adversarial y feature matching del discriminador.
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import torch

from src.errors import AFPError, ErrorCode

logger = logging.getLogger(__name__)

COMPONENTS = ("l1", "afp", "adv", "fm")


class FeatureExtractor(Protocol):
    is_frozen: bool

    def features(self, x: torch.Tensor, tap_ids: Sequence[str], include_prefinal: bool = False) -> List[torch.Tensor]:
        ...


class AFPReduction(str, Enum):
    MEAN_PER_LAYER = "MEAN_PER_LAYER"
    SUM_PER_LAYER = "SUM_PER_LAYER"


@dataclass
class LossConfig:
    w_l1: float = 1.0
    w_afp: float = 0.0
    w_adv: float = 0.0
    w_fm: float = 0.0
    afp_layer_weights: Optional[List[float]] = None
    afp_reduction: AFPReduction = AFPReduction.MEAN_PER_LAYER

    def __post_init__(self):
        self.afp_reduction = AFPReduction(self.afp_reduction)
        weights = self.weights()
        if any(w < 0 for w in weights.values()):
            raise AFPError(ErrorCode.CONFIG_INVALID, f"Los pesos de pérdida deben ser >= 0: {weights}")
        if not any(w > 0 for w in weights.values()):
            raise AFPError(
                ErrorCode.CONFIG_INVALID,
                "Al menos un peso de pérdida debe ser > 0",
                suggestion="Activa w_l1 o w_afp",
            )
        if self.afp_layer_weights is not None:
            self.afp_layer_weights = [float(w) for w in self.afp_layer_weights]
            if not self.afp_layer_weights or any(w < 0 for w in self.afp_layer_weights):
                raise AFPError(ErrorCode.CONFIG_INVALID, "afp_layer_weights debe ser una lista no vacía de reales >= 0")

    def weights(self) -> Dict[str, float]:
        return {"l1": self.w_l1, "afp": self.w_afp, "adv": self.w_adv, "fm": self.w_fm}

    @property
    def uses_discriminator(self) -> bool:
        return self.w_adv > 0 or self.w_fm > 0

    @classmethod
    def from_dict(cls, data: Dict) -> "LossConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["afp_reduction"] = self.afp_reduction.value
        return out


def _check_shapes(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise AFPError(ErrorCode.SHAPE_MISMATCH, f"Formas distintas: {tuple(x.shape)} vs {tuple(y.shape)}")


def l1_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_shapes(x, y)
    return (x - y).abs().mean()


def afp_loss(x: torch.Tensor, y: torch.Tensor, extractor: FeatureExtractor, taps, cfg: LossConfig) -> torch.Tensor:
    """
    Distancia L1 entre los mapas de features del extractor congelado para el
    volumen sintetizado x y la referencia y, promediada sobre las N capas:

        (1/N) * sum_i w_i * reduce(|phi_i(x) - phi_i(y)|)

    La rama de referencia se evalúa sin gradiente.

    Args:
        x: Salida del traductor (N, 1, D, H, W)
        y: Referencia con la misma forma
        extractor: Red congelada con features(x, tap_ids, include_prefinal)
        taps: FeatureTapConfig
        cfg: LossConfig (pesos por capa y reducción)

    Returns:
        Escalar >= 0, diferenciable respecto a x
    """
    _check_shapes(x, y)
    if not getattr(extractor, "is_frozen", False):
        raise AFPError(
            ErrorCode.EXTRACTOR_NOT_FROZEN,
            "El extractor de la pérdida AFP debe estar congelado",
            suggestion="Usa seg_net.freeze() sobre el segmentador entrenado",
        )
    tap_ids = taps.resolve(extractor)
    phi_x = extractor.features(x, tap_ids, taps.include_prefinal)
    with torch.no_grad():
        phi_y = extractor.features(y, tap_ids, taps.include_prefinal)

    n_layers = len(phi_x)
    layer_weights = cfg.afp_layer_weights or [1.0] * n_layers
    if len(layer_weights) != n_layers:
        raise AFPError(
            ErrorCode.LENGTH_MISMATCH,
            f"afp_layer_weights tiene {len(layer_weights)} pesos para {n_layers} mapas de features",
        )
    total = x.new_zeros(())
    for w, fx, fy in zip(layer_weights, phi_x, phi_y):
        diff = (fx - fy).abs()
        total = total + w * (diff.mean() if cfg.afp_reduction == AFPReduction.MEAN_PER_LAYER else diff.sum())
    return total / n_layers


def hinge_adv_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Returns:
        Tupla: (pérdida del discriminador, pérdida del generador)
    """
    loss_d = torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()
    loss_g = -fake_scores.mean()
    return loss_d, loss_g


def feature_matching_loss(real_features: Sequence[torch.Tensor], fake_features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Media sobre capas del error absoluto medio; la rama real no propaga gradiente."""
    if len(real_features) != len(fake_features):
        raise AFPError(
            ErrorCode.LENGTH_MISMATCH,
            f"{len(real_features)} capas reales frente a {len(fake_features)} sintéticas",
        )
    if not real_features:
        raise AFPError(ErrorCode.LENGTH_MISMATCH, "Listas de features vacías")
    per_layer = [l1_loss(fake, real.detach()) for real, fake in zip(real_features, fake_features)]
    return torch.stack(per_layer).mean()


def compose(components: Dict[str, torch.Tensor], cfg: LossConfig) -> torch.Tensor:
    """Suma ponderada de las componentes activas (peso > 0)."""
    weights = cfg.weights()
    total = None
    for name in COMPONENTS:
        if weights[name] > 0:
            term = weights[name] * components[name]
            total = term if total is None else total + term
    return total
