"""
Familia U-Net 3D compartida por el segmentador y el traductor.

Cada bloque convolucional (conv-norm-ReLU x2) tiene un identificador
("enc0", ..., "dec0") que sirve como punto de extracción de features
tras la ReLU.
"""

import logging
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from src.errors import AFPError, ErrorCode

logger = logging.getLogger(__name__)

PREFINAL = "prefinal"


class Norm(str, Enum):
    INSTANCE = "INSTANCE"
    NONE = "NONE"


class DecoderMode(str, Enum):
    TRANSPOSED = "TRANSPOSED"
    UPSAMPLE_CONV = "UPSAMPLE_CONV"


def level_channels(base_channels: int, depth: int, channel_growth: float) -> List[int]:
    return [int(round(base_channels * channel_growth ** level)) for level in range(depth)]


class ConvBlock(nn.Module):
    """Dos convoluciones 3x3x3, cada una seguida de normalización y ReLU."""

    def __init__(self, in_channels: int, out_channels: int, norm: Norm):
        super().__init__()
        layers: List[nn.Module] = []
        for c_in in (in_channels, out_channels):
            layers.append(nn.Conv3d(c_in, out_channels, kernel_size=3, padding=1))
            if norm == Norm.INSTANCE:
                layers.append(nn.InstanceNorm3d(out_channels, affine=True))
            layers.append(nn.ReLU(inplace=False))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def make_upsampler(in_channels: int, out_channels: int, mode: DecoderMode) -> nn.Module:
    if mode == DecoderMode.TRANSPOSED:
        return nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)
    # Redimensionado + convolución para evitar patrones de tablero de ajedrez
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False),
        nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
    )


class UNet3d(nn.Module):
    """
    U-Net 3D con `depth` niveles (el último es el cuello de botella).

    Entrada (N, in_channels, D, H, W) con D, H, W divisibles por 2^(depth-1);
    salida (N, out_channels, D, H, W) sin activación final.
    """

    def __init__(self, in_channels: int, out_channels: int, base_channels: int, depth: int,
                 channel_growth: float = 2.0, norm: Norm = Norm.INSTANCE,
                 decoder_mode: DecoderMode = DecoderMode.TRANSPOSED):
        super().__init__()
        self._frozen = False
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.depth = depth
        self.base_channels = base_channels
        self.channel_growth = channel_growth
        self.norm = Norm(norm)
        self.decoder_mode = DecoderMode(decoder_mode)
        channels = level_channels(base_channels, depth, channel_growth)
        self.channels = channels

        self.encoders = nn.ModuleList()
        c_prev = in_channels
        for c in channels:
            self.encoders.append(ConvBlock(c_prev, c, Norm(norm)))
            c_prev = c
        self.pool = nn.MaxPool3d(kernel_size=2, stride=2)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(depth - 2, -1, -1):
            self.upsamplers.append(make_upsampler(channels[level + 1], channels[level], self.decoder_mode))
            self.decoders.append(ConvBlock(2 * channels[level], channels[level], Norm(norm)))
        self.head = nn.Conv3d(channels[0], out_channels, kernel_size=1)

        self.block_ids = [f"enc{level}" for level in range(depth)] + [
            f"dec{level}" for level in range(depth - 2, -1, -1)
        ]

    # -- frozen handling ----------------------------------------------------

    @property
    def is_frozen(self) -> bool:
        return self._frozen

    def train(self, mode: bool = True):
        if mode and getattr(self, "_frozen", False):
            raise AFPError(ErrorCode.FROZEN_MODEL, "El modelo está congelado y no puede volver a modo entrenamiento")
        return super().train(mode)

    # -- forward ---------------------------------------------------------------

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5 or x.shape[1] != self.in_channels:
            raise AFPError(
                ErrorCode.SHAPE_INCOMPATIBLE,
                f"Se esperaba (N, {self.in_channels}, D, H, W), recibido {tuple(x.shape)}",
            )
        bad = [s for s in x.shape[2:] if s % self.size_multiple]
        if bad:
            raise AFPError(
                ErrorCode.SHAPE_INCOMPATIBLE,
                f"Dimensiones {tuple(x.shape[2:])} no divisibles por {self.size_multiple}",
                suggestion=f"Usa parches múltiplos de {self.size_multiple} para depth={self.depth}",
            )

    def run_blocks(self, x: torch.Tensor) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
        """
        Ejecuta la red completa salvo la convolución final.

        Returns:
            Tupla: (salidas de cada bloque por id en orden de red, mapa previo a la conv final)
        """
        self.check_input(x)
        outputs: Dict[str, torch.Tensor] = {}
        skips = []
        h = x
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                h = self.pool(h)
            h = encoder(h)
            outputs[f"enc{level}"] = h
            skips.append(h)
        for i, (up, decoder) in enumerate(zip(self.upsamplers, self.decoders)):
            level = self.depth - 2 - i
            h = decoder(torch.cat([skips[level], up(h)], dim=1))
            outputs[f"dec{level}"] = h
        return outputs, h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, prefinal = self.run_blocks(x)
        return self.head(prefinal)

    def features(self, x: torch.Tensor, tap_ids: Sequence[str], include_prefinal: bool = False) -> List[torch.Tensor]:
        """Mapas post-ReLU de los bloques pedidos, en orden de profundidad de la red."""
        unknown = [t for t in tap_ids if t not in self.block_ids]
        if unknown:
            raise AFPError(
                ErrorCode.UNKNOWN_TAP_ID,
                f"Identificadores de bloque desconocidos: {unknown}",
                suggestion=f"Bloques disponibles: {', '.join(self.block_ids)}",
            )
        outputs, prefinal = self.run_blocks(x)
        wanted = set(tap_ids)
        feats = [outputs[b] for b in self.block_ids if b in wanted]
        if include_prefinal:
            feats.append(prefinal)
        return feats


def build_unet(in_channels: int, out_channels: int, base_channels: int, depth: int,
               channel_growth: float, norm: Norm, decoder_mode: DecoderMode, seed: Optional[int]) -> UNet3d:
    """Construye la red con inicialización sembrada sin alterar el RNG global."""
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(int(seed))
        model = UNet3d(in_channels, out_channels, base_channels, depth, channel_growth, norm, decoder_mode)
    logger.info("U-Net 3D (%s, depth=%d): %d parámetros", model.decoder_mode.value, depth, count_parameters(model))
    return model


def count_parameters(model: nn.Module) -> int:
    return int(sum(p.numel() for p in model.parameters()))
