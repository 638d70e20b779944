"""
Preprocesado de pares MR/CT: remuestreo a un tamaño de vóxel fijo,
z-score para MR y normalización de CT con estadísticas de foreground.
"""

import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

# Agregar el directorio padre al path para importar config
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import config

from src.errors import AFPError, ErrorCode
from src.volume_io import LabelVolume, Modality, Volume, VolumePair

logger = logging.getLogger(__name__)


class Interpolation(str, Enum):
    LINEAR = "LINEAR"
    BSPLINE3 = "BSPLINE3"


SPLINE_ORDER = {Interpolation.LINEAR: 1, Interpolation.BSPLINE3: 3}


@dataclass
class PreprocessConfig:
    target_spacing: Tuple[float, float, float] = config.TARGET_SPACING
    mr_interpolation: Interpolation = Interpolation.LINEAR
    ct_clip_percentiles: Tuple[float, float] = config.CT_CLIP_PERCENTILES
    # Umbral absoluto de foreground; si es None se usa foreground_percentile
    foreground_threshold: Optional[float] = None
    foreground_percentile: float = config.FOREGROUND_PERCENTILE

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.ct_clip_percentiles = tuple(float(p) for p in self.ct_clip_percentiles)
        self.mr_interpolation = Interpolation(self.mr_interpolation)
        if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
            raise AFPError(ErrorCode.CONFIG_INVALID, f"target_spacing inválido: {self.target_spacing}")
        low, high = self.ct_clip_percentiles
        if not (0.0 <= low < high <= 100.0):
            raise AFPError(ErrorCode.CONFIG_INVALID, f"Percentiles de recorte inválidos: {self.ct_clip_percentiles}")
        if not 0.0 <= self.foreground_percentile < 100.0:
            raise AFPError(ErrorCode.CONFIG_INVALID, f"foreground_percentile inválido: {self.foreground_percentile}")

    @classmethod
    def from_dict(cls, data: Dict) -> "PreprocessConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["mr_interpolation"] = self.mr_interpolation.value
        out["target_spacing"] = list(self.target_spacing)
        out["ct_clip_percentiles"] = list(self.ct_clip_percentiles)
        return out


@dataclass
class IntensityStats:
    """Estadísticas de una normalización, suficientes para invertirla."""

    mean: float
    std: float
    clip_low: Optional[float] = None
    clip_high: Optional[float] = None

    @classmethod
    def from_dict(cls, data: Dict) -> "IntensityStats":
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


def resampled_shape(shape, spacing, target_spacing) -> Tuple[int, int, int]:
    """ceil(shape * spacing / target_spacing), redondeando antes para evitar ruido de coma flotante."""
    extent = np.asarray(shape, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    ratio = np.round(extent / np.asarray(target_spacing, dtype=np.float64), 6)
    return tuple(int(n) for n in np.ceil(ratio))


def resample_volume(v: Union[Volume, LabelVolume], target_spacing,
                    interpolation: Interpolation = Interpolation.LINEAR) -> Union[Volume, LabelVolume]:
    """
    Remuestrea a target_spacing manteniendo el origen (centro del vóxel 0).

    La rejilla de salida empieza en el vóxel 0 con paso target_spacing exacto;
    los vóxeles finales que caen más allá del último centro de entrada se
    extrapolan linealmente (las rampas siguen siendo rampas).

    Las etiquetas (LabelVolume) siempre usan vecino más cercano.

    Args:
        v: Volume o LabelVolume
        target_spacing: Spacing destino (mm)
        interpolation: LINEAR o BSPLINE3 (ignorado para etiquetas)

    Returns:
        Nuevo volumen del mismo tipo con spacing = target_spacing
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_spacing) != 3 or min(target_spacing) <= 0:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, f"target_spacing inválido: {target_spacing}")
    new_shape = resampled_shape(v.shape, v.spacing, target_spacing)
    if min(new_shape) < 1:
        raise AFPError(ErrorCode.DEGENERATE_OUTPUT, f"El remuestreo produce una forma vacía {new_shape}")

    is_labels = isinstance(v, LabelVolume)
    source = v.labels if is_labels else v.data

    if new_shape == v.shape and np.allclose(target_spacing, v.spacing, rtol=0, atol=1e-12):
        resampled = source.copy()
    else:
        # Coordenada de entrada de cada vóxel de salida; la última cae a menos de un vóxel del borde
        axes = [
            np.arange(n, dtype=np.float64) * (t / s)
            for n, t, s in zip(new_shape, target_spacing, v.spacing)
        ]
        coords = np.meshgrid(*axes, indexing="ij")
        order = 0 if is_labels else SPLINE_ORDER[Interpolation(interpolation)]
        padded = source.astype(np.float64)
        if not is_labels:
            # Un vóxel extra por eje extrapolado linealmente (2·x[n-1] - x[n-2])
            padded = np.pad(padded, [(0, 1)] * 3, mode="reflect", reflect_type="odd")
        resampled = ndimage.map_coordinates(padded, coords, order=order, mode="nearest", prefilter=order > 1)

    if is_labels:
        return LabelVolume(np.rint(resampled).astype(np.int32), target_spacing, v.origin, v.label_names)
    return Volume(resampled.astype(np.float32), target_spacing, v.origin, v.modality)


def zscore_normalize_mr(v: Volume) -> Tuple[Volume, IntensityStats]:
    """
    Normaliza a media cero y varianza unidad.

    Returns:
        Tupla: (volumen_normalizado, estadísticas)
    """
    data = v.data.astype(np.float64)
    mean = float(data.mean())
    std = float(data.std())
    if std == 0.0:
        raise AFPError(ErrorCode.CONSTANT_VOLUME, "El volumen es constante (std = 0)")
    return v.with_data((data - mean) / std), IntensityStats(mean=mean, std=std)


ForegroundSpec = Union[LabelVolume, np.ndarray, float, None]


def foreground_mask(v: Volume, foreground: ForegroundSpec = None,
                    percentile: float = config.FOREGROUND_PERCENTILE) -> np.ndarray:
    """
    Máscara de foreground.

    Args:
        v: Volumen de intensidades
        foreground: LabelVolume (etiquetas > 0), máscara booleana, umbral absoluto,
            o None (vóxeles por encima del percentil `percentile` del volumen)
        percentile: Percentil de la regla por defecto

    Returns:
        Array booleano con la forma de v
    """
    if isinstance(foreground, LabelVolume):
        return foreground.labels > 0
    if isinstance(foreground, np.ndarray):
        if foreground.shape != v.shape:
            raise AFPError(ErrorCode.MISALIGNED, f"Máscara {foreground.shape} vs volumen {v.shape}")
        return foreground.astype(bool)
    threshold = float(foreground) if foreground is not None else float(np.percentile(v.data, percentile))
    return v.data > threshold


def normalize_ct(v: Volume, foreground: ForegroundSpec = None,
                 clip_percentiles: Tuple[float, float] = config.CT_CLIP_PERCENTILES,
                 percentile: float = config.FOREGROUND_PERCENTILE) -> Tuple[Volume, IntensityStats]:
    """
    Normalización de CT: recorte a los percentiles del foreground y
    estandarización con la media/std del foreground recortado.

    Returns:
        Tupla: (volumen_normalizado, estadísticas con clip_low/clip_high)
    """
    mask = foreground_mask(v, foreground, percentile)
    if not mask.any():
        raise AFPError(
            ErrorCode.EMPTY_FOREGROUND,
            "No hay vóxeles de foreground",
            suggestion="Revisa la máscara o el umbral de foreground",
        )
    data = v.data.astype(np.float64)
    fg = data[mask]
    low, high = np.percentile(fg, clip_percentiles)
    fg = np.clip(fg, low, high)
    mean = float(fg.mean())
    std = float(fg.std())
    if std == 0.0:
        raise AFPError(ErrorCode.CONSTANT_FOREGROUND, "Las intensidades del foreground son constantes")
    clipped = np.clip(data, low, high)
    stats = IntensityStats(mean=mean, std=std, clip_low=float(low), clip_high=float(high))
    return v.with_data((clipped - mean) / std), stats


def denormalize(v: Volume, stats: IntensityStats) -> Volume:
    """Inversa afín de una normalización: x * std + mean."""
    return v.with_data(v.data.astype(np.float64) * stats.std + stats.mean)


def preprocess_pair(pair: VolumePair, cfg: PreprocessConfig) -> Tuple[VolumePair, Dict[str, IntensityStats]]:
    """
    Pipeline completo de un par: remuestreo, z-score MR y normalización CT
    (foreground = etiquetas > 0 si existen, si no la regla configurada).

    Returns:
        Tupla: (par_preprocesado, {"source": stats_mr, "target": stats_ct})
    """
    source = resample_volume(pair.source, cfg.target_spacing, cfg.mr_interpolation)
    target = resample_volume(pair.target, cfg.target_spacing, Interpolation.LINEAR)
    labels = resample_volume(pair.labels, cfg.target_spacing) if pair.labels is not None else None

    source, mr_stats = zscore_normalize_mr(source)
    if labels is not None and labels.labels.any():
        fg = labels
    else:
        fg = cfg.foreground_threshold
    target, ct_stats = normalize_ct(target, fg, cfg.ct_clip_percentiles, cfg.foreground_percentile)
    logger.debug("Caso %s: forma %s -> %s", pair.case_id, pair.source.shape, source.shape)
    out = VolumePair(
        source.with_data(source.data, Modality.MR),
        target.with_data(target.data, Modality.CT),
        labels,
        pair.case_id,
    )
    return out, {"source": mr_stats, "target": ct_stats}
