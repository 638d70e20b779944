"""
Métricas de evaluación: MAE y SSIM 3D sobre intensidades, Dice y NSD sobre
máscaras, y el protocolo silver-standard (el mismo segmentador congelado
segmenta el CT real y el sintético).
"""

import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import ndimage
from skimage.metrics import structural_similarity

# Agregar el directorio padre al path para importar config
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import config

from src.errors import AFPError, ErrorCode
from src.preprocess import IntensityStats
from src.volume_io import LabelVolume, Volume, check_alignment

logger = logging.getLogger(__name__)

FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)

# Holgura de redondeo al validar rangos de métricas
RANGE_EPS = 1e-9


def _require_aligned(a, b) -> None:
    if not check_alignment(a, b):
        raise AFPError(
            ErrorCode.MISALIGNED,
            f"Geometrías distintas: forma {a.shape} vs {b.shape}, spacing {a.spacing} vs {b.spacing}, "
            f"origen {a.origin} vs {b.origin}",
        )


# ---------------------------------------------------------------------------
# Intensidades
# ---------------------------------------------------------------------------

def mae(a: Volume, b: Volume, mask: Optional[Union[LabelVolume, np.ndarray]] = None) -> float:
    """Error absoluto medio, en todo el volumen o dentro de la máscara (etiquetas > 0)."""
    _require_aligned(a, b)
    diff = np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))
    if mask is None:
        return float(diff.mean())
    if isinstance(mask, LabelVolume):
        _require_aligned(a, mask)
        selected = mask.labels > 0
    else:
        selected = np.asarray(mask, dtype=bool)
    if not selected.any():
        raise AFPError(ErrorCode.EMPTY_FOREGROUND, "La máscara del MAE está vacía")
    return float(diff[selected].mean())


def robust_range(v: Volume, percentiles=config.CT_CLIP_PERCENTILES) -> float:
    """Rango robusto p99.5 - p0.5 del volumen real (1.0 si es constante)."""
    low, high = np.percentile(v.data.astype(np.float64), percentiles)
    return float(high - low) or 1.0


def ssim3d(a: Volume, b: Volume, window: int = 7, dynamic_range: Optional[float] = None) -> float:
    """
    SSIM medio sobre ventanas 3D con kernel uniforme, C1 = (0.01 R)^2 y
    C2 = (0.03 R)^2.
    """
    _require_aligned(a, b)
    data_range = robust_range(a) if dynamic_range is None else float(dynamic_range)
    if data_range <= 0:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, f"dynamic_range debe ser > 0, recibido {data_range}")
    if window % 2 == 0 or window > min(a.shape):
        raise AFPError(
            ErrorCode.INVALID_ARGUMENT,
            f"La ventana SSIM ({window}) debe ser impar y no mayor que el volumen {a.shape}",
        )
    return float(structural_similarity(
        a.data.astype(np.float64), b.data.astype(np.float64),
        win_size=window, data_range=data_range, K1=0.01, K2=0.03,
    ))


# ---------------------------------------------------------------------------
# Máscaras
# ---------------------------------------------------------------------------

def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 si ambas máscaras están vacías."""
    _require_aligned(a, b)
    mask_a, mask_b = a.mask(label), b.mask(label)
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(mask_a, mask_b).sum()) / total


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Vóxeles de la máscara con algún vecino de cara en el fondo (fuera del volumen cuenta como fondo)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=FACE_CONNECTIVITY, border_value=0)


def surface_distances(from_surface: np.ndarray, to_surface: np.ndarray, spacing) -> np.ndarray:
    """Distancia (mm) de cada vóxel de from_surface al vóxel más cercano de to_surface."""
    distmap = ndimage.distance_transform_edt(~to_surface, sampling=spacing)
    return distmap[from_surface]


def nsd(a: LabelVolume, b: LabelVolume, label: int, tolerance_mm: float) -> float:
    """
    Normalized Surface Distance simétrica:
    (|S_a a <= tau de S_b| + |S_b a <= tau de S_a|) / (|S_a| + |S_b|).
    1.0 con ambas superficies vacías, 0.0 si solo una lo está.
    """
    _require_aligned(a, b)
    if tolerance_mm < 0:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, f"tolerance_mm debe ser >= 0, recibido {tolerance_mm}")
    surf_a = surface_mask(a.mask(label))
    surf_b = surface_mask(b.mask(label))
    n_a, n_b = int(surf_a.sum()), int(surf_b.sum())
    if n_a == 0 and n_b == 0:
        return 1.0
    if n_a == 0 or n_b == 0:
        return 0.0
    close_a = int((surface_distances(surf_a, surf_b, a.spacing) <= tolerance_mm).sum())
    close_b = int((surface_distances(surf_b, surf_a, a.spacing) <= tolerance_mm).sum())
    return (close_a + close_b) / (n_a + n_b)


def resolve_tolerance(spacing, tolerance_mm: Optional[float] = None, region: Optional[str] = None) -> float:
    """
    Tolerancia NSD: valor explícito, preset por región ("lung", "pelvis") o,
    sin ninguno, el doble del tamaño de vóxel.
    """
    if tolerance_mm is not None:
        return float(tolerance_mm)
    if region is not None:
        if region not in config.NSD_TOLERANCE_MM:
            raise AFPError(
                ErrorCode.CONFIG_INVALID,
                f"Región desconocida: {region!r}",
                suggestion=f"Regiones disponibles: {', '.join(sorted(config.NSD_TOLERANCE_MM))}",
            )
        return float(config.NSD_TOLERANCE_MM[region])
    return float(config.NSD_VOXEL_FACTOR * max(spacing))


# ---------------------------------------------------------------------------
# Informes
# ---------------------------------------------------------------------------

@dataclass
class LabelScores:
    dice: float
    nsd: float


@dataclass
class MetricsReport:
    case_id: str
    mae: float
    ssim: float
    per_label: Dict[str, LabelScores]
    tolerance_mm: float
    mae_denormalized: Optional[float] = None

    def __post_init__(self):
        values = [self.mae, self.ssim] + [v for s in self.per_label.values() for v in (s.dice, s.nsd)]
        if not all(np.isfinite(values)):
            raise AFPError(ErrorCode.DEGENERATE_OUTPUT, f"Caso {self.case_id!r}: métricas no finitas")
        problems = []
        if self.mae < 0 or (self.mae_denormalized is not None and self.mae_denormalized < 0):
            problems.append(f"mae={self.mae} (debe ser >= 0)")
        if not -1.0 - RANGE_EPS <= self.ssim <= 1.0 + RANGE_EPS:
            problems.append(f"ssim={self.ssim} fuera de [-1, 1]")
        for name, scores in self.per_label.items():
            for metric, value in (("dice", scores.dice), ("nsd", scores.nsd)):
                if not -RANGE_EPS <= value <= 1.0 + RANGE_EPS:
                    problems.append(f"{metric}_{name}={value} fuera de [0, 1]")
        if self.tolerance_mm < 0:
            problems.append(f"tolerance_mm={self.tolerance_mm} (debe ser >= 0)")
        if problems:
            raise AFPError(
                ErrorCode.METRIC_OUT_OF_RANGE,
                f"Caso {self.case_id!r}: métricas fuera de rango:\n  - " + "\n  - ".join(problems),
            )

    def to_row(self) -> Dict:
        row = {"case_id": self.case_id, "mae": self.mae, "ssim": self.ssim}
        if self.mae_denormalized is not None:
            row["mae_denormalized"] = self.mae_denormalized
        for name, scores in self.per_label.items():
            row[f"dice_{name}"] = scores.dice
            row[f"nsd_{name}"] = scores.nsd
        row["tolerance_mm"] = self.tolerance_mm
        return row

    def to_dict(self) -> Dict:
        return asdict(self)


def silver_standard_eval(real_ct: Volume, synth_ct: Volume, segmenter, tolerance_mm: Optional[float] = None,
                         labels: Optional[Sequence[int]] = None, patch_size=None,
                         tiling: float = config.DEFAULT_TILING, label_names: Optional[Dict[int, str]] = None,
                         case_id: str = "", mae_mask: Optional[LabelVolume] = None,
                         stats: Optional[IntensityStats] = None, ssim_window: int = 7) -> MetricsReport:
    """
    Segmenta ambos volúmenes con el mismo segmentador congelado y compara la
    máscara del CT sintético con la del real (silver standard).

    Args:
        real_ct: CT real (normalizado)
        synth_ct: CT sintético alineado
        segmenter: Segmentador congelado
        tolerance_mm: Tolerancia NSD (por defecto el doble del tamaño de vóxel)
        labels: Etiquetas a puntuar (por defecto todas las de foreground)
        patch_size: Parche para la inferencia por ventanas (None = volumen completo)
        tiling: Solapamiento de las ventanas
        label_names: Nombres de etiqueta para el informe
        case_id: Identificador del caso
        mae_mask: Máscara opcional para el MAE
        stats: Estadísticas del CT real para el MAE desnormalizado
        ssim_window: Lado de la ventana SSIM

    Returns:
        MetricsReport
    """
    from src.seg_net import segment_volume

    _require_aligned(real_ct, synth_ct)
    tau = resolve_tolerance(real_ct.spacing, tolerance_mm)
    reference = segment_volume(segmenter, real_ct, patch_size, tiling, label_names)
    predicted = segment_volume(segmenter, synth_ct, patch_size, tiling, label_names)
    labels = list(labels) if labels is not None else list(range(1, segmenter.out_channels))
    names = label_names or {}

    per_label = {
        names.get(label, f"label_{label}"): LabelScores(
            dice(predicted, reference, label), nsd(predicted, reference, label, tau))
        for label in labels
    }
    value = mae(real_ct, synth_ct, mae_mask)
    return MetricsReport(
        case_id=case_id,
        mae=value,
        ssim=ssim3d(real_ct, synth_ct, ssim_window),
        per_label=per_label,
        tolerance_mm=tau,
        mae_denormalized=value * stats.std if stats is not None else None,
    )


def evaluate_cases(real: Mapping[str, Volume], synth: Mapping[str, Volume], segmenter,
                   workers: int = 1, stats: Optional[Mapping[str, IntensityStats]] = None,
                   **options) -> List[MetricsReport]:
    """
    Evalúa todos los casos emparejados por id, en orden de id.
    El paralelismo por caso no cambia el resultado.
    """
    missing_synth = sorted(set(real) - set(synth))
    missing_real = sorted(set(synth) - set(real))
    if missing_synth or missing_real:
        raise AFPError(
            ErrorCode.CASE_MISMATCH,
            f"Casos sin pareja. Falta sintético: {missing_synth}; falta real: {missing_real}",
            suggestion="Comprueba que real_dir y synth_dir contienen los mismos ids",
        )
    case_ids = sorted(real)

    def run(case_id: str) -> MetricsReport:
        case_stats = stats.get(case_id) if stats else None
        return silver_standard_eval(real[case_id], synth[case_id], segmenter, case_id=case_id,
                                    stats=case_stats, **options)

    if workers > 1 and len(case_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, case_ids))
    return [run(case_id) for case_id in case_ids]


def _mean_std(values: Sequence[float]) -> Dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()), "std": float(values.std())}


def aggregate_reports(reports: Sequence[MetricsReport]) -> Dict:
    """Media ± desviación típica (poblacional) de cada métrica y etiqueta."""
    if not reports:
        return {"n_cases": 0, "per_label": {}}
    out = {
        "n_cases": len(reports),
        "mae": _mean_std([r.mae for r in reports]),
        "ssim": _mean_std([r.ssim for r in reports]),
        "tolerance_mm": reports[0].tolerance_mm,
        "per_label": {},
    }
    if all(r.mae_denormalized is not None for r in reports):
        out["mae_denormalized"] = _mean_std([r.mae_denormalized for r in reports])
    for name in reports[0].per_label:
        out["per_label"][name] = {
            "dice": _mean_std([r.per_label[name].dice for r in reports]),
            "nsd": _mean_std([r.per_label[name].nsd for r in reports]),
        }
    return out


def write_reports(reports: Sequence[MetricsReport], out_dir: Union[str, Path],
                  extra: Optional[Dict] = None) -> Dict[str, Path]:
    """
    Escribe per_case.csv (una fila por caso) y aggregate.json (media ± std).

    Returns:
        Diccionario con las rutas escritas
    """
    out_dir = Path(out_dir)
    aggregate = aggregate_reports(reports)
    aggregate.update(extra or {})
    paths = {"per_case": out_dir / "per_case.csv", "aggregate": out_dir / "aggregate.json"}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([r.to_row() for r in reports]).to_csv(paths["per_case"], index=False)
        with open(paths["aggregate"], "w", encoding="utf-8") as f:
            json.dump(aggregate, f, indent=2, sort_keys=True)
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudieron escribir los informes en {out_dir}: {e}")
    logger.info("Informes escritos en %s (%d casos)", out_dir, len(reports))
    return paths
