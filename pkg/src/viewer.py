"""
Paneles del visor de cortes de la app Streamlit (sin dependencias de Streamlit)
"""

import os
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import config

from src.dataset import load_manifest
from src.errors import AFPError
from src.volume_io import VolumePair, load_volume

LABELS_PANEL = "Etiquetas"
SYNTH_PANEL = "CT sintético"


def to_display(data: np.ndarray, low: float, high: float) -> np.ndarray:
    """Corte en [0, 1] con la ventana de intensidad indicada"""
    return np.clip((data - low) / ((high - low) or 1.0), 0.0, 1.0)


def find_synthetic(synth_dir: Union[str, Path, None], case_id: str) -> Tuple[Optional[np.ndarray], Optional[float]]:
    """
    Busca el CT sintético de un caso en el manifest de un directorio de synth.

    Returns:
        (datos, checkerboard_energy) o (None, None) si no hay manifest o el caso no está
    """
    if not synth_dir:
        return None, None
    try:
        manifest = load_manifest(synth_dir)
    except AFPError:
        return None, None
    for case in manifest.get("cases", []):
        if case["case_id"] == case_id:
            volume = load_volume(Path(synth_dir) / case["file"])
            return volume.data, case.get("checkerboard_energy")
    return None, None


def slice_panels(pair: VolumePair, axis: int, index: int,
                 synthetic: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    Cortes 2D ya escalados a [0, 1] para cada panel del visor.

    MR usa sus propios percentiles en el corte; CT y CT sintético comparten la
    ventana de percentiles del CT real; las etiquetas se escalan a la mayor etiqueta.

    Args:
        pair: Caso del dataset
        axis: Eje del corte (0=z, 1=y, 2=x)
        index: Índice del corte
        synthetic: Volumen sintético del mismo caso (opcional)

    Returns:
        Diccionario nombre -> imagen 2D en [0, 1], en orden de visualización
    """
    volumes = {"MR": pair.source.data, "CT": pair.target.data}
    if synthetic is not None:
        volumes[SYNTH_PANEL] = synthetic
    if pair.labels is not None:
        volumes[LABELS_PANEL] = pair.labels.labels

    ct_low, ct_high = np.percentile(pair.target.data, config.CT_CLIP_PERCENTILES)
    panels = {}
    for name, data in volumes.items():
        plane = np.take(data, index, axis=axis).astype(np.float64)
        if name == "MR":
            low, high = np.percentile(plane, config.CT_CLIP_PERCENTILES)
        elif name == LABELS_PANEL:
            low, high = 0.0, float(max(data.max(), 1))
        else:
            low, high = ct_low, ct_high
        panels[name] = to_display(plane, low, high)
    return panels
