"""
Teselado determinista en parches solapados, reconstrucción por mediana/media
y muestreo de parches de entrenamiento.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import AFPError, ErrorCode
from src.volume_io import VolumePair

logger = logging.getLogger(__name__)

Box = Tuple[Tuple[int, int, int], Tuple[int, int, int]]


@dataclass(frozen=True)
class PatchGrid:
    volume_shape: Tuple[int, int, int]
    patch_size: Tuple[int, int, int]
    tiling: float
    windows: Tuple[Box, ...]

    def slices(self, index: int) -> Tuple[slice, slice, slice]:
        start, end = self.windows[index]
        return tuple(slice(s, e) for s, e in zip(start, end))

    def coverage(self) -> np.ndarray:
        """Número de ventanas que cubren cada vóxel."""
        count = np.zeros(self.volume_shape, dtype=np.int32)
        for i in range(len(self.windows)):
            count[self.slices(i)] += 1
        return count

    def to_dict(self) -> Dict:
        return {
            "volume_shape": list(self.volume_shape),
            "patch_size": list(self.patch_size),
            "tiling": self.tiling,
            "windows": [[list(s), list(e)] for s, e in self.windows],
        }


def axis_starts(length: int, patch: int, tiling: float) -> List[int]:
    """Inicios de ventana en un eje; la última se ajusta al borde."""
    stride = max(1, int(math.floor(round(patch * (1.0 - tiling), 9))))
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def tile_volume(shape: Sequence[int], patch_size: Sequence[int], tiling: float = 0.5) -> PatchGrid:
    """
    Ventanas solapadas que cubren todo el volumen, en orden lexicográfico.

    Args:
        shape: Forma del volumen (z, y, x)
        patch_size: Tamaño de parche por eje
        tiling: Fracción de solapamiento en (0, 1); 0.5 = paso de medio parche

    Returns:
        PatchGrid
    """
    shape = tuple(int(s) for s in shape)
    patch_size = tuple(int(p) for p in patch_size)
    if not 0.0 < tiling < 1.0:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, f"tiling debe estar en (0, 1), recibido {tiling}")
    if len(shape) != 3 or len(patch_size) != 3 or min(patch_size) < 1:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, f"Forma {shape} o parche {patch_size} inválidos")
    if any(p > s for p, s in zip(patch_size, shape)):
        raise AFPError(
            ErrorCode.PATCH_TOO_LARGE,
            f"El parche {patch_size} no cabe en el volumen {shape}",
            suggestion="Reduce patch_size o remuestrea el volumen a una resolución mayor",
        )
    per_axis = [axis_starts(s, p, tiling) for s, p in zip(shape, patch_size)]
    windows = tuple(
        (start, tuple(s + p for s, p in zip(start, patch_size)))
        for start in itertools.product(*per_axis)
    )
    return PatchGrid(shape, patch_size, float(tiling), windows)


def _gather(grid: PatchGrid, patch_outputs: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Apila, por vóxel, todos los valores de las ventanas que lo cubren y los
    ordena de menor a mayor; los huecos quedan al final como +inf.

    Returns:
        Tupla: (valores ordenados (K, D, H, W) en float64, número de valores por vóxel)
    """
    if len(patch_outputs) != len(grid.windows):
        raise AFPError(
            ErrorCode.COUNT_MISMATCH,
            f"{len(patch_outputs)} salidas para {len(grid.windows)} ventanas",
        )
    count = grid.coverage()
    stack = np.full((int(count.max()),) + grid.volume_shape, np.inf, dtype=np.float64)
    fill = np.zeros(grid.volume_shape, dtype=np.int64)
    for i, output in enumerate(patch_outputs):
        output = np.asarray(output)
        if output.shape != grid.patch_size:
            raise AFPError(
                ErrorCode.COUNT_MISMATCH,
                f"La salida {i} tiene forma {output.shape}, se esperaba {grid.patch_size}",
            )
        region = grid.slices(i)
        slot = fill[region]
        np.put_along_axis(stack[(slice(None),) + region], slot[None], output[None].astype(np.float64), axis=0)
        fill[region] += 1
    stack.sort(axis=0)
    return stack, count


def median_blend(grid: PatchGrid, patch_outputs: Sequence[np.ndarray]) -> np.ndarray:
    """
    Mediana por vóxel de todas las ventanas que lo cubren; con número par,
    media de los dos valores centrales. No depende del orden de las ventanas.
    """
    stack, count = _gather(grid, patch_outputs)
    lo = ((count - 1) // 2)[None]
    hi = (count // 2)[None]
    a = np.take_along_axis(stack, lo, axis=0)[0]
    b = np.take_along_axis(stack, hi, axis=0)[0]
    return ((a + b) / 2.0).astype(np.float32)


def mean_blend(grid: PatchGrid, patch_outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Media aritmética por vóxel; se suma en orden creciente para no depender del orden."""
    stack, count = _gather(grid, patch_outputs)
    total = np.zeros(grid.volume_shape, dtype=np.float64)
    for k in range(stack.shape[0]):
        layer = stack[k]
        total += np.where(np.isfinite(layer), layer, 0.0)
    return (total / count).astype(np.float32)


BLENDERS = {"median": median_blend, "mean": mean_blend}


@dataclass(frozen=True)
class PatchPair:
    source: np.ndarray
    target: np.ndarray
    labels: Optional[np.ndarray]
    start: Tuple[int, int, int]


def sample_training_patches(pair: VolumePair, patch_size: Sequence[int], n: int, seed: int,
                            fg_bias: float = 0.5) -> List[PatchPair]:
    """
    Muestrea n parches alineados. Los primeros ceil(fg_bias * n) se centran en
    un vóxel etiquetado elegido al azar (la ventana se ajusta al borde si hace
    falta, y siempre lo contiene); el resto son uniformes.

    Args:
        pair: Par con etiquetas opcionales
        patch_size: Tamaño del parche
        n: Número de parches
        seed: Semilla
        fg_bias: Fracción mínima de parches con foreground, en [0, 1]

    Returns:
        Lista de PatchPair
    """
    shape = np.asarray(pair.source.shape)
    patch = np.asarray([int(p) for p in patch_size])
    if np.any(patch > shape):
        raise AFPError(
            ErrorCode.PATCH_TOO_LARGE,
            f"El parche {tuple(patch)} no cabe en el volumen {tuple(shape)}",
        )
    if not 0.0 <= fg_bias <= 1.0:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, f"fg_bias debe estar en [0, 1], recibido {fg_bias}")

    rng = np.random.Generator(np.random.Philox(int(seed)))
    max_start = shape - patch
    fg_voxels = np.argwhere(pair.labels.labels > 0) if pair.labels is not None else np.empty((0, 3), int)
    n_fg = int(math.ceil(fg_bias * n - 1e-9))
    if n_fg and not len(fg_voxels):
        logger.warning("Caso %s sin foreground: muestreo uniforme", pair.case_id)
        n_fg = 0

    patches = []
    for i in range(n):
        if i < n_fg:
            center = fg_voxels[int(rng.integers(0, len(fg_voxels)))]
            start = np.clip(center - patch // 2, 0, max_start)
        else:
            start = np.array([int(rng.integers(0, m + 1)) for m in max_start])
        region = tuple(slice(int(s), int(s + p)) for s, p in zip(start, patch))
        patches.append(PatchPair(
            source=pair.source.data[region],
            target=pair.target.data[region],
            labels=pair.labels.labels[region] if pair.labels is not None else None,
            start=tuple(int(s) for s in start),
        ))
    return patches
