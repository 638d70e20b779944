"""
Módulo de volúmenes 3D con geometría (spacing/origin) y lectura/escritura en disco.

Todos los arrays se indexan en orden (z, y, x).
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import nibabel as nib
import numpy as np

from src.errors import AFPError, ErrorCode

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]
PathLike = Union[str, Path]


class Modality(str, Enum):
    MR = "MR"
    CT = "CT"
    SYNTH_CT = "SYNTH_CT"
    OTHER = "OTHER"


class VolumeFormat(str, Enum):
    NIFTI1 = "NIFTI1"
    RAW_JSON = "RAW_JSON"


def _as_triple(values, name: str) -> Triple:
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, f"{name} debe tener 3 componentes, tiene {len(values)}")
    return values


def _frozen_copy(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Volume:
    """Volumen escalar 3D en float32 con geometría física."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    modality: Modality = Modality.OTHER

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise AFPError(ErrorCode.NON_3D_DATA, f"Se esperaba un array 3D, recibido ndim={data.ndim}")
        if min(data.shape) < 1:
            raise AFPError(ErrorCode.DEGENERATE_OUTPUT, f"Forma inválida {data.shape}")
        n_bad = int(np.count_nonzero(~np.isfinite(data)))
        if n_bad:
            raise AFPError(ErrorCode.NONFINITE_VALUES, f"{n_bad} vóxeles con NaN/Inf")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise AFPError(ErrorCode.INVALID_ARGUMENT, f"spacing debe ser > 0, recibido {spacing}")
        object.__setattr__(self, "data", _frozen_copy(data, np.float32))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, modality: Optional[Modality] = None) -> "Volume":
        """Nuevo volumen con la misma geometría."""
        return Volume(data, self.spacing, self.origin, modality or self.modality)


@dataclass(frozen=True)
class LabelVolume:
    """Etiquetas enteras no negativas; 0 es fondo."""

    labels: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    label_names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise AFPError(ErrorCode.NON_3D_DATA, f"Se esperaba un array 3D, recibido ndim={labels.ndim}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise AFPError(ErrorCode.INVALID_ARGUMENT, "Las etiquetas deben ser enteras")
        if labels.size and labels.min() < 0:
            raise AFPError(ErrorCode.INVALID_ARGUMENT, "Las etiquetas deben ser no negativas")
        names = {int(k): str(v) for k, v in dict(self.label_names).items()}
        present = set(np.unique(labels).astype(int).tolist()) - {0}
        unknown = sorted(present - set(names))
        if unknown:
            raise AFPError(
                ErrorCode.INVALID_ARGUMENT,
                f"Etiquetas sin nombre declarado: {unknown}",
                suggestion="Añade las etiquetas a label_names",
            )
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise AFPError(ErrorCode.INVALID_ARGUMENT, f"spacing debe ser > 0, recibido {spacing}")
        object.__setattr__(self, "labels", _frozen_copy(labels, np.int32))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        object.__setattr__(self, "label_names", names)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def with_labels(self, labels: np.ndarray, label_names: Optional[Dict[int, str]] = None) -> "LabelVolume":
        return LabelVolume(labels, self.spacing, self.origin, self.label_names if label_names is None else label_names)


def check_alignment(a, b, tol: float = 1e-6) -> bool:
    """
    Comprueba que dos volúmenes (o volúmenes de etiquetas) comparten geometría.

    Args:
        a, b: Volume o LabelVolume
        tol: Tolerancia por componente para spacing y origin (mm)

    Returns:
        True si las formas coinciden y spacing/origin difieren como mucho tol
    """
    if tuple(a.shape) != tuple(b.shape):
        return False
    spacing_diff = np.abs(np.subtract(a.spacing, b.spacing))
    origin_diff = np.abs(np.subtract(a.origin, b.origin))
    return bool(np.all(spacing_diff <= tol) and np.all(origin_diff <= tol))


@dataclass(frozen=True)
class VolumePair:
    """Par alineado MR (source) / CT (target) con etiquetas opcionales."""

    source: Volume
    target: Volume
    labels: Optional[LabelVolume] = None
    case_id: str = ""

    def __post_init__(self):
        if not check_alignment(self.source, self.target):
            raise AFPError(ErrorCode.MISALIGNED, f"Caso {self.case_id!r}: source y target no están alineados")
        if self.labels is not None and not check_alignment(self.source, self.labels):
            raise AFPError(ErrorCode.MISALIGNED, f"Caso {self.case_id!r}: las etiquetas no están alineadas")


# ---------------------------------------------------------------------------
# Lectura / escritura
# ---------------------------------------------------------------------------

def infer_format(path: PathLike) -> VolumeFormat:
    name = str(path).lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return VolumeFormat.NIFTI1
    return VolumeFormat.RAW_JSON


def _raw_paths(path: PathLike) -> Tuple[Path, Path]:
    """Rutas <name>.raw y <name>.json a partir de cualquiera de las dos (o del nombre base)."""
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".raw"), path.with_name(path.name + ".json")


def _affine(spacing: Triple, origin: Triple) -> np.ndarray:
    # NIfTI trabaja en (x, y, z)
    affine = np.diag([spacing[2], spacing[1], spacing[0], 1.0])
    affine[:3, 3] = [origin[2], origin[1], origin[0]]
    return affine


def _read_raw(path: PathLike):
    raw_path, json_path = _raw_paths(path)
    try:
        with open(json_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        shape = tuple(int(s) for s in meta["shape"])
        dtype = np.dtype(meta.get("dtype", "float32")).newbyteorder("<")
        array = np.fromfile(raw_path, dtype=dtype)
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise AFPError(ErrorCode.UNREADABLE_FILE, f"No se pudo leer {raw_path}: {e}")
    if len(shape) != 3:
        raise AFPError(ErrorCode.NON_3D_DATA, f"{json_path}: shape {shape} no es 3D")
    if array.size != int(np.prod(shape)):
        raise AFPError(
            ErrorCode.UNREADABLE_FILE,
            f"{raw_path}: {array.size} valores, se esperaban {int(np.prod(shape))} para shape {shape}",
        )
    return array.reshape(shape), meta


def _read_nifti(path: PathLike):
    try:
        img = nib.load(str(path))
        header = img.header
        raw = np.asanyarray(img.dataobj)
    except Exception as e:
        raise AFPError(ErrorCode.UNREADABLE_FILE, f"No se pudo leer {path}: {e}")
    if raw.ndim != 3:
        raise AFPError(ErrorCode.NON_3D_DATA, f"{path}: la cabecera declara {raw.ndim} dimensiones")
    zooms = header.get_zooms()[:3]
    origin_xyz = img.affine[:3, 3]
    descrip = header["descrip"].tobytes().decode("ascii", errors="ignore").strip("\x00 ")
    meta = {
        "spacing": [float(zooms[2]), float(zooms[1]), float(zooms[0])],
        "origin": [float(origin_xyz[2]), float(origin_xyz[1]), float(origin_xyz[0])],
    }
    if descrip.startswith("modality="):
        meta["modality"] = descrip.split("=", 1)[1]
    # (x, y, z) -> (z, y, x)
    return np.transpose(raw, (2, 1, 0)), meta


def load_volume(path: PathLike, format: Optional[VolumeFormat] = None) -> Volume:
    """
    Lee un volumen escalar desde NIfTI-1 o RAW_JSON.

    Args:
        path: Ruta al .nii/.nii.gz, o al .raw/.json (o nombre base) en RAW_JSON
        format: Formato; si es None se deduce de la extensión

    Returns:
        Volume en float32 con spacing tomado de la cabecera
    """
    fmt = VolumeFormat(format) if format else infer_format(path)
    array, meta = _read_nifti(path) if fmt == VolumeFormat.NIFTI1 else _read_raw(path)
    array = np.asarray(array, dtype=np.float32)
    n_bad = int(np.count_nonzero(~np.isfinite(array)))
    if n_bad:
        raise AFPError(
            ErrorCode.NONFINITE_VALUES,
            f"{path}: {n_bad} vóxeles con NaN/Inf",
            suggestion="Limpia el volumen antes de usarlo; no se enmascaran valores no finitos",
        )
    return Volume(
        array,
        spacing=meta.get("spacing", (1.0, 1.0, 1.0)),
        origin=meta.get("origin", (0.0, 0.0, 0.0)),
        modality=meta.get("modality", Modality.OTHER),
    )


def load_labels(path: PathLike, format: Optional[VolumeFormat] = None) -> LabelVolume:
    """Lee un LabelVolume (RAW_JSON con dtype int32 o NIfTI entero)."""
    fmt = VolumeFormat(format) if format else infer_format(path)
    array, meta = _read_nifti(path) if fmt == VolumeFormat.NIFTI1 else _read_raw(path)
    array = np.rint(np.asarray(array, dtype=np.float64)).astype(np.int32)
    names = meta.get("label_names")
    if names is None:
        names = {int(v): f"label_{int(v)}" for v in np.unique(array) if v != 0}
    return LabelVolume(
        array,
        spacing=meta.get("spacing", (1.0, 1.0, 1.0)),
        origin=meta.get("origin", (0.0, 0.0, 0.0)),
        label_names={int(k): v for k, v in names.items()},
    )


def _write_raw(array: np.ndarray, meta: Dict, path: PathLike) -> Path:
    raw_path, json_path = _raw_paths(path)
    try:
        raw_path.parent.mkdir(parents=True, exist_ok=True)
        array.astype(array.dtype.newbyteorder("<"), copy=False).tofile(raw_path)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudo escribir {raw_path}: {e}")
    return raw_path


def _write_nifti(array: np.ndarray, spacing: Triple, origin: Triple, descrip: str, path: PathLike) -> Path:
    path = Path(path)
    img = nib.Nifti1Image(np.transpose(array, (2, 1, 0)), _affine(spacing, origin))
    img.header.set_zooms((spacing[2], spacing[1], spacing[0]))
    img.header["descrip"] = descrip[:79]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        nib.save(img, str(path))
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudo escribir {path}: {e}")
    return path


def save_volume(v: Volume, path: PathLike, format: Optional[VolumeFormat] = None,
                extra: Optional[Dict] = None) -> Path:
    """
    Escribe un volumen. En RAW_JSON la lectura posterior es bit a bit idéntica.

    Args:
        v: Volumen a guardar
        path: Ruta destino
        format: Formato; si es None se deduce de la extensión
        extra: Metadatos adicionales para el sidecar JSON (hash de config, semilla...)

    Returns:
        Ruta del fichero de datos escrito
    """
    fmt = VolumeFormat(format) if format else infer_format(path)
    if fmt == VolumeFormat.NIFTI1:
        return _write_nifti(v.data, v.spacing, v.origin, f"modality={v.modality.value}", path)
    meta = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "modality": v.modality.value,
        "dtype": "float32",
    }
    if extra:
        meta.update(extra)
    return _write_raw(v.data, meta, path)


def save_labels(lv: LabelVolume, path: PathLike, format: Optional[VolumeFormat] = None,
                extra: Optional[Dict] = None) -> Path:
    fmt = VolumeFormat(format) if format else infer_format(path)
    if fmt == VolumeFormat.NIFTI1:
        return _write_nifti(lv.labels.astype(np.int16), lv.spacing, lv.origin, "labels", path)
    meta = {
        "shape": list(lv.shape),
        "spacing": list(lv.spacing),
        "origin": list(lv.origin),
        "dtype": "int32",
        "label_names": {str(k): v for k, v in sorted(lv.label_names.items())},
    }
    if extra:
        meta.update(extra)
    return _write_raw(lv.labels, meta, path)
