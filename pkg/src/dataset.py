"""
Datasets en disco: un directorio por caso (mr, ct, labels en RAW_JSON)
y un manifest.json con ids, semillas, rutas y partición train/val/test.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from src.errors import AFPError, ErrorCode
from src.preprocess import IntensityStats
from src.volume_io import VolumePair, load_labels, load_volume, save_labels, save_volume

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")

PathLike = Union[str, Path]


def write_manifest(data: Dict, out_dir: PathLike) -> Path:
    path = Path(out_dir) / MANIFEST
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudo escribir {path}: {e}")
    return path


def load_manifest(data_dir: PathLike) -> Dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise AFPError(
            ErrorCode.DATASET_MISSING,
            f"No hay dataset en {data_dir} (falta {MANIFEST})",
            suggestion="Genera uno con el subcomando phantom-gen o indica --data",
        )
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise AFPError(ErrorCode.UNREADABLE_FILE, f"No se pudo leer {path}: {e}")


def write_dataset(pairs: Sequence[VolumePair], out_dir: PathLike, splits: Dict[str, List[str]],
                  extra: Dict, case_info: Optional[Dict[str, Dict]] = None) -> List[Path]:
    """
    Escribe los casos y el manifest. extra (hash de config, semilla...) se
    guarda en cada sidecar y en el manifest.

    Returns:
        Lista de ficheros escritos (datos, sidecars y manifest)
    """
    out_dir = Path(out_dir)
    split_of = {case_id: name for name, ids in splits.items() for case_id in ids}
    cases, written = [], []
    for pair in pairs:
        case_dir = out_dir / "cases" / pair.case_id
        files = {
            "mr": save_volume(pair.source, case_dir / "mr", extra=extra),
            "ct": save_volume(pair.target, case_dir / "ct", extra=extra),
        }
        if pair.labels is not None:
            files["labels"] = save_labels(pair.labels, case_dir / "labels", extra=extra)
        for p in files.values():
            written += [p, p.with_suffix(".json")]
        entry = {
            "case_id": pair.case_id,
            "split": split_of.get(pair.case_id),
            "files": {k: str(p.relative_to(out_dir).with_suffix("")) for k, p in files.items()},
        }
        entry.update((case_info or {}).get(pair.case_id, {}))
        cases.append(entry)
    manifest = dict(extra)
    manifest.update({"n_cases": len(cases), "cases": cases, "splits": {k: list(v) for k, v in splits.items()}})
    written.append(write_manifest(manifest, out_dir))
    logger.info("Dataset de %d casos escrito en %s", len(cases), out_dir)
    return written


def load_dataset(data_dir: PathLike, split: Optional[str] = None) -> List[VolumePair]:
    """Carga los casos del manifest (opcionalmente solo una partición), en orden de manifest."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    pairs = []
    for entry in manifest.get("cases", []):
        if split is not None and entry.get("split") != split:
            continue
        files = entry["files"]
        labels = load_labels(data_dir / files["labels"]) if "labels" in files else None
        pairs.append(VolumePair(
            load_volume(data_dir / files["mr"]),
            load_volume(data_dir / files["ct"]),
            labels,
            entry["case_id"],
        ))
    return pairs


def load_stats(data_dir: PathLike) -> Dict[str, IntensityStats]:
    """Estadísticas de normalización del CT por caso (si el dataset está preprocesado)."""
    stats = {}
    for entry in load_manifest(data_dir).get("cases", []):
        if "stats" in entry:
            stats[entry["case_id"]] = IntensityStats.from_dict(entry["stats"]["target"])
    return stats
