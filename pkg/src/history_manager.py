"""
Módulo para gestionar el historial de ejecuciones del pipeline
Cada comando del CLI añade un registro a <out_dir>/history/history.json
"""

import hashlib
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)

HISTORY_FILE = "history.json"

PathLike = Union[str, Path]


def get_history_path(out_dir: PathLike) -> str:
    """Obtiene la ruta del archivo de historial (crea el directorio si falta)"""
    history_dir = os.path.join(str(out_dir), 'history')
    os.makedirs(history_dir, exist_ok=True)
    return os.path.join(history_dir, HISTORY_FILE)


def load_history(out_dir: PathLike) -> List[Dict]:
    """Carga el historial; si no existe o está corrupto devuelve una lista vacía"""
    history_path = get_history_path(out_dir)
    if os.path.exists(history_path):
        try:
            with open(history_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Historial ilegible en %s: %s", history_path, e)
            return []
    return []


def _save_history(out_dir: PathLike, history: List[Dict]) -> None:
    history_path = get_history_path(out_dir)
    try:
        with open(history_path, 'w', encoding='utf-8') as f:
            json.dump(history, f, ensure_ascii=False, indent=2)
    except OSError as e:
        logger.error("Error guardando historial: %s", e)


def file_sha256(path: PathLike) -> str:
    """SHA-256 del contenido de un fichero"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def add_to_history(
    command: str,
    out_dir: PathLike,
    config_hash: str,
    seed: int,
    artifacts: Sequence[PathLike] = (),
    info: Optional[Dict] = None,
) -> Dict:
    """
    Añade un registro de ejecución al historial.

    Args:
        command: Subcomando ejecutado (phantom-gen, train-seg, ...)
        out_dir: Directorio de salida de la ejecución
        config_hash: Hash de la configuración efectiva
        seed: Semilla de la ejecución
        artifacts: Ficheros producidos (se guarda su SHA-256)
        info: Información adicional (modo, métricas, ...)

    Returns:
        Diccionario con el registro añadido
    """
    history = load_history(out_dir)
    record = {
        'id': max((r.get('id', 0) for r in history), default=0) + 1,
        'timestamp': datetime.now().isoformat(),
        'command': command,
        'config_hash': config_hash,
        'seed': seed,
        'output_dir': str(out_dir),
        'artifacts': [
            {'path': str(p), 'sha256': file_sha256(p)}
            for p in artifacts if os.path.isfile(p)
        ],
        'info': info or {},
    }
    history.append(record)
    _save_history(out_dir, history)
    return record


def get_history_by_command(*out_dirs: PathLike) -> Dict[str, List[Dict]]:
    """
    Obtiene el historial organizado por subcomando, más reciente primero.

    Admite varios directorios (p. ej. dataset y salida): los registros se
    combinan y cada uno lleva 'history_dir' con el directorio del que procede.
    Los directorios inexistentes o repetidos se ignoran.
    """
    by_command: Dict[str, List[Dict]] = {}
    seen = set()
    for out_dir in out_dirs:
        key = os.path.realpath(str(out_dir))
        if key in seen or not os.path.isdir(key):
            continue
        seen.add(key)
        for record in load_history(out_dir):
            record['history_dir'] = str(out_dir)
            by_command.setdefault(record.get('command', '?'), []).append(record)
    for records in by_command.values():
        records.sort(key=lambda r: r.get('timestamp', ''), reverse=True)
    return dict(sorted(by_command.items()))


def delete_from_history(out_dir: PathLike, record_id: int) -> bool:
    """
    Elimina un registro del historial por su ID

    Returns:
        True si se eliminó, False si no se encontró
    """
    history = load_history(out_dir)
    remaining = [r for r in history if r.get('id') != record_id]
    if len(remaining) == len(history):
        return False
    _save_history(out_dir, remaining)
    return True
