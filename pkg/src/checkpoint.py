"""
Checkpoints de modelos: pesos + configuración + huella de entrenamiento.
"""

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Union

import torch
from torch import nn

from src.errors import AFPError, ErrorCode
from src.volume_io import VolumePair

logger = logging.getLogger(__name__)


@dataclass
class TrainingFingerprint:
    dataset_hash: str
    seed: int
    epoch: int
    config_hash: str = ""


@dataclass
class ModelCheckpoint:
    kind: str
    state_dict: Dict[str, torch.Tensor]
    config: Dict
    fingerprint: TrainingFingerprint
    history: List[Dict] = field(default_factory=list)

    def metadata(self) -> Dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "fingerprint": asdict(self.fingerprint),
            "history": self.history,
        }


def snapshot(model: nn.Module) -> Dict[str, torch.Tensor]:
    """Copia independiente del state_dict."""
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def dataset_hash(pairs: Sequence[VolumePair]) -> str:
    """SHA-256 de los ids y los datos de todos los casos."""
    digest = hashlib.sha256()
    for pair in pairs:
        digest.update(pair.case_id.encode("utf-8"))
        digest.update(pair.source.data.tobytes())
        digest.update(pair.target.data.tobytes())
        if pair.labels is not None:
            digest.update(pair.labels.labels.tobytes())
    return digest.hexdigest()


def _paths(path: Union[str, Path]):
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    return base.with_name(base.name + ".pt"), base.with_name(base.name + ".json")


def save_checkpoint(ckpt: ModelCheckpoint, path: Union[str, Path]) -> Path:
    """Escribe <name>.pt (pesos y metadatos) y <name>.json (metadatos legibles)."""
    pt_path, json_path = _paths(path)
    try:
        pt_path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"state_dict": ckpt.state_dict, **copy.deepcopy(ckpt.metadata())}, pt_path)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(ckpt.metadata(), f, indent=2, sort_keys=True)
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudo escribir el checkpoint {pt_path}: {e}")
    return pt_path


def load_checkpoint(path: Union[str, Path]) -> ModelCheckpoint:
    pt_path, _ = _paths(path)
    try:
        blob = torch.load(pt_path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as e:
        raise AFPError(ErrorCode.UNREADABLE_FILE, f"No se pudo leer el checkpoint {pt_path}: {e}")
    try:
        return ModelCheckpoint(
            kind=blob["kind"],
            state_dict=blob["state_dict"],
            config=blob["config"],
            fingerprint=TrainingFingerprint(**blob["fingerprint"]),
            history=list(blob.get("history", [])),
        )
    except (KeyError, TypeError) as e:
        raise AFPError(ErrorCode.CHECKPOINT_INCOMPATIBLE, f"{pt_path}: estructura de checkpoint inválida ({e})")


def load_weights(model: nn.Module, ckpt: ModelCheckpoint) -> nn.Module:
    """Carga pesos validando nombres y formas."""
    try:
        model.load_state_dict(ckpt.state_dict, strict=True)
    except RuntimeError as e:
        raise AFPError(
            ErrorCode.CHECKPOINT_INCOMPATIBLE,
            f"Los pesos no encajan con la configuración:\n{e}",
            suggestion="Usa la misma configuración de red con la que se entrenó el checkpoint",
        )
    return model
