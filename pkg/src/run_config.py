"""
RunConfig: documento JSON con toda la configuración de una ejecución.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from src.errors import AFPError, ErrorCode
from src.losses import AFPReduction
from src.phantom import PhantomSpec
from src.preprocess import PreprocessConfig
from src.seg_net import FeatureTapConfig, SegTrainOptions, UNetConfig
from src.synth_net import TrainMode, TrainPlan, TranslatorConfig, plan_for_mode

logger = logging.getLogger(__name__)

MAE_UNITS = ("normalized", "denormalized")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "output"

    @classmethod
    def from_dict(cls, data: Dict) -> "PathsConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


@dataclass
class DatasetConfig:
    n_cases: int = 20
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    workers: int = 1

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if self.n_cases < 0 or self.workers < 1:
            raise AFPError(ErrorCode.CONFIG_INVALID, f"dataset inválido: n_cases={self.n_cases}, workers={self.workers}")

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        return {"n_cases": self.n_cases, "split": list(self.split), "workers": self.workers}


@dataclass
class SynthTrainingConfig:
    mode: TrainMode = TrainMode.L1_THEN_AFP
    epochs: int = 10
    # Épocas del refinamiento en L1_THEN_AFP (por defecto = epochs)
    stage2_epochs: Optional[int] = None
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    batch_size: int = 2
    patches_per_case: int = 4
    fg_bias: float = 0.5
    afp_layer_weights: Optional[List[float]] = None
    afp_reduction: AFPReduction = AFPReduction.MEAN_PER_LAYER
    segmenter_checkpoint: Optional[str] = None

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        self.afp_reduction = AFPReduction(self.afp_reduction)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.epochs < 0 or (self.stage2_epochs is not None and self.stage2_epochs < 0):
            raise AFPError(ErrorCode.CONFIG_INVALID, "El número de épocas debe ser >= 0")

    def to_plan(self, seed: int) -> TrainPlan:
        plan = plan_for_mode(
            self.mode, self.epochs, self.stage2_epochs,
            patch_size=self.patch_size, batch_size=self.batch_size,
            patches_per_case=self.patches_per_case, fg_bias=self.fg_bias, seed=seed,
        )
        for _, stage in plan.stages:
            if stage.loss.w_afp > 0:
                stage.loss = dataclasses.replace(stage.loss, afp_layer_weights=self.afp_layer_weights,
                                                 afp_reduction=self.afp_reduction)
        return plan

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthTrainingConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = dataclasses.asdict(self)
        out["mode"] = self.mode.value
        out["afp_reduction"] = self.afp_reduction.value
        out["patch_size"] = list(self.patch_size)
        return out


@dataclass
class SynthesisConfig:
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    tiling: float = 0.5
    blend: str = "median"

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.blend not in ("median", "mean"):
            raise AFPError(ErrorCode.CONFIG_INVALID, f"blend debe ser 'median' o 'mean', recibido {self.blend!r}")
        if not 0.0 < self.tiling < 1.0:
            raise AFPError(ErrorCode.CONFIG_INVALID, f"tiling debe estar en (0, 1), recibido {self.tiling}")

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthesisConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        return {"patch_size": list(self.patch_size), "tiling": self.tiling, "blend": self.blend}


@dataclass
class MetricsConfig:
    tolerance_mm: Optional[float] = None
    # Preset de tolerancia ("lung" o "pelvis"); se ignora si hay tolerance_mm
    region: Optional[str] = None
    labels: Optional[List[int]] = None
    mae_units: str = "normalized"
    ssim_window: int = 7
    segmenter_patch_size: Optional[Tuple[int, int, int]] = (32, 32, 32)
    workers: int = 1

    def __post_init__(self):
        if self.segmenter_patch_size is not None:
            self.segmenter_patch_size = tuple(int(p) for p in self.segmenter_patch_size)
        if self.mae_units not in MAE_UNITS:
            raise AFPError(ErrorCode.CONFIG_INVALID, f"mae_units debe ser uno de {MAE_UNITS}")
        if self.tolerance_mm is not None and self.tolerance_mm < 0:
            raise AFPError(ErrorCode.CONFIG_INVALID, f"tolerance_mm debe ser >= 0, recibido {self.tolerance_mm}")

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricsConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = dataclasses.asdict(self)
        if self.segmenter_patch_size is not None:
            out["segmenter_patch_size"] = list(self.segmenter_patch_size)
        return out


SECTIONS = {
    "paths": PathsConfig,
    "preprocess": PreprocessConfig,
    "phantom": PhantomSpec,
    "dataset": DatasetConfig,
    "segmenter": UNetConfig,
    "segmenter_training": SegTrainOptions,
    "translator": TranslatorConfig,
    "taps": FeatureTapConfig,
    "training": SynthTrainingConfig,
    "synthesis": SynthesisConfig,
    "metrics": MetricsConfig,
}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    segmenter: UNetConfig = field(default_factory=UNetConfig)
    segmenter_training: SegTrainOptions = field(default_factory=SegTrainOptions)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    taps: FeatureTapConfig = field(default_factory=FeatureTapConfig)
    training: SynthTrainingConfig = field(default_factory=SynthTrainingConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        """
        Construye la configuración validando cada sección.
        Las claves desconocidas son un error (CONFIG_INVALID).
        """
        if not isinstance(data, dict):
            raise AFPError(ErrorCode.CONFIG_INVALID, "La configuración debe ser un objeto JSON")
        unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
        if unknown:
            raise AFPError(
                ErrorCode.CONFIG_INVALID,
                f"Secciones desconocidas: {', '.join(unknown)}",
                suggestion="Usa --print-config para ver el documento completo con valores por defecto",
            )
        kwargs = {"seed": int(data.get("seed", 0))}
        for name, section_cls in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise AFPError(ErrorCode.CONFIG_INVALID, f"La sección {name!r} debe ser un objeto")
            known = {f.name for f in dataclasses.fields(section_cls)}
            extra = sorted(set(section) - known)
            if extra:
                raise AFPError(
                    ErrorCode.CONFIG_INVALID,
                    f"Claves desconocidas en {name!r}: {', '.join(extra)}",
                    suggestion=f"Claves válidas: {', '.join(sorted(known))}",
                )
            try:
                kwargs[name] = section_cls.from_dict(section)
            except (TypeError, ValueError) as e:
                if isinstance(e, AFPError):
                    raise
                raise AFPError(ErrorCode.CONFIG_INVALID, f"Sección {name!r} inválida: {e}")
        return cls(**kwargs)

    def to_dict(self) -> Dict:
        out = {name: getattr(self, name).to_dict() for name in SECTIONS}
        out["seed"] = self.seed
        return out

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None,
                       mode: Optional[str] = None) -> "RunConfig":
        """Aplica los flags del CLI sobre una copia validada."""
        data = self.to_dict()
        if seed is not None:
            data["seed"] = int(seed)
        if out_dir is not None:
            data["paths"]["out_dir"] = str(out_dir)
        if mode is not None:
            data["training"]["mode"] = mode
        return RunConfig.from_dict(data)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 del JSON canónico (claves ordenadas) de la configuración efectiva."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Carga un RunConfig desde JSON; sin ruta devuelve los valores por defecto."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise AFPError(ErrorCode.CONFIG_INVALID, f"No existe el fichero de configuración: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise AFPError(ErrorCode.CONFIG_INVALID, f"{path}: JSON inválido ({e})")
    return RunConfig.from_dict(data)


def dump_run_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
