"""
Generación procedural de pares pseudo-MR / pseudo-CT alineados con etiquetas:
árboles tubulares finos (vías aéreas), blobs (órganos) y ejes (huesos).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.errors import AFPError, ErrorCode
from src.volume_io import LabelVolume, Modality, Volume, VolumePair

logger = logging.getLogger(__name__)

BACKGROUND, TUBE, BLOB, SHAFT = 0, 1, 2, 3
LABEL_NAMES = {TUBE: "tube", BLOB: "blob", SHAFT: "shaft"}

# Estructura -> (media MR, media CT). El tubo casi no contrasta en MR y mucho en CT.
DEFAULT_INTENSITIES = {
    "background": (0.0, -0.5),
    "tube": (0.1, 1.5),
    "blob": (0.8, 0.3),
    "shaft": (-0.6, 1.0),
}

CHILD_RADIUS_RATIO = 0.78
CHILD_LENGTH_RATIO = 0.8
BRANCH_ANGLE_DEG = 35.0
ROOT_LENGTH_FRACTION = 0.55
MIN_SEGMENT_LENGTH = 3.0
MIN_TREE_SIZE = 32
# Radio mínimo de la bola de unión: cubre los vóxeles frontera de ambos segmentos
JOINT_MIN_RADIUS = 1.75


@dataclass
class PhantomSpec:
    size: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    tree_depth: int = 3
    tube_radius_range: Tuple[float, float] = (1.0, 2.5)
    n_blobs: int = 2
    n_shafts: int = 1
    noise_sigma_mr: float = 0.05
    noise_sigma_ct: float = 0.05
    intensity_table: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.tube_radius_range = tuple(float(r) for r in self.tube_radius_range)
        self.intensity_table = {k: tuple(float(x) for x in v) for k, v in self.intensity_table.items()}
        problems = []
        if len(self.size) != 3 or min(self.size) < MIN_TREE_SIZE:
            problems.append(f"size debe ser >= {MIN_TREE_SIZE} por eje, recibido {self.size}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            problems.append(f"spacing debe ser > 0, recibido {self.spacing}")
        if self.tree_depth < 1:
            problems.append(f"tree_depth debe ser >= 1, recibido {self.tree_depth}")
        r_min, r_max = self.tube_radius_range
        if r_min < 1.0 or r_max < r_min:
            problems.append(f"tube_radius_range inválido: {self.tube_radius_range}")
        if self.n_blobs < 0 or self.n_shafts < 0:
            problems.append("n_blobs y n_shafts deben ser >= 0")
        if self.noise_sigma_mr < 0 or self.noise_sigma_ct < 0:
            problems.append("Las desviaciones de ruido deben ser >= 0")
        missing = sorted(set(DEFAULT_INTENSITIES) - set(self.intensity_table))
        if missing:
            problems.append(f"intensity_table sin entradas para: {', '.join(missing)}")
        if problems:
            raise AFPError(ErrorCode.SPEC_INVALID, "PhantomSpec inválido:\n  - " + "\n  - ".join(problems))

    @classmethod
    def from_dict(cls, data: Dict) -> "PhantomSpec":
        return cls(**data)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["size"] = list(self.size)
        out["spacing"] = list(self.spacing)
        out["tube_radius_range"] = list(self.tube_radius_range)
        out["intensity_table"] = {k: list(v) for k, v in self.intensity_table.items()}
        return out


@dataclass(frozen=True)
class TubeSegment:
    start: Tuple[float, float, float]
    end: Tuple[float, float, float]
    radius: float
    generation: int

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))


def make_rng(seed: int) -> np.random.Generator:
    """Generador basado en contador (Philox) para reproducibilidad exacta."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _orthonormal_basis(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


def _clip_to_box(start: np.ndarray, direction: np.ndarray, length: float,
                 low: np.ndarray, high: np.ndarray) -> float:
    """Longitud máxima para que start + t*direction siga dentro de [low, high]."""
    t_max = length
    for axis in range(3):
        d = direction[axis]
        if d > 1e-12:
            t_max = min(t_max, (high[axis] - start[axis]) / d)
        elif d < -1e-12:
            t_max = min(t_max, (low[axis] - start[axis]) / d)
    return max(0.0, t_max)


def generate_tube_tree(spec: PhantomSpec, rng: Optional[np.random.Generator] = None) -> List[TubeSegment]:
    """
    Árbol de bifurcaciones recursivo: cada hijo tiene radio = padre * 0.78
    y longitud = padre * 0.8, con azimut aleatorio. Todos los segmentos quedan
    dentro del volumen, así el árbol es una sola componente conexa.

    Returns:
        Lista de segmentos en orden de generación (el primero es la raíz)
    """
    rng = rng if rng is not None else make_rng(spec.seed)
    size = np.asarray(spec.size, dtype=np.float64)
    r_min, r_max = spec.tube_radius_range
    margin = r_max + 1.0
    low = np.full(3, margin)
    high = size - 1.0 - margin

    start = np.array([np.ceil(margin), size[1] // 2, size[2] // 2])
    direction = np.array([1.0, 0.0, 0.0])
    root_length = _clip_to_box(start, direction, ROOT_LENGTH_FRACTION * size[0], low, high)

    segments: List[TubeSegment] = []
    pending = [(start, direction, root_length, r_max, 1)]
    half_angle = np.deg2rad(BRANCH_ANGLE_DEG)
    while pending:
        p0, d, length, radius, generation = pending.pop(0)
        p1 = p0 + d * length
        segments.append(TubeSegment(tuple(p0), tuple(p1), radius, generation))
        if generation >= spec.tree_depth:
            continue
        u, w = _orthonormal_basis(d)
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        child_radius = max(r_min, radius * CHILD_RADIUS_RATIO)
        for phi in (azimuth, azimuth + np.pi):
            angle = half_angle * rng.uniform(0.8, 1.2)
            child_dir = np.cos(angle) * d + np.sin(angle) * (np.cos(phi) * u + np.sin(phi) * w)
            child_dir /= np.linalg.norm(child_dir)
            child_length = _clip_to_box(p1, child_dir, length * CHILD_LENGTH_RATIO, low, high)
            if child_length >= MIN_SEGMENT_LENGTH:
                pending.append((p1, child_dir, child_length, child_radius, generation + 1))
    return segments


def _grid(shape: Sequence[int]) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1)


def rasterize_segment(coords: np.ndarray, segment: TubeSegment, with_joint: bool) -> np.ndarray:
    """
    Vóxeles cuyo centro está a distancia <= radio del eje del segmento
    (cilindro sin tapas). Con with_joint se añade una bola en el punto inicial.
    """
    p0 = np.asarray(segment.start)
    axis = np.subtract(segment.end, segment.start)
    length = np.linalg.norm(axis)
    axis = axis / length
    rel = coords - p0
    t = rel @ axis
    radial = np.linalg.norm(rel - t[..., None] * axis, axis=-1)
    mask = (t >= 0.0) & (t <= length) & (radial <= segment.radius)
    if with_joint:
        mask |= np.linalg.norm(rel, axis=-1) <= max(segment.radius, JOINT_MIN_RADIUS)
    return mask


def _paint_blobs(coords: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    size = np.asarray(spec.size, dtype=np.float64)
    mask = np.zeros(spec.size, dtype=bool)
    for _ in range(spec.n_blobs):
        radii = size * rng.uniform(0.07, 0.13, size=3)
        center = rng.uniform(radii, size - 1 - radii)
        mask |= np.sum(((coords - center) / radii) ** 2, axis=-1) <= 1.0
    return mask


def _paint_shafts(coords: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    size = np.asarray(spec.size, dtype=np.float64)
    mask = np.zeros(spec.size, dtype=bool)
    for _ in range(spec.n_shafts):
        # Eje aproximadamente paralelo a y o x que atraviesa todo el volumen
        along = 1 + int(rng.integers(0, 2))
        radius = float(min(size) * rng.uniform(0.05, 0.07))
        point = rng.uniform(radius + 1, size - radius - 2)
        direction = np.zeros(3)
        direction[along] = 1.0
        tilt = np.zeros(3)
        tilt[0 if along != 0 else 2] = rng.uniform(-0.15, 0.15)
        direction = (direction + tilt) / np.linalg.norm(direction + tilt)
        rel = coords - point
        t = rel @ direction
        mask |= np.linalg.norm(rel - t[..., None] * direction, axis=-1) <= radius
    return mask


def generate_phantom(spec: PhantomSpec, case_id: str = "") -> VolumePair:
    """
    Genera un par MR/CT con etiquetas {0 fondo, 1 tubo, 2 blob, 3 eje}.

    Determinista dado spec.seed. Intensidades = media por clase + ruido gaussiano.

    Args:
        spec: Parámetros del phantom
        case_id: Identificador del caso

    Returns:
        VolumePair alineado por construcción
    """
    rng = make_rng(spec.seed)
    coords = _grid(spec.size)

    labels = np.zeros(spec.size, dtype=np.int32)
    labels[_paint_blobs(coords, spec, rng)] = BLOB
    labels[_paint_shafts(coords, spec, rng)] = SHAFT

    tube = np.zeros(spec.size, dtype=bool)
    for i, segment in enumerate(generate_tube_tree(spec, rng)):
        tube |= rasterize_segment(coords, segment, with_joint=i > 0)
    labels[tube] = TUBE

    names = ["background", "tube", "blob", "shaft"]
    mr_means = np.array([spec.intensity_table[n][0] for n in names], dtype=np.float32)
    ct_means = np.array([spec.intensity_table[n][1] for n in names], dtype=np.float32)
    noise_mr = rng.standard_normal(spec.size).astype(np.float32) * np.float32(spec.noise_sigma_mr)
    noise_ct = rng.standard_normal(spec.size).astype(np.float32) * np.float32(spec.noise_sigma_ct)
    source = mr_means[labels] + noise_mr
    target = ct_means[labels] + noise_ct

    return VolumePair(
        Volume(source, spec.spacing, modality=Modality.MR),
        Volume(target, spec.spacing, modality=Modality.CT),
        LabelVolume(labels, spec.spacing, label_names=LABEL_NAMES),
        case_id,
    )


def case_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 100_003 + index


def generate_dataset(spec: PhantomSpec, n_cases: int, workers: int = 1) -> List[VolumePair]:
    """
    Genera n_cases phantoms con semillas derivadas de spec.seed.
    El paralelismo no cambia el resultado.
    """
    specs = []
    for i in range(n_cases):
        data = spec.to_dict()
        data["seed"] = case_seed(spec.seed, i)
        specs.append((PhantomSpec.from_dict(data), f"case_{i:03d}"))
    if workers > 1 and n_cases > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda item: generate_phantom(*item), specs))
    return [generate_phantom(s, cid) for s, cid in specs]


def split_dataset(pairs: Sequence, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> Tuple[list, list, list]:
    """
    División determinista y disjunta en train/val/test.

    Returns:
        Tupla: (train, val, test)
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise AFPError(
            ErrorCode.BAD_FRACTIONS,
            f"Las fracciones deben ser 3 valores >= 0 que sumen 1, recibido {fractions}",
        )
    n = len(pairs)
    n_train = min(n, int(round(n * fractions[0])))
    n_val = min(n - n_train, int(round(n * fractions[1])))
    order = make_rng(seed).permutation(n)
    items = [pairs[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


def connected_components(mask: np.ndarray) -> int:
    """Número de componentes 26-conexas."""
    _, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    return int(n)
