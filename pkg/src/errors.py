"""
Errores del pipeline AFP
"""

from enum import Enum
from typing import Optional


class ErrorCode(str, Enum):
    # Configuración (código de salida 1)
    CONFIG_INVALID = "CONFIG_INVALID"
    CONFIG_CONFLICT = "CONFIG_CONFLICT"
    SPEC_INVALID = "SPEC_INVALID"
    BAD_FRACTIONS = "BAD_FRACTIONS"
    UNKNOWN_TAP_ID = "UNKNOWN_TAP_ID"
    INVALID_ARGUMENT = "INVALID_ARGUMENT"

    # Ejecución, entrenamiento o E/S (código de salida 2)
    UNREADABLE_FILE = "UNREADABLE_FILE"
    UNWRITABLE_PATH = "UNWRITABLE_PATH"
    NON_3D_DATA = "NON_3D_DATA"
    NONFINITE_VALUES = "NONFINITE_VALUES"
    DEGENERATE_OUTPUT = "DEGENERATE_OUTPUT"
    METRIC_OUT_OF_RANGE = "METRIC_OUT_OF_RANGE"
    CONSTANT_VOLUME = "CONSTANT_VOLUME"
    EMPTY_FOREGROUND = "EMPTY_FOREGROUND"
    CONSTANT_FOREGROUND = "CONSTANT_FOREGROUND"
    SHAPE_INCOMPATIBLE = "SHAPE_INCOMPATIBLE"
    SHAPE_MISMATCH = "SHAPE_MISMATCH"
    LENGTH_MISMATCH = "LENGTH_MISMATCH"
    EXTRACTOR_NOT_FROZEN = "EXTRACTOR_NOT_FROZEN"
    FROZEN_MODEL = "FROZEN_MODEL"
    LABEL_OUT_OF_RANGE = "LABEL_OUT_OF_RANGE"
    DIVERGENCE = "DIVERGENCE"
    CHECKPOINT_INCOMPATIBLE = "CHECKPOINT_INCOMPATIBLE"
    PATCH_TOO_LARGE = "PATCH_TOO_LARGE"
    COUNT_MISMATCH = "COUNT_MISMATCH"
    MISALIGNED = "MISALIGNED"
    CASE_MISMATCH = "CASE_MISMATCH"
    DATASET_MISSING = "DATASET_MISSING"


CONFIG_ERRORS = {
    ErrorCode.CONFIG_INVALID,
    ErrorCode.CONFIG_CONFLICT,
    ErrorCode.SPEC_INVALID,
    ErrorCode.BAD_FRACTIONS,
    ErrorCode.UNKNOWN_TAP_ID,
    ErrorCode.INVALID_ARGUMENT,
}


class AFPError(ValueError):
    """
    Error con código estable. El mensaje puede ocupar varias líneas y termina
    con una sugerencia cuando la hay.
    """

    def __init__(self, code: ErrorCode, message: str, suggestion: Optional[str] = None):
        self.code = code
        self.suggestion = suggestion
        text = f"[{code.value}] {message}"
        if suggestion:
            text += f"\n\nSugerencia: {suggestion}"
        super().__init__(text)

    @property
    def is_config_error(self) -> bool:
        return self.code in CONFIG_ERRORS
