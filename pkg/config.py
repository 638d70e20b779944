"""
Configuración global del pipeline AFP (valores por defecto)
"""

import os

# Cargar variables de entorno desde .env si existe
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

# Tamaño de vóxel objetivo del remuestreo (mm, orden z,y,x)
TARGET_SPACING = (0.6, 0.6, 0.6)

# Percentiles de recorte para la normalización de CT
CT_CLIP_PERCENTILES = (0.5, 99.5)

# Regla de foreground sin máscara: vóxeles por encima de este percentil
FOREGROUND_PERCENTILE = 10.0

# Tolerancias NSD por región (mm)
NSD_TOLERANCE_MM = {
    "lung": 1.2,
    "pelvis": 2.0,
}

# Sin tolerancia configurada: el doble del tamaño de vóxel
NSD_VOXEL_FACTOR = 2.0

# Solapamiento de parches (0.5 = 50%)
DEFAULT_TILING = 0.5

# Learning rates por etapa (etapa 1 global, etapa 2 refinamiento)
STAGE1_LR = 1e-3
STAGE2_LR = 1e-4

# Códigos de salida del CLI
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2

# Límite de hilos (AFP_NUM_THREADS); 0 = sin límite
NUM_THREADS = int(os.environ.get("AFP_NUM_THREADS", "0") or 0)
