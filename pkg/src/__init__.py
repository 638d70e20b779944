"""
Pipeline AFP de traducción MR -> CT 3D con pérdida de características anatómicas
"""
