"""
Módulo para generar los informes de ablación (Markdown, Excel y PDF)
a partir de los agregados de evaluación de varias ejecuciones
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image as PILImage, ImageDraw
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4, landscape
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import mm
from reportlab.platypus import Image, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

# Agregar el directorio padre al path para importar config
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import config

from src.errors import AFPError, ErrorCode
from src.volume_io import Volume

logger = logging.getLogger(__name__)

COLOR_HEADER = colors.HexColor('#2d3e50')
COLOR_GREY = colors.HexColor('#666666')
COLOR_ROW = colors.HexColor('#f2f2f2')

SECTION_TITLES = {
    "ablation": "Ablación (media ± std)",
    "two_stage": "Protocolo en dos etapas",
    "checkerboard": "Diagnóstico de tablero de ajedrez",
}


def format_mean_std(stat: Optional[Mapping[str, float]], decimals: int = 4) -> str:
    """Formatea un agregado como 'media ± std' (formato: 0.5801 ± 0.0592)"""
    if not stat:
        return "-"
    return f"{stat['mean']:.{decimals}f} ± {stat['std']:.{decimals}f}"


def load_aggregate(path: Union[str, Path]) -> Dict:
    """Lee un aggregate.json escrito por el comando eval"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise AFPError(ErrorCode.UNREADABLE_FILE, f"No se pudo leer el agregado {path}: {e}")


def ablation_table(runs: Mapping[str, Mapping]) -> pd.DataFrame:
    """
    Tabla de ablación: una fila por ejecución, columnas MAE, SSIM y Dice/NSD
    por etiqueta, con celdas 'media ± std'.

    Args:
        runs: Nombre de la ejecución -> agregado (aggregate.json)

    Returns:
        DataFrame indexado por ejecución
    """
    rows = []
    for name, agg in runs.items():
        row = {"run": name, "MAE": format_mean_std(agg.get("mae")), "SSIM": format_mean_std(agg.get("ssim"))}
        for label, scores in agg.get("per_label", {}).items():
            row[f"Dice {label}"] = format_mean_std(scores.get("dice"))
            row[f"NSD {label}"] = format_mean_std(scores.get("nsd"))
        rows.append(row)
    return pd.DataFrame(rows).set_index("run") if rows else pd.DataFrame()


def two_stage_table(stage1: Mapping, final: Mapping, label: str = "tube") -> pd.DataFrame:
    """Dice de la etiqueta y MAE del checkpoint de la etapa 1 frente al final"""
    rows = []
    for name, agg in (("stage1 (L1)", stage1), ("final (L1->AFP)", final)):
        dice_stat = agg.get("per_label", {}).get(label, {}).get("dice")
        rows.append({
            "checkpoint": name,
            f"Dice {label}": format_mean_std(dice_stat),
            "MAE": format_mean_std(agg.get("mae")),
        })
    delta = (final["per_label"][label]["dice"]["mean"] - stage1["per_label"][label]["dice"]["mean"]
             if label in stage1.get("per_label", {}) and label in final.get("per_label", {}) else float("nan"))
    rows.append({"checkpoint": "final - stage1", f"Dice {label}": f"{delta:+.4f}",
                 "MAE": f"{final['mae']['mean'] - stage1['mae']['mean']:+.4f}"})
    return pd.DataFrame(rows).set_index("checkpoint")


def checkerboard_table(energies: Mapping[str, float]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"decoder_mode": mode, "checkerboard_energy": f"{value:.6f}"} for mode, value in energies.items()]
    ).set_index("decoder_mode")


def render_slice_strip(volumes: Mapping[str, Volume], output_path: Union[str, Path], axis: int = 0) -> Path:
    """
    Tira de cortes centrales (MR, CT real, CT sintéticos...) en escala de grises.
    La ventana de intensidad es la del primer volumen tras el MR.
    """
    items = list(volumes.items())
    if not items:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, "No hay volúmenes para la vista previa")
    reference = items[1][1] if len(items) > 1 else items[0][1]
    low, high = np.percentile(reference.data, config.CT_CLIP_PERCENTILES)
    tiles = []
    for name, v in items:
        data = np.take(v.data, v.shape[axis] // 2, axis=axis).astype(np.float64)
        if name == items[0][0] and len(items) > 1:
            lo, hi = np.percentile(data, config.CT_CLIP_PERCENTILES)
        else:
            lo, hi = low, high
        scaled = np.clip((data - lo) / ((hi - lo) or 1.0), 0.0, 1.0)
        tile = PILImage.fromarray((scaled * 255).astype(np.uint8)).resize(
            (data.shape[1] * 3, data.shape[0] * 3), PILImage.NEAREST)
        ImageDraw.Draw(tile).text((4, 4), name, fill=255)
        tiles.append(tile)
    strip = PILImage.new("L", (sum(t.width for t in tiles) + 4 * (len(tiles) - 1), max(t.height for t in tiles)))
    x = 0
    for tile in tiles:
        strip.paste(tile, (x, 0))
        x += tile.width + 4
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    strip.save(output_path)
    return output_path


def _table_flowable(df: pd.DataFrame, index_name: str) -> Table:
    data = [[index_name] + list(df.columns)] + [[str(idx)] + [str(v) for v in row] for idx, row in df.iterrows()]
    table = Table(data, repeatRows=1)
    table.setStyle(TableStyle([
        ('BACKGROUND', (0, 0), (-1, 0), COLOR_HEADER),
        ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTNAME', (0, 1), (-1, -1), 'Helvetica'),
        ('FONTSIZE', (0, 0), (-1, -1), 7),
        ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, COLOR_ROW]),
        ('GRID', (0, 0), (-1, -1), 0.25, COLOR_GREY),
        ('ALIGN', (1, 0), (-1, -1), 'CENTER'),
    ]))
    return table


def create_report_pdf(title: str, tables: Mapping[str, pd.DataFrame], output_path: Union[str, Path],
                      images: Sequence[Union[str, Path]] = (), footer: str = "") -> Path:
    """
    Genera el PDF resumen con las tablas y las vistas previas.

    Args:
        title: Título del informe
        tables: Título de sección -> DataFrame
        output_path: Ruta del PDF
        images: PNG a incluir al final
        footer: Texto del pie (hash de configuración, semilla)
    """
    def on_page(canvas, doc):
        page_width, _ = landscape(A4)
        canvas.setStrokeColor(COLOR_GREY)
        canvas.setLineWidth(0.5)
        canvas.line(15 * mm, 12 * mm, page_width - 15 * mm, 12 * mm)
        canvas.setFont('Helvetica', 7)
        canvas.setFillColor(COLOR_GREY)
        canvas.drawString(15 * mm, 8 * mm, footer)
        canvas.drawRightString(page_width - 15 * mm, 8 * mm, f"Pág. {doc.page}")

    doc = SimpleDocTemplate(str(output_path), pagesize=landscape(A4), rightMargin=15 * mm, leftMargin=15 * mm,
                            topMargin=15 * mm, bottomMargin=20 * mm)
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle('ReportTitle', parent=styles['Heading1'], fontSize=18, leading=22,
                                 fontName='Helvetica-Bold')
    section_style = ParagraphStyle('Section', parent=styles['Heading2'], fontSize=11, leading=14,
                                   fontName='Helvetica-Bold', spaceBefore=8)

    story = [Paragraph(title, title_style), Spacer(1, 4 * mm)]
    for heading, df in tables.items():
        if df.empty:
            continue
        story += [Paragraph(heading, section_style), Spacer(1, 2 * mm), _table_flowable(df, df.index.name or "")]
    for image_path in images:
        with PILImage.open(image_path) as img:
            width, height = img.size
        max_width = landscape(A4)[0] - 30 * mm
        scale = min(1.0, max_width / width)
        story += [Spacer(1, 4 * mm), Image(str(image_path), width=width * scale, height=height * scale)]

    try:
        doc.build(story, onFirstPage=on_page, onLaterPages=on_page)
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudo escribir el PDF {output_path}: {e}")
    return Path(output_path)


def write_report(runs: Mapping[str, Mapping], out_dir: Union[str, Path],
                 two_stage: Optional[Sequence[Mapping]] = None,
                 checkerboard: Optional[Mapping[str, float]] = None,
                 previews: Sequence[Union[str, Path]] = (), footer: str = "",
                 label: str = "tube") -> Dict[str, Path]:
    """
    Escribe ablation.md, ablation.xlsx y report.pdf en out_dir.

    Returns:
        Diccionario con las rutas escritas
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {SECTION_TITLES["ablation"]: ablation_table(runs)}
    if two_stage is not None:
        tables[SECTION_TITLES["two_stage"]] = two_stage_table(two_stage[0], two_stage[1], label)
    if checkerboard:
        tables[SECTION_TITLES["checkerboard"]] = checkerboard_table(checkerboard)
    sheet_names = {title: sheet for sheet, title in SECTION_TITLES.items()}

    paths = {"markdown": out_dir / "ablation.md", "excel": out_dir / "ablation.xlsx", "pdf": out_dir / "report.pdf"}
    try:
        with open(paths["markdown"], 'w', encoding='utf-8') as f:
            for heading, df in tables.items():
                f.write(f"## {heading}\n\n{df.to_markdown() if not df.empty else '_sin datos_'}\n\n")
        with pd.ExcelWriter(paths["excel"], engine="openpyxl") as writer:
            for heading, df in tables.items():
                df.to_excel(writer, sheet_name=sheet_names[heading])
    except OSError as e:
        raise AFPError(ErrorCode.UNWRITABLE_PATH, f"No se pudo escribir el informe en {out_dir}: {e}")
    create_report_pdf("Informe de ablación AFP", tables, paths["pdf"], previews, footer)
    logger.info("Informe escrito en %s", out_dir)
    return paths
