"""
Aplicación Streamlit para explorar los resultados del pipeline AFP:
métricas de evaluación, cortes de los volúmenes e historial de ejecuciones
"""

import streamlit as st
import pandas as pd
import json
import os
from pathlib import Path

# Importar módulos del proyecto
import sys
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.dataset import load_dataset
from src.errors import AFPError
from src.history_manager import delete_from_history, get_history_by_command
from src.report import ablation_table
from src.viewer import find_synthetic, slice_panels
import config


def load_aggregates(out_dir):
    """Busca los aggregate.json bajo out_dir (uno por ejecución de eval)"""
    runs = {}
    for path in sorted(Path(out_dir).glob('**/aggregate.json')):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                runs[str(path.parent.relative_to(out_dir)) or '.'] = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            st.warning(f"No se pudo leer {path}: {e}")
    return runs


# Configuración de la página
st.set_page_config(
    page_title="Pipeline AFP - MR a CT",
    page_icon="🧠",
    layout="wide"
)

st.title("🧠 Pipeline AFP: traducción MR -> CT")
st.markdown("---")

tab1, tab2, tab3 = st.tabs(["📊 Métricas", "🔍 Visor de cortes", "📜 Historial"])

# Sidebar para configuración
with st.sidebar:
    st.header("⚙️ Configuración")
    out_dir = st.text_input("Directorio de salida", value="output")
    data_dir = st.text_input("Dataset", value="data")
    synth_dir = st.text_input("Volúmenes sintéticos", value=os.path.join("output", "synth"))
    st.markdown("---")
    st.caption(f"Tiling por defecto: {config.DEFAULT_TILING} · Vóxel objetivo: {config.TARGET_SPACING} mm")

# ============================================================================
# TAB 1: MÉTRICAS
# ============================================================================
with tab1:
    st.header("📊 Métricas de evaluación")
    runs = load_aggregates(out_dir) if os.path.isdir(out_dir) else {}
    if not runs:
        st.info("No hay evaluaciones todavía. Ejecuta el subcomando eval.")
    else:
        st.subheader("Ablación (media ± std)")
        st.dataframe(ablation_table(runs), use_container_width=True)

        selected = st.selectbox("Ejecución", list(runs))
        agg = runs[selected]
        col1, col2, col3 = st.columns(3)
        with col1:
            st.metric("Casos", agg.get("n_cases", 0))
        if agg.get("n_cases"):
            with col2:
                st.metric("MAE", f"{agg['mae']['mean']:.4f}")
            with col3:
                st.metric("SSIM", f"{agg['ssim']['mean']:.4f}")
            per_case = Path(out_dir) / selected / "per_case.csv"
            if per_case.exists():
                df = pd.read_csv(per_case)
                st.dataframe(df, use_container_width=True, hide_index=True)
                st.download_button(
                    label="📥 Descargar per_case.csv",
                    data=per_case.read_bytes(),
                    file_name="per_case.csv",
                    mime="text/csv",
                )

# ============================================================================
# TAB 2: VISOR DE CORTES
# ============================================================================
with tab2:
    st.header("🔍 Visor de cortes")
    try:
        pairs = {p.case_id: p for p in load_dataset(data_dir)}
    except AFPError as e:
        pairs = {}
        st.info(str(e))

    if pairs:
        case_id = st.selectbox("Caso", sorted(pairs))
        pair = pairs[case_id]
        axis = st.radio("Eje", [0, 1, 2], horizontal=True, format_func=lambda a: "zyx"[a])
        index = st.slider("Corte", 0, pair.target.shape[axis] - 1, pair.target.shape[axis] // 2)

        synthetic, energy = find_synthetic(synth_dir, case_id)
        if energy is not None:
            st.caption(f"checkerboard_energy = {energy:.6f}")
        panels = slice_panels(pair, axis, index, synthetic)
        columns = st.columns(len(panels))
        for column, (name, image) in zip(columns, panels.items()):
            with column:
                st.image(image, caption=name, use_container_width=True, clamp=True)

# ============================================================================
# TAB 3: HISTORIAL
# ============================================================================
with tab3:
    st.header("📜 Historial de ejecuciones")
    by_command = get_history_by_command(out_dir, data_dir)
    if not by_command:
        st.info("El historial está vacío.")
    for command, records in by_command.items():
        with st.expander(f"⚙️ {command} ({len(records)} ejecuciones)", expanded=False):
            for record in records:
                col1, col2 = st.columns([5, 1])
                with col1:
                    st.markdown(
                        f"**#{record['id']}** · {record['timestamp'][:19]} · semilla {record['seed']} · "
                        f"config `{record['config_hash'][:12]}`"
                    )
                    if record.get('artifacts'):
                        st.dataframe(pd.DataFrame(record['artifacts']), use_container_width=True, hide_index=True)
                with col2:
                    if st.button("🗑️ Eliminar", key=f"delete_{record['history_dir']}_{record['id']}"):
                        delete_from_history(record['history_dir'], record['id'])
                        st.rerun()
