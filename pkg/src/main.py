"""
Script CLI del pipeline AFP: phantoms, preprocesado, entrenamiento del
segmentador y del traductor, síntesis por parches, evaluación e informes
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Agregar el directorio padre al path para importar config
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import torch

import config
from src.checkpoint import TrainingFingerprint, load_checkpoint, save_checkpoint
from src.dataset import load_dataset, load_manifest, load_stats, write_dataset, write_manifest
from src.errors import AFPError, ErrorCode
from src.history_manager import add_to_history
from src.metrics import evaluate_cases, resolve_tolerance, write_reports
from src.phantom import case_seed, generate_dataset, split_dataset
from src.preprocess import preprocess_pair
from src.report import load_aggregate, render_slice_strip, write_report
from src.run_config import RunConfig, config_hash, dump_run_config, load_run_config
from src.seg_net import build_segmenter, mapped_label_volume, restore_segmenter, train_segmentation
from src.synth_net import (TrainMode, build_translator, checkerboard_energy, restore_translator,
                           synthesize_volume, train_translation, write_loss_log)
from src.volume_io import load_volume, save_volume

logger = logging.getLogger(__name__)

COMMANDS = ("phantom-gen", "preprocess", "train-seg", "train-synth", "synth", "eval", "report")


class ConfigArgumentParser(argparse.ArgumentParser):
    """Los errores de uso son errores de configuración (código de salida 1)"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ Error: {message}", file=sys.stderr)
        sys.exit(config.EXIT_CONFIG_ERROR)


def print_summary(title: str, lines: Dict[str, object]) -> None:
    print("\n" + "=" * 50)
    print(f"📊 {title}")
    print("=" * 50)
    for key, value in lines.items():
        print(f"{key}: {value}")
    print("=" * 50)


def artifact_tag(cfg: RunConfig) -> Dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seed}


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg: RunConfig, args) -> Path:
    return Path(getattr(args, "data", None) or cfg.paths.data_dir)


def _case_names(pair) -> Dict[int, str]:
    return dict(pair.labels.label_names) if pair.labels is not None else {}


# ---------------------------------------------------------------------------
# Subcomandos
# ---------------------------------------------------------------------------

def cmd_phantom_gen(cfg: RunConfig, args) -> List[Path]:
    out_dir = Path(args.out or cfg.paths.data_dir)
    n_cases = cfg.dataset.n_cases if args.n_cases is None else args.n_cases
    spec = dataclasses.replace(cfg.phantom, seed=cfg.seed)
    print(f"🧪 Generando {n_cases} phantoms {spec.size} (semilla {cfg.seed})...")
    pairs = generate_dataset(spec, n_cases, cfg.dataset.workers)
    train, val, test = split_dataset([p.case_id for p in pairs], cfg.dataset.split, cfg.seed)
    splits = {"train": train, "val": val, "test": test}
    case_info = {p.case_id: {"seed": case_seed(cfg.seed, i)} for i, p in enumerate(pairs)}
    extra = artifact_tag(cfg)
    written = write_dataset(pairs, out_dir, splits, {**extra, "phantom": spec.to_dict()}, case_info)
    print_summary("RESUMEN", {
        "Casos generados": len(pairs),
        "Train / val / test": f"{len(train)} / {len(val)} / {len(test)}",
        "Directorio": out_dir,
    })
    add_to_history("phantom-gen", out_dir, extra["config_hash"], cfg.seed, written, {"n_cases": len(pairs)})
    return written


def cmd_preprocess(cfg: RunConfig, args) -> List[Path]:
    data_dir = _data_dir(cfg, args)
    out_dir = Path(args.out or Path(cfg.paths.out_dir) / "preprocessed")
    manifest = load_manifest(data_dir)
    pairs = load_dataset(data_dir)
    print(f"📖 Preprocesando {len(pairs)} casos de {data_dir} (vóxel {cfg.preprocess.target_spacing} mm)")
    processed, case_info = [], {}
    for pair in pairs:
        out, stats = preprocess_pair(pair, cfg.preprocess)
        processed.append(out)
        case_info[pair.case_id] = {"stats": {k: s.to_dict() for k, s in stats.items()}}
    extra = artifact_tag(cfg)
    extra["preprocess"] = cfg.preprocess.to_dict()
    written = write_dataset(processed, out_dir, manifest.get("splits", {}), extra, case_info)
    print_summary("RESUMEN", {"Casos preprocesados": len(processed), "Directorio": out_dir})
    add_to_history("preprocess", out_dir, extra["config_hash"], cfg.seed, written)
    return written


def cmd_train_seg(cfg: RunConfig, args) -> List[Path]:
    data_dir = _data_dir(cfg, args)
    out_dir = _out_dir(cfg)
    train = load_dataset(data_dir, "train")
    val = load_dataset(data_dir, "val")
    if not train:
        raise AFPError(ErrorCode.DATASET_MISSING, f"No hay casos de entrenamiento en {data_dir}")
    opts = dataclasses.replace(cfg.segmenter_training, seed=cfg.seed)
    print(f"🧠 Entrenando segmentador: {len(train)} casos train, {len(val)} val, {opts.epochs} épocas")
    model = build_segmenter(cfg.segmenter, cfg.seed)
    ckpt = train_segmentation(model, train, opts, val or None)
    ckpt.fingerprint = dataclasses.replace(ckpt.fingerprint, config_hash=config_hash(cfg))
    ckpt_path = save_checkpoint(ckpt, out_dir / "segmenter")
    log_path = write_loss_log(ckpt.history, out_dir / "segmenter_loss.csv")
    last = ckpt.history[-1] if ckpt.history else {}
    print_summary("RESUMEN", {
        "Épocas": opts.epochs,
        "Mejor época": ckpt.fingerprint.epoch,
        "Dice val (última época)": f"{last.get('val_dice', float('nan')):.4f}",
        "Checkpoint": ckpt_path,
    })
    written = [ckpt_path, ckpt_path.with_suffix(".json"), log_path]
    add_to_history("train-seg", out_dir, config_hash(cfg), cfg.seed, written)
    return written


def cmd_train_synth(cfg: RunConfig, args) -> List[Path]:
    data_dir = _data_dir(cfg, args)
    out_dir = _out_dir(cfg)
    mode = cfg.training.mode
    plan = cfg.training.to_plan(cfg.seed)
    segmenter_path = args.segmenter or cfg.training.segmenter_checkpoint
    if plan.needs_extractor and not segmenter_path:
        raise AFPError(
            ErrorCode.CONFIG_CONFLICT,
            f"El modo {mode.value} usa la pérdida AFP y no hay checkpoint de segmentador",
            suggestion="Indica --segmenter o training.segmenter_checkpoint",
        )
    extractor = restore_segmenter(load_checkpoint(segmenter_path)) if plan.needs_extractor else None
    train = load_dataset(data_dir, "train")
    val = load_dataset(data_dir, "val")
    if not train:
        raise AFPError(ErrorCode.DATASET_MISSING, f"No hay casos de entrenamiento en {data_dir}")

    tag = config_hash(cfg)
    name = f"translator_{mode.value}"
    written: List[Path] = []

    def save_stage(stage_name: str, ckpt) -> None:
        ckpt.fingerprint = dataclasses.replace(ckpt.fingerprint, config_hash=tag)
        if stage_name == "stage1":
            path = save_checkpoint(ckpt, out_dir / f"{name}_stage1")
            written.extend([path, path.with_suffix(".json")])
            print(f"💾 Checkpoint de la etapa 1: {path}")

    print(f"🧠 Entrenando traductor en modo {mode.value} ({len(plan.stages)} etapa(s))")
    for stage_name, stage in plan.stages:
        print(f"   {stage_name}: {stage.epochs} épocas, lr {stage.lr:g}, pesos {stage.loss.weights()}")
    model = build_translator(cfg.translator, cfg.seed)
    ckpt = train_translation(model, train, plan, extractor, cfg.taps, val or None, on_stage_end=save_stage)
    ckpt.fingerprint = dataclasses.replace(ckpt.fingerprint, config_hash=tag)
    path = save_checkpoint(ckpt, out_dir / name)
    log_path = write_loss_log(ckpt.history, out_dir / f"{name}_loss.csv")
    written += [path, path.with_suffix(".json"), log_path]
    print_summary("RESUMEN", {
        "Modo": mode.value,
        "Épocas totales": len(ckpt.history),
        "Mejor época": ckpt.fingerprint.epoch,
        "Checkpoint": path,
        "Log de pérdidas": log_path,
    })
    add_to_history("train-synth", out_dir, tag, cfg.seed, written, {"mode": mode.value})
    return written


def cmd_synth(cfg: RunConfig, args) -> List[Path]:
    out_dir = Path(args.out or Path(cfg.paths.out_dir) / "synth")
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_translator(ckpt)
    syn = cfg.synthesis
    extra = artifact_tag(cfg)
    extra.update({"checkpoint": Path(args.checkpoint).name, "blend": syn.blend, "tiling": syn.tiling})

    if args.inputs:
        inputs = {Path(p).name.split(".")[0]: load_volume(p) for p in args.inputs}
    else:
        data_dir = _data_dir(cfg, args)
        inputs = {p.case_id: p.source for p in load_dataset(data_dir, args.split)}
    print(f"🔄 Sintetizando {len(inputs)} volúmenes (parche {syn.patch_size}, tiling {syn.tiling}, {syn.blend})")
    written, cases = [], []
    for case_id, volume in sorted(inputs.items()):
        synth = synthesize_volume(model, volume, syn.patch_size, syn.tiling, syn.blend)
        energy = checkerboard_energy(synth)
        path = save_volume(synth, out_dir / case_id, extra={**extra, "checkerboard_energy": energy})
        written += [path, path.with_suffix(".json")]
        cases.append({"case_id": case_id, "file": case_id, "checkerboard_energy": energy})
        print(f"  ✅ {case_id}: checkerboard_energy={energy:.6f}")
    energies = [c["checkerboard_energy"] for c in cases]
    manifest = {**extra, "decoder_mode": ckpt.config.get("decoder_mode"), "cases": cases,
                "mean_checkerboard_energy": float(np.mean(energies)) if energies else None}
    written.append(write_manifest(manifest, out_dir))
    print_summary("RESUMEN", {"Volúmenes sintetizados": len(cases), "Directorio": out_dir})
    add_to_history("synth", out_dir, extra["config_hash"], cfg.seed, written)
    return written


def cmd_eval(cfg: RunConfig, args) -> List[Path]:
    real_dir = Path(args.real_dir or cfg.paths.data_dir)
    synth_dir = Path(args.synth_dir)
    out_dir = Path(args.out or Path(cfg.paths.out_dir) / "eval")
    mcfg = cfg.metrics
    segmenter = restore_segmenter(load_checkpoint(args.segmenter))

    real_pairs = load_dataset(real_dir, args.split)
    synth_manifest = load_manifest(synth_dir)
    synth = {c["case_id"]: load_volume(synth_dir / c["file"]) for c in synth_manifest.get("cases", [])}
    real = {p.case_id: p.target for p in real_pairs}
    names = _case_names(real_pairs[0]) if real_pairs else {}
    label_map = cfg.segmenter_training.label_map
    if real_pairs and label_map is not None:
        names = mapped_label_volume(real_pairs[0].labels, label_map).label_names
    stats = load_stats(real_dir) if mcfg.mae_units == "denormalized" else None
    if mcfg.mae_units == "denormalized" and not stats:
        raise AFPError(
            ErrorCode.CONFIG_CONFLICT,
            "mae_units=denormalized requiere un dataset preprocesado con estadísticas",
            suggestion="Evalúa contra la salida del subcomando preprocess",
        )
    print(f"📏 Evaluando {len(real)} casos (silver standard, {len(synth)} sintéticos)")
    spacing = next(iter(real.values())).spacing if real else (1.0, 1.0, 1.0)
    tolerance = resolve_tolerance(spacing, mcfg.tolerance_mm, mcfg.region)
    reports = evaluate_cases(
        real, synth, segmenter, workers=mcfg.workers, stats=stats,
        tolerance_mm=tolerance, labels=mcfg.labels, patch_size=mcfg.segmenter_patch_size,
        tiling=cfg.synthesis.tiling, label_names=names, ssim_window=mcfg.ssim_window,
    )
    extra = artifact_tag(cfg)
    extra.update({"synth_dir": synth_dir.name, "mae_units": mcfg.mae_units})
    paths = write_reports(reports, out_dir, extra)
    agg = json.loads(Path(paths["aggregate"]).read_text(encoding="utf-8"))
    lines = {"Casos": agg["n_cases"], "Tolerancia NSD (mm)": tolerance}
    if agg["n_cases"]:
        lines["MAE"] = f"{agg['mae']['mean']:.4f} ± {agg['mae']['std']:.4f}"
        lines["SSIM"] = f"{agg['ssim']['mean']:.4f} ± {agg['ssim']['std']:.4f}"
        for label, scores in agg["per_label"].items():
            lines[f"Dice {label}"] = f"{scores['dice']['mean']:.4f} ± {scores['dice']['std']:.4f}"
    print_summary("RESUMEN", lines)
    written = list(paths.values())
    add_to_history("eval", out_dir, extra["config_hash"], cfg.seed, written)
    return written


def _parse_named(items: Optional[List[str]], what: str) -> Dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise AFPError(ErrorCode.INVALID_ARGUMENT, f"{what} debe tener la forma NOMBRE=RUTA, recibido {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    return out


def cmd_report(cfg: RunConfig, args) -> List[Path]:
    out_dir = Path(args.out or Path(cfg.paths.out_dir) / "report")
    runs = {name: load_aggregate(path) for name, path in _parse_named(args.run, "--run").items()}
    if not runs:
        raise AFPError(ErrorCode.INVALID_ARGUMENT, "Indica al menos una ejecución con --run NOMBRE=aggregate.json")
    two_stage = [load_aggregate(p) for p in args.two_stage] if args.two_stage else None
    checkerboard = {}
    for mode, path in _parse_named(args.checkerboard, "--checkerboard").items():
        checkerboard[mode] = load_manifest(path)["mean_checkerboard_energy"]
    previews = []
    preview_volumes = {name: load_volume(path) for name, path in _parse_named(args.preview, "--preview").items()}
    if preview_volumes:
        previews.append(render_slice_strip(preview_volumes, out_dir / "preview.png"))
    tag = artifact_tag(cfg)
    footer = f"config_hash {tag['config_hash'][:12]} · seed {cfg.seed}"
    paths = write_report(runs, out_dir, two_stage, checkerboard or None, previews, footer, args.label)
    print(f"📄 Informe de ablación con {len(runs)} ejecuciones")
    print_summary("RESUMEN", {k: v for k, v in paths.items()})
    written = list(paths.values()) + previews
    add_to_history("report", out_dir, tag["config_hash"], cfg.seed, written)
    return written


HANDLERS = {
    "phantom-gen": cmd_phantom_gen,
    "preprocess": cmd_preprocess,
    "train-seg": cmd_train_seg,
    "train-synth": cmd_train_synth,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = ConfigArgumentParser(description='Pipeline AFP para traducción MR -> CT 3D')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='Fichero JSON de RunConfig')
    common.add_argument('--seed', type=int, default=None, help='Semilla (sobrescribe la de la configuración)')
    common.add_argument('--out', type=str, default=None, help='Directorio de salida')
    common.add_argument('--print-config', action='store_true',
                        help='Muestra la configuración efectiva completa y termina')
    common.add_argument('-v', '--verbose', action='store_true', help='Logging en nivel DEBUG')

    sub = parser.add_subparsers(dest='command', required=True, parser_class=ConfigArgumentParser)

    p = sub.add_parser('phantom-gen', parents=[common], help='Genera un dataset de phantoms')
    p.add_argument('-n', '--n-cases', type=int, default=None, help='Número de casos (default: dataset.n_cases)')

    p = sub.add_parser('preprocess', parents=[common], help='Remuestrea y normaliza un dataset')
    p.add_argument('--data', type=str, default=None, help='Dataset de entrada (default: paths.data_dir)')

    p = sub.add_parser('train-seg', parents=[common], help='Entrena el segmentador')
    p.add_argument('--data', type=str, default=None, help='Dataset (default: paths.data_dir)')

    p = sub.add_parser('train-synth', parents=[common], help='Entrena el traductor MR -> CT')
    p.add_argument('--data', type=str, default=None, help='Dataset (default: paths.data_dir)')
    p.add_argument('--mode', type=str, default=None, choices=[m.value for m in TrainMode],
                   help='Estrategia de entrenamiento (default: training.mode)')
    p.add_argument('--segmenter', type=str, default=None, help='Checkpoint del segmentador (extractor AFP)')

    p = sub.add_parser('synth', parents=[common], help='Sintetiza CT por parches')
    p.add_argument('--checkpoint', type=str, required=True, help='Checkpoint del traductor')
    p.add_argument('--data', type=str, default=None, help='Dataset con los MR de entrada')
    p.add_argument('--split', type=str, default='test', help='Partición a sintetizar (default: test)')
    p.add_argument('inputs', nargs='*', help='Volúmenes MR sueltos (en lugar de --data)')

    p = sub.add_parser('eval', parents=[common], help='Evaluación silver-standard')
    p.add_argument('--real-dir', type=str, default=None, help='Dataset con los CT reales')
    p.add_argument('--synth-dir', type=str, required=True, help='Salida del subcomando synth')
    p.add_argument('--segmenter', type=str, required=True, help='Checkpoint del segmentador')
    p.add_argument('--split', type=str, default='test', help='Partición evaluada (default: test)')

    p = sub.add_parser('report', parents=[common], help='Tabla de ablación (Markdown, Excel y PDF)')
    p.add_argument('--run', action='append', help='NOMBRE=aggregate.json (repetible)')
    p.add_argument('--two-stage', nargs=2, metavar=('STAGE1', 'FINAL'), help='Agregados del protocolo L1 -> AFP')
    p.add_argument('--checkerboard', action='append', help='MODO=directorio de synth (repetible)')
    p.add_argument('--preview', action='append', help='NOMBRE=volumen para la vista previa (repetible)')
    p.add_argument('--label', type=str, default='tube', help='Etiqueta del protocolo en dos etapas')
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Ejecuta el CLI y devuelve el código de salida (0 ok, 1 configuración, 2 ejecución)"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        cfg = load_run_config(args.config).with_overrides(
            seed=args.seed,
            out_dir=args.out if args.command in ("train-seg", "train-synth") else None,
            mode=getattr(args, 'mode', None),
        )
        if args.print_config:
            print(dump_run_config(cfg))
            return config.EXIT_OK
        if config.NUM_THREADS > 0:
            torch.set_num_threads(config.NUM_THREADS)
        HANDLERS[args.command](cfg, args)
        print(f"\n✅ {args.command} completado")
        return config.EXIT_OK
    except AFPError as e:
        print(f"❌ Error: {e}")
        return config.EXIT_CONFIG_ERROR if e.is_config_error else config.EXIT_RUNTIME_ERROR
    except Exception as e:
        print(f"❌ Error: {str(e)}")
        import traceback
        traceback.print_exc()
        return config.EXIT_RUNTIME_ERROR


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
