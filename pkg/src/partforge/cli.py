"""Command-line entry points for the full lifecycle.

Every command is deterministic given its config and seed, exits 0 on success,
and prints one machine-readable ``ERROR {...}`` JSON line on failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .config import ConfigError, config_text, load_config
from .synthdata import CATEGORIES

_CONFIG_OPT = click.option("--config", "config_path", type=click.Path(), default=None,
                           help="flat key=value config file")


def _fail(message: str, **fields):
    payload = {"error": message, **fields}
    click.echo("ERROR " + json.dumps(payload, sort_keys=True), err=True)
    sys.exit(1)


def _load_cfg(config_path):
    try:
        return load_config(config_path)
    except ConfigError as exc:
        _fail(str(exc), kind="config")


@click.group()
def main():
    """Part-aware 3D generation: data, training, inference, editing, serving."""


@main.command("synth-data")
@_CONFIG_OPT
@click.option("--out", required=True, type=click.Path())
@click.option("--n", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--categories", default=",".join(CATEGORIES), show_default=True)
@click.option("--grid", "grid_n", default=None, type=int, help="PVOX resolution (default from config)")
def synth_data(config_path, out, n, seed, categories, grid_n):
    """Build a deterministic synthetic corpus plus a regeneration manifest."""
    from .synthdata import build_dataset

    cfg = _load_cfg(config_path)
    cats = [c.strip() for c in categories.split(",") if c.strip()]
    bad = [c for c in cats if c not in CATEGORIES]
    if bad:
        _fail(f"unknown categories: {bad}", kind="usage")
    manifest = build_dataset(
        seeds=[seed + i for i in range(n)] if n else [seed],
        categories=cats, n=n, out_dir=out,
        grid_n=grid_n if grid_n is not None else int(cfg["grid_n"]),
    )
    click.echo(f"wrote {len(manifest['samples'])} samples to {out}")


def _load_corpus(data_dir):
    from .synthdata import generate_sample

    manifest_path = Path(data_dir) / "manifest.json"
    if not manifest_path.exists():
        _fail(f"no manifest.json under {data_dir}", kind="usage")
    manifest = json.loads(manifest_path.read_text())
    return [generate_sample(rec["seed"], rec["category"]) for rec in manifest["samples"]]


def _train_settings(cfg, steps_key, seed):
    from .train import TrainSettings

    return TrainSettings(
        steps=int(cfg[steps_key]),
        lr=float(cfg["train.lr"]),
        batch_size=int(cfg["train.batch"]),
        drop_prob=float(cfg["train.drop_prob"]),
        seed=int(cfg["train.seed"]) if seed is None else seed,
    )


def _progress_printer(label):
    def cb(step, total, loss):
        click.echo(f"[{label}] step {step}/{total} loss {loss:.5f}")

    return cb


def _stage_common(cfg):
    return dict(
        depth=int(cfg["model.depth"]), width=int(cfg["model.width"]),
        heads=int(cfg["model.heads"]), k_max=int(cfg["kmax"]),
        lattice=int(cfg["lattice"]), cond_tokens=int(cfg["model.cond_tokens"]),
        cond_width=int(cfg["model.cond_width"]),
    )


@main.command("train-layout")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
def train_layout(config_path, data_dir, out, seed):
    """Train the box codec and the stage-1 layout diffusion model."""
    from .checkpoint import save_model
    from .layout import BoxCodec, codec_roundtrip_error, train_box_codec
    from .train import layout_model_config, new_model, train_layout_model

    cfg = _load_cfg(config_path)
    samples = _load_corpus(data_dir)
    settings = _train_settings(cfg, "train.steps_layout", seed)

    torch.manual_seed(int(cfg["model.seed"]))
    codec = BoxCodec(int(cfg["model.tokens_per_part"]), int(cfg["model.width"]))
    train_box_codec(codec, steps=int(cfg["train.codec_steps"]),
                    lr=float(cfg["train.codec_lr"]), seed=settings.seed)
    err = codec_roundtrip_error(codec)
    click.echo(f"[codec] corner roundtrip max error {err:.5f}")

    model = new_model(
        layout_model_config(tokens_per_part=int(cfg["model.tokens_per_part"]),
                            **_stage_common(cfg)),
        seed=int(cfg["model.seed"]),
    )
    train_layout_model(model, codec, samples, settings,
                       progress=_progress_printer("layout"))
    save_model(out, model,
               stage={"kind": "layout", "codec_m": codec.m, "codec_d": codec.d,
                      "codec_roundtrip_error": err},
               extra_tensors={f"codec.{k}": v for k, v in codec.state_dict().items()})
    click.echo(f"saved {out}")


@main.command("train-coarse")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--grid", "grid_n", default=None, type=int)
def train_coarse(config_path, data_dir, out, seed, grid_n):
    """Train the stage-2 per-part occupancy diffusion model."""
    from .checkpoint import save_model
    from .train import coarse_model_config, new_model, train_coarse_model

    cfg = _load_cfg(config_path)
    samples = _load_corpus(data_dir)
    settings = _train_settings(cfg, "train.steps_coarse", seed)
    n = int(cfg["grid_n"]) if grid_n is None else grid_n
    p = int(cfg["patch"])
    model = new_model(coarse_model_config(p=p, **_stage_common(cfg)),
                      seed=int(cfg["model.seed"]))
    train_coarse_model(model, samples, settings, n=n, p=p,
                       augment=bool(cfg["train.augment"]),
                       progress=_progress_printer("coarse"))
    save_model(out, model, stage={"kind": "coarse", "grid_n": n, "patch": p})
    click.echo(f"saved {out}")


@main.command("train-refine")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--grid", "grid_n", default=None, type=int)
def train_refine(config_path, data_dir, out, seed, grid_n):
    """Train the stage-3 sparse feature refinement model."""
    from .checkpoint import save_model
    from .stages import ColorCodec
    from .train import new_model, refine_model_config, train_refine_model

    cfg = _load_cfg(config_path)
    samples = _load_corpus(data_dir)
    settings = _train_settings(cfg, "train.steps_refine", seed)
    n = int(cfg["grid_n"]) if grid_n is None else grid_n
    p = int(cfg["patch"])
    d_f = int(cfg["feature_width"])
    budget = int(cfg["voxel_budget"])
    model = new_model(refine_model_config(p=p, d_f=d_f, **_stage_common(cfg)),
                      seed=int(cfg["model.seed"]))
    train_refine_model(model, samples, settings, n=n, p=p, d_f=d_f,
                       voxel_budget=budget, color_codec=ColorCodec(d_f),
                       progress=_progress_printer("refine"))
    save_model(out, model, stage={"kind": "refine", "grid_n": n, "patch": p,
                                  "feature_width": d_f, "voxel_budget": budget})
    click.echo(f"saved {out}")


def _bundle_from_flags(checkpoints, cfg, steps, cfg_scale, nms_iou, kmax, grid_n):
    from .pipeline import load_bundle

    overrides = {
        "steps": steps if steps is not None else int(cfg["steps"]),
        "cfg_scale": cfg_scale if cfg_scale is not None else float(cfg["cfg_scale"]),
        "nms_iou": nms_iou if nms_iou is not None else float(cfg["nms_iou"]),
        "validity_iou": float(cfg["validity_iou"]),
        "validity_samples": int(cfg["validity_samples"]),
        "k_max": kmax,
        "grid_n": grid_n,
    }
    try:
        return load_bundle(checkpoints, overrides)
    except FileNotFoundError as exc:
        _fail(str(exc), kind="usage")


@main.command()
@_CONFIG_OPT
@click.option("--checkpoint", "checkpoints", required=True, type=click.Path(exists=True),
              help="directory with layout.pfck / coarse.pfck / refine.pfck")
@click.option("--category", default="table", show_default=True)
@click.option("--sample-seed", default=None, type=int,
              help="condition reference seed (defaults to --seed)")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=None, type=int)
@click.option("--cfg-scale", default=None, type=float)
@click.option("--nms-iou", default=None, type=float)
@click.option("--kmax", default=None, type=int)
@click.option("--grid", "grid_n", default=None, type=int)
@click.option("--from-gt-boxes", is_flag=True, default=False,
              help="condition stage 2 on the ground-truth layout boxes")
def generate(config_path, checkpoints, category, sample_seed, seed, out, steps,
             cfg_scale, nms_iou, kmax, grid_n, from_gt_boxes):
    """Run the three-stage pipeline and write a scene directory."""
    from .pipeline import EmptyLayoutError, run_from_boxes, run_full, save_scene
    from .synthdata import generate_sample

    cfg = _load_cfg(config_path)
    if category not in CATEGORIES:
        _fail(f"unknown category {category!r}", kind="usage")
    bundle = _bundle_from_flags(checkpoints, cfg, steps, cfg_scale, nms_iou, kmax, grid_n)
    condition = {"category": category,
                 "sample_seed": sample_seed if sample_seed is not None else seed}
    try:
        if from_gt_boxes:
            gt = generate_sample(condition["sample_seed"], category)
            state = run_from_boxes(bundle, condition, gt.boxes(), seed,
                                   part_ids=[p.part_id for p in gt.parts])
        else:
            state = run_full(bundle, condition, seed)
    except EmptyLayoutError as exc:
        _fail(str(exc), kind="empty_layout")
    path = save_scene(state, out)
    click.echo(f"scene {state.scene_id}: {len(state.parts)} parts -> {path}")


@main.command()
@_CONFIG_OPT
@click.option("--checkpoint", "checkpoints", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True))
@click.option("--ops", "ops_json", required=True,
              help="edit op list: JSON text or a path to a JSON file")
@click.option("--frozen", default="", help="comma-separated frozen part ids")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path(),
              help="scene store for the result (default: alongside the input)")
def edit(config_path, checkpoints, scene_dir, ops_json, frozen, seed, out):
    """Apply box-level edits; frozen parts regenerate bit-identically."""
    from .pipeline import InvalidEditError, edit_scene, load_scene, save_scene

    cfg = _load_cfg(config_path)
    bundle = _bundle_from_flags(checkpoints, cfg, None, None, None, None, None)
    state = load_scene(scene_dir)
    try:
        is_file = Path(ops_json).exists()
    except OSError:
        is_file = False
    if is_file:
        ops = json.loads(Path(ops_json).read_text())
    else:
        try:
            ops = json.loads(ops_json)
        except json.JSONDecodeError as exc:
            _fail(f"--ops is neither a file nor valid JSON: {exc}", kind="usage")
    frozen_ids = [int(tok) for tok in frozen.split(",") if tok.strip()]
    try:
        result = edit_scene(bundle, state, ops, frozen_ids, seed,
                            scene_id=f"{state.scene_id}-edit{seed}")
    except InvalidEditError as exc:
        _fail(str(exc), kind="invalid_edit")
    store = out if out is not None else Path(scene_dir).parent
    path = save_scene(result, store)
    click.echo(f"scene {result.scene_id}: {len(result.parts)} parts -> {path}")


@main.command("eval")
@_CONFIG_OPT
@click.option("--scene", "scene_dirs", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--points", default=4096, show_default=True)
@click.option("--tau", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
def eval_cmd(config_path, scene_dirs, out, points, tau, seed):
    """Evaluate scenes against their ground truth; write JSON/CSV plus figures."""
    from .evaluation import (
        EvalReport,
        config_hash_of,
        evaluate_scene,
        format_report_table,
        render_report_figures,
        report_to_csv,
        report_to_json,
    )
    from .pipeline import load_scene
    from .synthdata import generate_sample

    cfg = _load_cfg(config_path)
    report = EvalReport(n_points=points, tau=tau, seed=seed,
                        config_hash=config_hash_of(config_text(cfg)))
    projections = []
    for scene_dir in scene_dirs:
        state = load_scene(scene_dir)
        gt = generate_sample(int(state.condition["sample_seed"]),
                             state.condition["category"])
        grid_n = state.parts[0].grid.n if state.parts else int(cfg["grid_n"])
        entry = evaluate_scene(state, gt, grid_n, n_points=points, tau=tau, seed=seed)
        report.entries.append(entry)
        if entry.note:
            click.echo(f"{state.scene_id}: {entry.note}")
        if state.global_grid is not None:
            projections.append((state.scene_id, state.global_grid, gt.global_grid(grid_n)))

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_to_json(report))
    (out_dir / "report.csv").write_text(report_to_csv(report))
    figures = render_report_figures(report, out_dir, projections)
    click.echo(format_report_table(report))
    click.echo(f"report: {out_dir / 'report.json'}, {out_dir / 'report.csv'}, "
               f"{len(figures)} figures")


@main.command()
@_CONFIG_OPT
@click.option("--checkpoint", "checkpoints", required=True, type=click.Path(exists=True))
@click.option("--store", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8400, show_default=True)
@click.option("--frontend", default=None, type=click.Path(),
              help="static frontend bundle to serve at /")
def serve(config_path, checkpoints, store, host, port, frontend):
    """Serve the HTTP job API (and the editor UI when a bundle is given)."""
    import uvicorn

    from .server import create_app

    cfg = _load_cfg(config_path)
    bundle = _bundle_from_flags(checkpoints, cfg, None, None, None, None, None)
    app = create_app(store, bundle, frontend_dir=frontend)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
