"""Command-line entry point exposing the full pipeline as subcommands.

Every subcommand reads one JSON config (optionally patched by dotted-path
``--set`` overrides), writes its artifacts under the configured output root,
and records a run manifest with the config hash, seed, and package version.
Report-style subcommands render matplotlib figures next to their delimited
outputs. Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import config as cfg_mod
from . import datagen, geometry, inference, metrics, plotting, reconstruct, training
from .errors import (ConfigError, DatasetError, EmptySurfaceError, FlexsdfError,
                     InvalidInputError, InvalidStateError, NumericalError)
from .fieldnet import FieldModel

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (ConfigError, InvalidInputError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericalError, EmptySurfaceError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (DatasetError, InvalidStateError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_DATA


def with_config(fn):
    @click.option("--config", "config_path", type=click.Path(), default=None,
                  help="JSON config file; defaults apply when omitted.")
    @click.option("--set", "overrides", multiple=True, metavar="PATH=VALUE",
                  help="Dotted-path config override, e.g. train.seed=3.")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, **kwargs):
        try:
            cfg = cfg_mod.load_config(config_path, overrides)
            fn(cfg, **kwargs)
        except (FlexsdfError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))
    return wrapper


def _out_dir(cfg: dict, name: str) -> Path:
    out = Path(cfg["paths"]["out_root"]) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg: dict, key: str = "checkpoint") -> FieldModel:
    path = Path(cfg["paths"][key])
    if not path.exists():
        raise DatasetError(f"missing checkpoint: {path}")
    return FieldModel.load(path)


def _load_records(cfg: dict) -> list[datagen.ToolRecord]:
    return datagen.load_dataset(cfg["paths"]["dataset"])


def _find_tool(records, tool_id: str) -> datagen.ToolRecord:
    for rec in records:
        if rec.tool_id == tool_id:
            return rec
    raise DatasetError(f"tool {tool_id!r} not in dataset "
                       f"(available: {[r.tool_id for r in records]})")


def _find_condition(rec: datagen.ToolRecord, index: int) -> dict:
    for cond in rec.conditions:
        if cond["index"] == index:
            return cond
    raise DatasetError(f"{rec.tool_id} has no condition {index}")


@click.group()
def main():
    """Implicit SDF representation of deformable tools: data generation,
    training, inference, reconstruction, and evaluation."""


@main.command("gen-data")
@with_config
def gen_data(cfg):
    """Generate the synthetic deformation dataset."""
    d = cfg["data"]
    specs = cfg_mod.tool_specs_from(d)
    manifest = datagen.generate_dataset(
        specs, d["n_conditions"], d["seed"], cfg["paths"]["dataset"],
        n_test_conditions=d["n_test_conditions"], sdf_n_total=d["sdf_n_total"],
        near_fraction=d["near_fraction"], sigma_near=d["sigma_near"],
        surface_density=d["surface_density"], contact_radius=d["contact_radius"],
        load_range=tuple(d["load_range"]), include_zero_anchor=d["include_zero_anchor"],
    )
    n_records = sum(len(t["conditions"]) for t in manifest["tools"]) + len(manifest["tools"])
    cfg_mod.write_run_manifest(cfg["paths"]["dataset"], "gen-data", cfg,
                               [cfg["paths"]["dataset"]])
    click.echo(f"wrote {n_records} records ({len(manifest['tools'])} nominal) "
               f"to {cfg['paths']['dataset']}")


@main.command()
@with_config
def pretrain(cfg):
    """Fit nominal shapes (phase one); freezes the object module."""
    records = _load_records(cfg)
    out = _out_dir(cfg, "pretrain")
    tc = cfg_mod.train_config_from(cfg, log_path=str(out / "training_log.jsonl"))
    state = training.pretrain_nominal(records, tc)
    ckpt = Path(cfg["paths"]["pretrained_checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    state.save(ckpt)
    fig = plotting.save_loss_curves(state.history, out / "loss_curves.png",
                                    keys=("total", "sdf", "normal"))
    cfg_mod.write_run_manifest(out, "pretrain", cfg, [str(ckpt), str(fig)])
    click.echo(f"pretrained {len(records)} objects -> {ckpt} "
               f"(final loss {state.history[-1]['total']:.4f})")


@main.command()
@with_config
def train(cfg):
    """Train deformation + force modules (phase two) from the pretrained
    checkpoint."""
    records = _load_records(cfg)
    out = _out_dir(cfg, "train")
    tc = cfg_mod.train_config_from(cfg, log_path=str(out / "training_log.jsonl"))
    model = _load_model(cfg, "pretrained_checkpoint")
    state = training.TrainState(model=model, config=tc, phase="nominal")
    state = training.train_deformed(state, records, tc)
    ckpt = Path(cfg["paths"]["checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    state.save(ckpt)
    fig = plotting.save_loss_curves(state.history, out / "loss_curves.png")
    cfg_mod.write_run_manifest(out, "train", cfg, [str(ckpt), str(fig)])
    click.echo(f"trained {len(model.deformation_ids)} deformations -> {ckpt} "
               f"(final loss {state.history[-1]['total']:.4f})")


@main.command()
@with_config
def infer(cfg):
    """Recover a deformation from a synthetic partial view."""
    model = _load_model(cfg)
    records = _load_records(cfg)
    icfg = cfg["infer"]
    rec = _find_tool(records, icfg["tool"])
    cond = _find_condition(rec, icfg["condition"])
    cloud = cond["cloud"]

    lo_f, hi_f = icfg["drop_axial_fractions"]
    ax = cloud.points[:, 0]
    lo = ax.min() + lo_f * (ax.max() - ax.min())
    hi = ax.min() + hi_f * (ax.max() - ax.min())
    visible = inference.synthesize_partial_view(cloud, np.array(icfg["camera"]),
                                                drop_axial=(lo, hi))
    known_u = np.array(cond["contacts"]["u"]) if icfg["use_known_force"] else None
    ray_augment = None
    if icfg["ray_augment"]:
        ray_augment = inference.sample_camera_rays(visible, np.array(icfg["camera"]),
                                                   seed=icfg["seed"])
    obs = inference.PartialObservation(visible_points=visible, known_u=known_u,
                                       alpha=icfg["tool"])
    result = inference.infer_deformation(
        model, obs, iters=icfg["iters"], lr=icfg["lr"], seed=icfg["seed"],
        restarts=icfg["restarts"], delta=cfg["train"]["weights"]["delta"],
        recon_resolution=icfg["recon_resolution"], ray_augment=ray_augment)

    out = _out_dir(cfg, "infer")
    outputs = []
    with open(out / "result.json", "w") as fh:
        json.dump({
            "tool": icfg["tool"], "condition": icfg["condition"],
            "z": result.z.tolist(), "contact_feature": result.contact_feature.tolist(),
            "u_estimate": None if result.u_estimate is None else result.u_estimate.tolist(),
            "diverged": result.diverged,
            "initial_loss": result.loss_trajectory[0],
            "final_loss": result.loss_trajectory[-1],
            "n_visible": len(visible),
        }, fh, indent=2)
    outputs.append(str(out / "result.json"))
    with open(out / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        writer.writerows(enumerate(result.loss_trajectory))
    outputs.append(str(out / "trajectory.csv"))
    outputs.append(str(plotting.save_trajectory(result.loss_trajectory, out / "trajectory.png")))
    geometry.write_ply(out / "partial_view.ply", visible.points, normals=visible.normals)
    outputs.append(str(out / "partial_view.ply"))
    if result.reconstructed_cloud is not None:
        geometry.write_ply(out / "reconstruction.ply", result.reconstructed_cloud.points,
                           normals=result.reconstructed_cloud.normals)
        outputs.append(str(out / "reconstruction.ply"))
    cfg_mod.write_run_manifest(out, "infer", cfg, outputs)
    click.echo(f"inference loss {result.loss_trajectory[0]:.4f} -> {result.loss_trajectory[-1]:.4f} "
               f"({len(result.loss_trajectory)} entries)")


@main.command()
@with_config
def recon(cfg):
    """Reconstruct a nominal or deformed shape with marching cubes."""
    model = _load_model(cfg)
    records = _load_records(cfg)
    rcfg = cfg["recon"]
    rec = _find_tool(records, rcfg["tool"])
    alpha = model.object_code(rec.tool_id)
    z = None
    suffix = "nominal"
    if rcfg["condition"] is not None:
        z = model.force_code(training.deformation_id(rec.tool_id, rcfg["condition"]))
        suffix = f"def_{rcfg['condition']}"
    mesh = reconstruct.marching_cubes(model, alpha, z, rcfg["resolution"])
    out = _out_dir(cfg, "recon")
    obj_path = out / f"{rec.tool_id}_{suffix}.obj"
    ply_path = out / f"{rec.tool_id}_{suffix}.ply"
    geometry.write_obj(mesh, obj_path)
    geometry.write_ply_mesh(mesh, ply_path)
    cfg_mod.write_run_manifest(out, "recon", cfg, [str(obj_path), str(ply_path)])
    click.echo(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {obj_path}")


@main.command()
@with_config
def interp(cfg):
    """Sweep the force-code line between two trained deformations and
    reconstruct along it."""
    model = _load_model(cfg)
    records = _load_records(cfg)
    icfg = cfg["interp"]
    rec = _find_tool(records, icfg["tool"])
    z_l, z_r, id_l, id_r = _interp_endpoints(model, rec)
    ts = np.linspace(icfg["t_min"], icfg["t_max"], icfg["steps"])
    codes = inference.interpolate_codes(z_l, z_r, ts.tolist())

    out = _out_dir(cfg, "interp")
    outputs = []
    deflections = []
    alpha = model.object_code(rec.tool_id)
    for t, z in zip(ts, codes):
        mesh = reconstruct.marching_cubes(model, alpha,
                                          torch.as_tensor(z, dtype=torch.float32),
                                          icfg["resolution"])
        path = out / f"interp_t{t:+.2f}.obj".replace("+", "p").replace("-", "m")
        geometry.write_obj(mesh, path)
        outputs.append(str(path))
        deflections.append(metrics.tip_deflection(mesh.vertices, rec.nominal_cloud.points))
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "tip_deflection"])
        writer.writerows(zip(ts.tolist(), deflections))
    outputs.append(str(out / "sweep.csv"))
    outputs.append(str(plotting.save_interp_sweep(ts.tolist(), deflections, out / "sweep.png")))
    cfg_mod.write_run_manifest(out, "interp", cfg, outputs)
    click.echo(f"swept {id_l} -> {id_r}: deflections "
               + ", ".join(f"{d:.4f}" for d in deflections))


def _interp_endpoints(model: FieldModel, rec: datagen.ToolRecord):
    """Pick the zero-anchor code (left) and the max-deflection code (right)."""
    anchor_id, max_id, max_disp = None, None, -1.0
    for cond in rec.conditions:
        if cond["split"] != "train":
            continue
        dep_id = training.deformation_id(rec.tool_id, cond["index"])
        if dep_id not in model.deformation_ids:
            continue
        if cond["zero_anchor"]:
            anchor_id = dep_id
            continue
        disp = float(np.linalg.norm(cond["cloud"].points - rec.nominal_cloud.points, axis=1).max())
        if disp > max_disp:
            max_disp, max_id = disp, dep_id
    if anchor_id is None or max_id is None:
        raise DatasetError(f"{rec.tool_id}: need a zero anchor and a loaded condition to interpolate")
    return (model.force_code(anchor_id).numpy(), model.force_code(max_id).numpy(),
            anchor_id, max_id)


@main.command()
@with_config
def xsection(cfg):
    """Export planar cross-sections of the trained fields."""
    model = _load_model(cfg)
    records = _load_records(cfg)
    xcfg = cfg["xsection"]
    rec = _find_tool(records, xcfg["tool"])
    alpha = model.object_code(rec.tool_id)
    z = model.force_code(training.deformation_id(rec.tool_id, xcfg["condition"]))
    section = reconstruct.export_cross_section(model, alpha, z,
                                               (xcfg["axis"], xcfg["offset"]),
                                               xcfg["resolution"])
    out = _out_dir(cfg, "xsection")
    section.save(out / "grids")
    section.to_csv(out / "section.csv")
    fig = plotting.save_cross_section_figure(section, out / "section.png")
    outputs = [str(out / "grids"), str(out / "section.csv"), str(fig)]
    cfg_mod.write_run_manifest(out, "xsection", cfg, outputs)
    click.echo(f"cross-section {xcfg['axis']}={xcfg['offset']} -> {out}")


@main.command()
@with_config
def correspond(cfg):
    """Track painted points between two deformation states."""
    model = _load_model(cfg)
    records = _load_records(cfg)
    ccfg = cfg["correspond"]
    rec = _find_tool(records, ccfg["tool"])
    cond_a = _find_condition(rec, ccfg["condition_a"])
    _find_condition(rec, ccfg["condition_b"])
    alpha = model.object_code(rec.tool_id)
    z_a = model.force_code(training.deformation_id(rec.tool_id, ccfg["condition_a"]))
    z_b = model.force_code(training.deformation_id(rec.tool_id, ccfg["condition_b"]))

    marked = geometry.subsample(cond_a["cloud"], min(ccfg["n_points"], len(cond_a["cloud"])), seed=0)
    result = reconstruct.correspondences(model, alpha, z_a, z_b, marked)
    stripes = reconstruct.paint_stripes(result.source, n_stripes=ccfg["n_stripes"])

    out = _out_dir(cfg, "correspond")
    geometry.write_ply(out / "state_a.ply", result.source, scalar=stripes.astype(float),
                       scalar_name="stripe")
    geometry.write_ply(out / "state_b.ply", result.target, scalar=stripes.astype(float),
                       scalar_name="stripe")
    with open(out / "pairs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ax", "ay", "az", "bx", "by", "bz",
                         "dx", "dy", "dz", "converged", "stripe"])
        for i in range(len(result.source)):
            writer.writerow([*result.source[i], *result.target[i], *result.delta[i],
                             int(result.converged[i]), int(stripes[i])])
    outputs = [str(out / "state_a.ply"), str(out / "state_b.ply"), str(out / "pairs.csv")]
    cfg_mod.write_run_manifest(out, "correspond", cfg, outputs)
    n_ok = int(result.converged.sum())
    click.echo(f"tracked {len(result.source)} points ({n_ok} converged) -> {out}")


@main.command("eval")
@with_config
def eval_cmd(cfg):
    """Evaluate reconstruction accuracy over the dataset splits."""
    model = _load_model(cfg)
    records = _load_records(cfg)
    ecfg = cfg["eval"]
    table = metrics.eval_model(model, records, recon_resolution=ecfg["recon_resolution"],
                               recon_points=ecfg["recon_points"],
                               gt_points_train=ecfg["gt_points_train"],
                               gt_points_test=ecfg["gt_points_test"])
    out = _out_dir(cfg, "eval")
    with open(out / "metrics.json", "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    text = metrics.format_metrics_table(table, scale_1e3=ecfg["scale_1e3"])
    (out / "metrics.txt").write_text(text + "\n")
    fig = plotting.save_metrics_bars(table, out / "metrics.png", scale_1e3=ecfg["scale_1e3"])
    cfg_mod.write_run_manifest(out, "eval", cfg,
                               [str(out / "metrics.json"), str(out / "metrics.txt"), str(fig)])
    click.echo(text)


if __name__ == "__main__":
    main()
