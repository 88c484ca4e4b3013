"""Evaluation harness: Chamfer and L1 metrics over dataset splits.

Chamfer distances compare reconstructed surface clouds against ground-truth
on-surface points; L1 errors compare predicted and true signed distances,
split into on-surface and off-surface partitions. Normalized-unit values are
also reported at physical scale via each tool's frame scale.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.spatial import cKDTree

from .datagen import ToolRecord
from .errors import InvalidInputError
from .fieldnet import FieldModel
from .geometry import PointCloud, SdfSampleSet, subsample
from . import reconstruct
from .training import deformation_id

BRUTE_FORCE_LIMIT = 512  # below this size nearest neighbors skip the tree


def _nn_sq_dists(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if len(targets) < BRUTE_FORCE_LIMIT:
        diff = queries[:, None, :] - targets[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    dist, _ = cKDTree(targets).query(queries)
    return dist**2


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance (bidirectional mean of squared
    nearest-neighbor distances) between two point sets."""
    a = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    b = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("chamfer distance requires non-empty clouds")
    return float(_nn_sq_dists(a, b).mean() + _nn_sq_dists(b, a).mean())


def l1_sdf_error(model: FieldModel, alpha, z_or_none, samples: SdfSampleSet
                 ) -> tuple[float | None, float | None]:
    """Unclamped mean |predicted - true| signed distance over the on-surface
    and off-surface partitions; an empty partition reports None."""
    q = torch.as_tensor(samples.queries, dtype=torch.float32)
    with torch.no_grad():
        if z_or_none is None:
            pred = model.object_sdf(alpha, q).numpy()
        else:
            pred = model.deformed_sdf(z_or_none, alpha, q).numpy()
    err = np.abs(pred.astype(np.float64) - samples.sdf_values)
    mask = samples.surface_mask
    on = float(err[mask].mean()) if mask.any() else None
    off = float(err[~mask].mean()) if (~mask).any() else None
    return on, off


def tip_deflection(points, nominal_points, axis: int = 0, frac: float = 0.05,
                   direction: np.ndarray | None = None) -> float:
    """Mean transverse displacement of the tool tip region (outermost
    ``frac`` of the axial extent), optionally signed along ``direction``."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    nom = nominal_points.points if isinstance(nominal_points, PointCloud) else np.asarray(nominal_points)
    lo, hi = nom[:, axis].min(), nom[:, axis].max()
    cut = hi - frac * (hi - lo)
    tip = pts[pts[:, axis] >= cut]
    tip_nom = nom[nom[:, axis] >= cut]
    if len(tip) == 0 or len(tip_nom) == 0:
        raise InvalidInputError("tip region is empty")
    disp = tip.mean(axis=0) - tip_nom.mean(axis=0)
    disp[axis] = 0.0
    if direction is not None:
        direction = np.asarray(direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        return float(disp @ direction)
    return float(np.linalg.norm(disp))


def _resolve_code(model: FieldModel, rec: ToolRecord, cond: dict) -> torch.Tensor:
    """Training deformations use the cached table code; held-out conditions
    are encoded from their contact observation (generalization path)."""
    dep_id = deformation_id(rec.tool_id, cond["index"])
    if dep_id in model.deformation_ids:
        return model.force_code(dep_id)
    q_idx = np.asarray(cond["contacts"]["q_indices"], dtype=np.int64)
    q = torch.as_tensor(rec.nominal_cloud.points[q_idx], dtype=torch.float32)
    u = torch.as_tensor(cond["contacts"]["u"], dtype=torch.float32)
    with torch.no_grad():
        _, z = model.force_encoder(q, u)
    return z


def _row_accumulator():
    return {"cd": [], "cd_m2": [], "l1_on": [], "l1_off": [], "l1m_on": [], "l1m_off": []}


def _accumulate(row: dict, cd: float, on, off, frame_scale: float) -> None:
    row["cd"].append(cd)
    row["cd_m2"].append(cd * frame_scale**2)
    if on is not None:
        row["l1_on"].append(on)
        row["l1m_on"].append(on * frame_scale)
    if off is not None:
        row["l1_off"].append(off)
        row["l1m_off"].append(off * frame_scale)


def _finalize(rows: dict) -> dict:
    out = {}
    for name, row in rows.items():
        if not row["cd"]:
            continue
        out[name] = {k: (float(np.mean(v)) if v else None) for k, v in row.items()}
        out[name]["count"] = len(row["cd"])
    return out


def eval_model(model: FieldModel, records: list[ToolRecord], recon_resolution: int = 128,
               recon_points: int = 5600, gt_points_train: int = 5600,
               gt_points_test: int = 800, seed: int = 0) -> dict:
    """Reproduce the accuracy-table structure: Chamfer distance between
    reconstruction and ground-truth surface clouds plus on/off-surface L1 SDF
    errors, aggregated over nominal / training-deformation / held-out rows.
    Nominal rows zero the deformation field. Values are raw (unscaled)."""
    if not records:
        raise InvalidInputError("empty evaluation split")
    rows = {"train_nominal": _row_accumulator(), "train_deformed": _row_accumulator(),
            "test_deformed": _row_accumulator()}
    details = []

    for rec in records:
        alpha = model.object_code(rec.tool_id)
        fs = rec.frame_scale
        recon = reconstruct.reconstruct_cloud(model, alpha, None, recon_resolution,
                                              recon_points, seed=seed)
        gt = subsample(rec.nominal_cloud, min(gt_points_train, len(rec.nominal_cloud)), seed=seed)
        cd = chamfer_distance(recon, gt)
        on, off = l1_sdf_error(model, alpha, None, rec.nominal_sdf)
        _accumulate(rows["train_nominal"], cd, on, off, fs)
        details.append({"tool": rec.tool_id, "record": "nominal", "cd": cd,
                        "l1_on": on, "l1_off": off})

        for cond in rec.conditions:
            z = _resolve_code(model, rec, cond)
            recon = reconstruct.reconstruct_cloud(model, alpha, z, recon_resolution,
                                                  recon_points, seed=seed)
            n_gt = gt_points_train if cond["split"] == "train" else gt_points_test
            gt = subsample(cond["cloud"], min(n_gt, len(cond["cloud"])), seed=seed)
            cd = chamfer_distance(recon, gt)
            on, off = l1_sdf_error(model, alpha, z, cond["sdf"])
            row = "train_deformed" if cond["split"] == "train" else "test_deformed"
            _accumulate(rows[row], cd, on, off, fs)
            details.append({"tool": rec.tool_id, "record": f"def_{cond['index']}",
                            "split": cond["split"], "cd": cd, "l1_on": on, "l1_off": off})

    table = _finalize(rows)
    table["details"] = details
    return table


_ROW_LABELS = {"train_nominal": "Train.Nom.", "train_deformed": "Train.Def.",
               "test_deformed": "Test.Def."}
_COLUMNS = [("cd", "CD"), ("cd_m2", "CD_m2"), ("l1_on", "L1 on"), ("l1_off", "L1 off"),
            ("l1m_on", "L1_m on"), ("l1m_off", "L1_m off")]


def format_metrics_table(table: dict, scale_1e3: bool = True) -> str:
    """Aligned plain-text table mirroring the accuracy-table layout."""
    factor = 1e3 if scale_1e3 else 1.0
    header = "Metric" + ("(x10^3)" if scale_1e3 else "")
    widths = [max(len(header), 11)] + [10] * len(_COLUMNS)
    lines = ["  ".join([header.ljust(widths[0])] + [c[1].rjust(10) for c in _COLUMNS])]
    for key, label in _ROW_LABELS.items():
        if key not in table:
            continue
        cells = [label.ljust(widths[0])]
        for col, _ in _COLUMNS:
            val = table[key].get(col)
            cells.append(("   absent " if val is None else f"{val * factor:10.4f}"))
        lines.append("  ".join(cells))
    return "\n".join(lines)
