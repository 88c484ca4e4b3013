"""Loss terms and the two-phase optimization.

Phase one fits the nominal shapes: the object hypernetwork and the object
codes are optimized jointly against clamped signed distances plus a
surface-normal alignment term, with Gaussian priors on codes and decoded
weights. Phase two freezes the object side and trains the force encoder and
deformation hypernetwork end-to-end through the composed SDF, a Chamfer
correspondence term, and a minimal-correction prior on the field magnitude.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import ContactObservation, ToolRecord
from .errors import DatasetError, InvalidInputError, NumericalError
from .fieldnet import FieldModel, ModelConfig, siren_forward
from .geometry import PointCloud, SdfSampleSet


@dataclass
class LossWeights:
    """Weights of every loss term plus the SDF clamp threshold delta."""

    lambda_normal: float = 0.1   # surface-normal alignment inside L_sdf
    lambda1: float = 1.0         # composed SDF term in the deformed loss
    lambda2: float = 1e-4        # latent prior, nominal phase
    lambda3: float = 1e-4        # decoded-weight prior
    lambda4: float = 1e-4        # latent prior, deformed phase
    lambda_c: float = 1e-2       # minimal-correction prior
    delta: float = 0.1           # clamp threshold, normalized units

    def __post_init__(self):
        if self.delta <= 0:
            raise InvalidInputError("delta must be > 0")
        for name in ("lambda_normal", "lambda1", "lambda2", "lambda3", "lambda4", "lambda_c"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")


def clamp(s, delta: float):
    """Symmetric clamp min(delta, max(-delta, s)); elementwise on tensors."""
    if delta <= 0:
        raise InvalidInputError("delta must be > 0")
    if isinstance(s, torch.Tensor):
        return torch.clamp(s, -delta, delta)
    return min(delta, max(-delta, s))


def _points_tensor(obj) -> torch.Tensor:
    if isinstance(obj, torch.Tensor):
        t = obj
    elif isinstance(obj, PointCloud):
        t = torch.as_tensor(obj.points)
    else:
        t = torch.as_tensor(np.asarray(obj))
    if t.ndim != 2 or t.shape[1] != 3:
        raise InvalidInputError(f"expected an (N, 3) point set, got {tuple(t.shape)}")
    return t


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # broadcasted exact squared distances; bitwise-transpose-symmetric
    return (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)


def chamfer(s1, s2) -> torch.Tensor:
    """Symmetric Chamfer distance: the bidirectional mean of squared
    nearest-neighbor distances. Exactly symmetric in its arguments."""
    a = _points_tensor(s1)
    b = _points_tensor(s2)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("chamfer distance requires non-empty clouds")
    b = b.to(a.dtype)
    chunk = 2048
    mins_ab = []
    mins_ba = torch.full((len(b),), float("inf"), dtype=a.dtype)
    for start in range(0, len(a), chunk):
        d = _sq_dists(a[start:start + chunk], b)
        mins_ab.append(d.min(dim=1).values)
        mins_ba = torch.minimum(mins_ba, d.min(dim=0).values)
    return torch.cat(mins_ab).mean() + mins_ba.mean()


def latent_penalty(code: torch.Tensor) -> torch.Tensor:
    """Gaussian-prior penalty ||code / dim||_2 for one latent code."""
    return torch.linalg.vector_norm(code / code.shape[-1])


def hyper_penalty(flat_params: torch.Tensor) -> torch.Tensor:
    """Decoded-weight penalty ||theta||_2 / len(theta)."""
    return torch.linalg.vector_norm(flat_params) / flat_params.numel()


def regularizers(model: FieldModel) -> tuple[torch.Tensor, torch.Tensor]:
    """Whole-table latent and decoded-weight penalties.

    The latent penalty sums over every object code and (once populated) every
    cached force code; the weight penalty sums the decoded object parameters
    per object and, per cached deformation, the decoded deformation
    parameters weighted 1:1.
    """
    l_latent = torch.zeros((), dtype=model.object_codes.dtype)
    l_hyper = torch.zeros((), dtype=model.object_codes.dtype)
    for i in range(len(model.object_ids)):
        alpha = model.object_codes[i]
        l_latent = l_latent + latent_penalty(alpha)
        _, flat = model.psi_o(alpha)
        l_hyper = l_hyper + hyper_penalty(flat)
    for j in range(model.force_codes.shape[0]):
        z = model.force_codes[j]
        l_latent = l_latent + latent_penalty(z)
    return l_latent, l_hyper


def _samples_tensors(samples: SdfSampleSet, dtype=torch.float32):
    q = torch.as_tensor(samples.queries, dtype=dtype)
    s = torch.as_tensor(samples.sdf_values, dtype=dtype)
    mask = torch.as_tensor(samples.surface_mask)
    n = torch.as_tensor(samples.normals, dtype=dtype)
    return q, s, mask, n


def _check_surface_normals(samples: SdfSampleSet) -> None:
    if samples.surface_mask.any():
        norms = np.linalg.norm(samples.normals[samples.surface_mask], axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise InvalidInputError("surface samples must carry unit normals")


def normal_alignment(grad: torch.Tensor, normals: torch.Tensor) -> torch.Tensor:
    """Sum of (1 - <grad_hat, n*>) with the field gradient normalized.

    A true SDF has a unit gradient, making the inner product a cosine; on a
    free-form network the unnormalized product is unbounded below and lets
    the optimizer diverge by inflating the gradient magnitude, so the unit
    direction is used.
    """
    grad_hat = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-9)
    return (1.0 - (grad_hat * normals).sum(-1)).sum()


def nominal_sdf_loss(model: FieldModel, alpha, samples: SdfSampleSet,
                     weights: LossWeights) -> torch.Tensor:
    """Clamped SDF regression plus normal alignment for one object:
    sum |clamp(O(x)) - clamp(s*)| over all queries and
    lambda_normal * sum (1 - <grad O, n*>) over the on-surface subset."""
    _check_surface_normals(samples)
    q, s_true, mask, n_true = _samples_tensors(samples, dtype=model.object_codes.dtype)
    s_pred = model.object_sdf(alpha, q)
    loss = (clamp(s_pred, weights.delta) - clamp(s_true, weights.delta)).abs().sum()
    if mask.any():
        _, grad = model.object_sdf_grad(alpha, q[mask])
        loss = loss + weights.lambda_normal * normal_alignment(grad, n_true[mask])
    return loss


def deformed_sdf_loss(model: FieldModel, z, alpha, samples: SdfSampleSet,
                      weights: LossWeights) -> torch.Tensor:
    """Eq-5-style composed SDF loss for one deformation: the clamp term runs
    through object_sdf(x + D(x)); the normal term aligns the composed field's
    spatial gradient with the deformed-surface normals."""
    _check_surface_normals(samples)
    q, s_true, mask, n_true = _samples_tensors(samples, dtype=model.object_codes.dtype)
    s_pred = model.deformed_sdf(z, alpha, q)
    loss = (clamp(s_pred, weights.delta) - clamp(s_true, weights.delta)).abs().sum()
    if mask.any():
        _, grad = model.deformed_sdf_grad(z, alpha, q[mask])
        loss = loss + weights.lambda_normal * normal_alignment(grad, n_true[mask])
    return loss


def correction_loss(model: FieldModel, z, alpha, deformed_points, nominal_points,
                    weights: LossWeights) -> tuple[torch.Tensor, torch.Tensor]:
    """Correspondence term f_c: Chamfer distance between the field-corrected
    deformed cloud and the true nominal cloud, plus the mean field magnitude
    (minimal-correction prior). Returns (chamfer, mean_norm); the combined
    term is chamfer + lambda_c * mean_norm."""
    p = _points_tensor(deformed_points).to(model.object_codes.dtype)
    p_nom = _points_tensor(nominal_points).to(model.object_codes.dtype)
    d = model.deformation_field(z, alpha, p)
    cd = chamfer(p + d, p_nom)
    mean_norm = torch.linalg.vector_norm(d, dim=-1).mean()
    return cd, mean_norm


def infer_loss(model: FieldModel, z, alpha, visible_points, delta: float) -> torch.Tensor:
    """Partial-observation objective: sum |clamp(composed SDF)| over visible
    on-surface points."""
    q = _points_tensor(visible_points).to(model.object_codes.dtype)
    return clamp(model.deformed_sdf(z, alpha, q), delta).abs().sum()


# ---------------------------------------------------------------------------
# Training orchestration.
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs_nominal: int = 2000
    epochs_deformed: int = 800
    queries_per_step: int = 4096
    cloud_subsample: int = 1024
    lr_net: float = 1e-4
    lr_codes: float = 1e-3
    cosine_decay: bool = True
    freeze_object: bool = True
    seed: int = 0
    log_path: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["point_feature_dims"] = list(d["model"]["point_feature_dims"])
        return d


@dataclass
class TrainState:
    model: FieldModel
    config: TrainConfig
    epoch: int = 0
    phase: str = "init"
    history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        self.model.save(path, provenance={
            "phase": self.phase, "epoch": self.epoch, "seed": self.config.seed,
            "config": self.config.to_dict(),
        })


class _EpochLog:
    def __init__(self, path: str | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.path, "w")
        else:
            self.fh = None

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _step_indices(n: int, k: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    if k >= n:
        return torch.arange(n)
    return torch.randperm(n, generator=g)[:k]


def _guard_finite(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"loss diverged ({context}): {loss.item()}")


def _record_tensors(sdf: SdfSampleSet):
    q, s, mask, n = _samples_tensors(sdf)
    surf = torch.nonzero(mask, as_tuple=False).squeeze(-1)
    off = torch.nonzero(~mask, as_tuple=False).squeeze(-1)
    return {"q": q, "s": s, "n": n, "surf_idx": surf, "off_idx": off}


def _split_batch(cache: dict, k: int, seed: int):
    """Draw a step batch preserving the record's on/off-surface proportions."""
    n_surf, n_off = len(cache["surf_idx"]), len(cache["off_idx"])
    total = n_surf + n_off
    k_surf = min(n_surf, int(round(k * n_surf / total)))
    k_off = min(n_off, k - k_surf)
    si = cache["surf_idx"][_step_indices(n_surf, k_surf, seed)]
    oi = cache["off_idx"][_step_indices(n_off, k_off, seed + 1)]
    return si, oi


def pretrain_nominal(records: list[ToolRecord], config: TrainConfig) -> TrainState:
    """Fit the object hypernetwork and object codes on the nominal shapes,
    then freeze both. Deterministic for a fixed seed and dataset."""
    if not records:
        raise DatasetError("dataset holds no nominal records")
    torch.manual_seed(config.seed)
    model = FieldModel(config.model, [r.tool_id for r in records], seed=config.seed)
    w = config.weights
    caches = [_record_tensors(r.nominal_sdf) for r in records]
    for r in records:
        _check_surface_normals(r.nominal_sdf)

    opt = torch.optim.Adam([
        {"params": model.psi_o.parameters(), "lr": config.lr_net},
        {"params": [model.object_codes], "lr": config.lr_codes},
    ])
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs_nominal, 1))
             if config.cosine_decay else None)
    log = _EpochLog(config.log_path)
    state = TrainState(model=model, config=config, phase="nominal")
    t0 = time.time()
    try:
        for epoch in range(config.epochs_nominal):
            totals = {"sdf": 0.0, "normal": 0.0, "latent": 0.0, "hyper": 0.0, "total": 0.0}
            for i, rec in enumerate(records):
                cache = caches[i]
                si, oi = _split_batch(cache, config.queries_per_step,
                                      seed=config.seed * 1_000_003 + epoch * 131 + i)
                alpha = model.object_codes[i]
                params, flat = model.psi_o(alpha)

                x_off = cache["q"][oi]
                s_off = siren_forward(params, x_off, model.cfg.w0).squeeze(-1)
                sdf_term = (clamp(s_off, w.delta) - clamp(cache["s"][oi], w.delta)).abs().sum()

                x_s = cache["q"][si].clone().requires_grad_(True)
                s_surf = siren_forward(params, x_s, model.cfg.w0).squeeze(-1)
                sdf_term = sdf_term + (clamp(s_surf, w.delta) - clamp(cache["s"][si], w.delta)).abs().sum()
                grad = torch.autograd.grad(s_surf.sum(), x_s, create_graph=True)[0]
                normal_term = normal_alignment(grad, cache["n"][si])

                l_latent = latent_penalty(alpha)
                l_hyper = hyper_penalty(flat)
                loss = sdf_term + w.lambda_normal * normal_term + w.lambda2 * l_latent + w.lambda3 * l_hyper
                _guard_finite(loss, f"nominal epoch {epoch} object {rec.tool_id}")

                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                totals["sdf"] += sdf_term.item()
                totals["normal"] += normal_term.item()
                totals["latent"] += l_latent.item()
                totals["hyper"] += l_hyper.item()
                totals["total"] += loss.item()
            if sched:
                sched.step()
            entry = {"phase": "nominal", "epoch": epoch, "lr": opt.param_groups[0]["lr"],
                     "elapsed_s": round(time.time() - t0, 3), **{k: v / len(records) for k, v in totals.items()}}
            state.history.append(entry)
            log.write(entry)
            state.epoch = epoch + 1
    finally:
        log.close()
    model.freeze_object_module()
    return state


def _deformation_records(records: list[ToolRecord], split: str = "train"):
    out = []
    for ti, rec in enumerate(records):
        for cond in rec.conditions:
            if cond["split"] == split:
                out.append((ti, rec, cond))
    return out


def deformation_id(tool_id: str, index: int) -> str:
    return f"{tool_id}/def_{index}"


def train_deformed(state: TrainState, records: list[ToolRecord], config: TrainConfig | None = None) -> TrainState:
    """Train the deformation hypernetwork and force encoder through the
    composed SDF on every training deformation; the pretrained object module
    stays frozen unless ``config.freeze_object`` is False. Converged force
    codes are cached into the model table afterwards."""
    config = config or state.config
    model = state.model
    if not model.object_frozen and config.freeze_object:
        model.freeze_object_module()
    w = config.weights
    torch.manual_seed(config.seed + 1)

    deformations = _deformation_records(records, "train")
    if not deformations:
        raise DatasetError("dataset holds no training deformations")
    for ti, rec, cond in deformations:
        if len(cond["cloud"]) != len(rec.nominal_cloud):
            raise DatasetError(
                f"{rec.tool_id}/def_{cond['index']}: deformed cloud is not index-aligned "
                "with the nominal correspondence cloud")

    groups = [
        {"params": model.psi_d.parameters(), "lr": config.lr_net},
        {"params": model.force_encoder.parameters(), "lr": config.lr_net},
    ]
    if not config.freeze_object:
        for p in model.psi_o.parameters():
            p.requires_grad_(True)
        model.object_codes.requires_grad_(True)
        model.object_frozen = False
        groups.append({"params": model.psi_o.parameters(), "lr": config.lr_net})
        groups.append({"params": [model.object_codes], "lr": config.lr_codes})
    opt = torch.optim.Adam(groups)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs_deformed, 1))
             if config.cosine_decay else None)

    caches = {}
    for ti, rec, cond in deformations:
        key = (ti, cond["index"])
        caches[key] = {
            **_record_tensors(cond["sdf"]),
            "cloud": torch.as_tensor(cond["cloud"].points, dtype=torch.float32),
            "nominal": torch.as_tensor(rec.nominal_cloud.points, dtype=torch.float32),
            "q_contact": torch.as_tensor(
                rec.nominal_cloud.points[np.asarray(cond["contacts"]["q_indices"], dtype=np.int64)],
                dtype=torch.float32),
            "u": torch.as_tensor(cond["contacts"]["u"], dtype=torch.float32),
        }

    log = _EpochLog(config.log_path)
    state.phase = "deformed"
    t0 = time.time()
    try:
        for epoch in range(config.epochs_deformed):
            totals = {"sdf": 0.0, "normal": 0.0, "fc_cd": 0.0, "fc_norm": 0.0,
                      "latent": 0.0, "hyper": 0.0, "total": 0.0}
            for ri, (ti, rec, cond) in enumerate(deformations):
                cache = caches[(ti, cond["index"])]
                step_seed = (config.seed + 7) * 1_000_003 + epoch * 977 + ri
                alpha = model.object_codes[ti]
                _, z = model.force_encoder(cache["q_contact"], cache["u"])
                theta_d, flat_d = model.psi_d(torch.cat([z, alpha]))
                theta_o, flat_o = model.decode_object_params(alpha)

                si, oi = _split_batch(cache, config.queries_per_step, step_seed)
                x_off = cache["q"][oi]
                y_off = x_off + siren_forward(theta_d, x_off, model.cfg.w0)
                s_off = siren_forward(theta_o, y_off, model.cfg.w0).squeeze(-1)
                sdf_term = (clamp(s_off, w.delta) - clamp(cache["s"][oi], w.delta)).abs().sum()

                x_s = cache["q"][si].clone().requires_grad_(True)
                y_s = x_s + siren_forward(theta_d, x_s, model.cfg.w0)
                s_surf = siren_forward(theta_o, y_s, model.cfg.w0).squeeze(-1)
                sdf_term = sdf_term + (clamp(s_surf, w.delta) - clamp(cache["s"][si], w.delta)).abs().sum()
                grad = torch.autograd.grad(s_surf.sum(), x_s, create_graph=True)[0]
                normal_term = normal_alignment(grad, cache["n"][si])

                pick = _step_indices(len(cache["cloud"]), config.cloud_subsample, step_seed + 3)
                p = cache["cloud"][pick]
                d_p = siren_forward(theta_d, p, model.cfg.w0)
                fc_cd = chamfer(p + d_p, cache["nominal"][pick])
                fc_norm = torch.linalg.vector_norm(d_p, dim=-1).mean()

                l_latent = latent_penalty(z)
                l_hyper = hyper_penalty(flat_o) + hyper_penalty(flat_d)
                loss = (fc_cd + w.lambda_c * fc_norm
                        + w.lambda1 * (sdf_term + w.lambda_normal * normal_term)
                        + w.lambda3 * l_hyper + w.lambda4 * l_latent)
                _guard_finite(loss, f"deformed epoch {epoch} record {rec.tool_id}/def_{cond['index']}")

                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                totals["sdf"] += sdf_term.item()
                totals["normal"] += normal_term.item()
                totals["fc_cd"] += fc_cd.item()
                totals["fc_norm"] += fc_norm.item()
                totals["latent"] += l_latent.item()
                totals["hyper"] += l_hyper.item()
                totals["total"] += loss.item()
            if sched:
                sched.step()
            entry = {"phase": "deformed", "epoch": epoch, "lr": opt.param_groups[0]["lr"],
                     "elapsed_s": round(time.time() - t0, 3),
                     **{k: v / len(deformations) for k, v in totals.items()}}
            state.history.append(entry)
            log.write(entry)
            state.epoch = epoch + 1
    finally:
        log.close()

    # cache converged force codes for interpolation workflows
    ids, codes = [], []
    with torch.no_grad():
        for ti, rec, cond in deformations:
            cache = caches[(ti, cond["index"])]
            _, z = model.force_encoder(cache["q_contact"], cache["u"])
            ids.append(deformation_id(rec.tool_id, cond["index"]))
            codes.append(z)
    model.set_force_codes(ids, torch.stack(codes))
    return state
