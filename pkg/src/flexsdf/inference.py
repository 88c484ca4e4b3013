"""Deformation-state recovery from partial observations.

With all network weights frozen, gradient descent on the pooled contact
feature (and, when the reaction force is unknown, on the force slot of the
fusion input) minimizes the clamped composed-SDF magnitude at the visible
on-surface points. Also hosts force-code interpolation/extrapolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError, InvalidStateError, ShapeError
from .fieldnet import FieldModel
from .geometry import PointCloud
from . import reconstruct
from .training import clamp


@dataclass
class PartialObservation:
    """On-surface points visible from one view, the optional measured
    reaction force, and the object identity (id string or a code from the
    trained table)."""

    visible_points: PointCloud
    known_u: np.ndarray | None = None
    alpha: object = None  # object id (str) or a code vector

    def __post_init__(self):
        if len(self.visible_points) == 0:
            raise InvalidInputError("visible_points must be non-empty")
        if self.known_u is not None:
            self.known_u = np.asarray(self.known_u, dtype=np.float64).reshape(3)


@dataclass
class InferenceResult:
    contact_feature: np.ndarray
    z: np.ndarray
    u_estimate: np.ndarray | None
    loss_trajectory: list[float]
    reconstructed_cloud: PointCloud | None
    diverged: bool


def _resolve_alpha(model: FieldModel, alpha) -> torch.Tensor:
    if isinstance(alpha, str):
        return model.object_code(alpha)
    alpha = torch.as_tensor(np.asarray(alpha), dtype=model.object_codes.dtype)
    if alpha.shape != (model.cfg.object_code_dim,):
        raise ShapeError(f"object code must be ({model.cfg.object_code_dim},)")
    with torch.no_grad():
        gaps = torch.linalg.vector_norm(model.object_codes - alpha, dim=1)
    if not bool((gaps < 1e-5).any()):
        raise InvalidStateError("object code does not match any trained object")
    return alpha


def infer_deformation(model: FieldModel, obs: PartialObservation, iters: int = 300,
                      lr: float = 1e-3, seed: int = 0, restarts: int = 3,
                      delta: float = 0.1, recon_resolution: int = 64,
                      recon_points: int = 4096,
                      ray_augment: tuple[np.ndarray, np.ndarray] | None = None,
                      ray_weight: float = 0.1) -> InferenceResult:
    """Optimize the contact feature against a partial view.

    Network weights are untouched; only the pooled pre-fusion feature (plus a
    free force slot when ``obs.known_u`` is None) receives gradients. Each
    restart draws the feature from N(0, 0.01^2); the restart with the best
    final loss wins, and within a run the best-so-far iterate is returned, so
    the trajectory's last entry never exceeds its first. ``ray_augment``
    optionally supplies free-space points (with their per-point minimum
    clearance) collected along camera rays; they add a hinge penalty pushing
    the composed SDF non-negative there.
    """
    if iters < 0:
        raise InvalidInputError("iters must be >= 0")
    if not model.deformation_ids:
        raise InvalidStateError("model has no trained deformations; run deformation training first")
    alpha = _resolve_alpha(model, obs.alpha).detach()
    visible = torch.as_tensor(obs.visible_points.points, dtype=torch.float32)
    feat_dim = model.force_encoder.feature_dim

    rays = None
    if ray_augment is not None:
        ray_pts, _clearance = ray_augment
        rays = torch.as_tensor(np.asarray(ray_pts), dtype=torch.float32)

    def loss_fn(feature: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        z = model.force_encoder.fuse(feature, u)
        s = model.deformed_sdf(z, alpha, visible)
        loss = clamp(s, delta).abs().sum()
        if rays is not None:
            s_ray = model.deformed_sdf(z, alpha, rays)
            loss = loss + ray_weight * torch.relu(-s_ray).sum()
        return loss

    best: dict | None = None
    for r in range(max(1, restarts)):
        gen = torch.Generator().manual_seed(seed + 7919 * r)
        feature = torch.normal(0.0, 0.01, (feat_dim,), generator=gen).requires_grad_(True)
        if obs.known_u is not None:
            u = torch.as_tensor(obs.known_u, dtype=torch.float32)
            leaves = [feature]
        else:
            u = torch.zeros(3, requires_grad=True)
            leaves = [feature, u]
        opt = torch.optim.Adam(leaves, lr=lr)

        trajectory = [float(loss_fn(feature, u).item())]
        run_best = {"loss": trajectory[0], "feature": feature.detach().clone(),
                    "u": u.detach().clone()}
        for _ in range(iters):
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(feature, u)
            loss.backward()
            opt.step()
            value = float(loss_fn(feature, u).item())
            trajectory.append(value)
            if value < run_best["loss"]:
                run_best = {"loss": value, "feature": feature.detach().clone(),
                            "u": u.detach().clone()}
        diverged = trajectory[-1] > trajectory[0]
        if trajectory[-1] != run_best["loss"]:
            trajectory.append(run_best["loss"])  # final entry reflects the returned iterate
        if best is None or run_best["loss"] < best["loss"]:
            best = {**run_best, "trajectory": trajectory, "diverged": diverged}

    with torch.no_grad():
        z = model.force_encoder.fuse(best["feature"], best["u"])
    recon = None
    if iters > 0 and recon_resolution >= 2:
        mesh = reconstruct.marching_cubes(model, alpha, z, recon_resolution)
        recon = mesh.sample_surface(recon_points, seed=seed)
    return InferenceResult(
        contact_feature=best["feature"].numpy().astype(np.float64),
        z=z.numpy().astype(np.float64),
        u_estimate=None if obs.known_u is not None else best["u"].numpy().astype(np.float64),
        loss_trajectory=best["trajectory"],
        reconstructed_cloud=recon,
        diverged=best["diverged"],
    )


def interpolate_codes(z_l, z_r, ts) -> list[np.ndarray]:
    """Linear path z(t) = (1 - t) z_l + t z_r; t outside [0, 1] extrapolates."""
    z_l = np.asarray(z_l, dtype=np.float64)
    z_r = np.asarray(z_r, dtype=np.float64)
    if z_l.shape != z_r.shape or z_l.ndim != 1:
        raise ShapeError(f"force codes must be 1-D with equal shape, got {z_l.shape} vs {z_r.shape}")
    return [(1.0 - t) * z_l + t * z_r for t in ts]


def reconstruct_from_code(model: FieldModel, alpha, z, resolution: int):
    """Mesh of the deformed shape under the given code pair."""
    alpha = _resolve_alpha(model, alpha) if isinstance(alpha, str) else alpha
    z_t = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    return reconstruct.marching_cubes(model, alpha, z_t, resolution)


def synthesize_partial_view(cloud: PointCloud, camera: np.ndarray,
                            drop_axial: tuple[float, float] | None = None,
                            axis: int = 0) -> PointCloud:
    """Single-pinhole-view approximation of a deformed cloud: keep points
    whose outward normal faces the camera, optionally cropping away axial
    bands (e.g. handle and tip) first."""
    if cloud.normals is None:
        raise InvalidInputError("partial-view synthesis needs surface normals")
    pts, normals = cloud.points, cloud.normals
    keep = np.ones(len(pts), dtype=bool)
    if drop_axial is not None:
        lo, hi = drop_axial
        keep &= (pts[:, axis] >= lo) & (pts[:, axis] <= hi)
    camera = np.asarray(camera, dtype=np.float64)
    view = camera[None, :] - pts
    keep &= np.einsum("ij,ij->i", view, normals) > 0.0
    if not keep.any():
        raise InvalidInputError("no points visible from the requested viewpoint")
    return PointCloud(pts[keep], normals[keep], frame_scale=cloud.frame_scale)


def sample_camera_rays(visible: PointCloud, camera: np.ndarray, n_per_point: int = 2,
                       margin: float = 0.05, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Free-space samples along rays from the camera to each visible point,
    stopping ``margin`` short of the surface; returns (points, clearance)."""
    rng = np.random.default_rng(seed)
    camera = np.asarray(camera, dtype=np.float64)
    pts = visible.points
    ts = rng.uniform(0.15, 1.0 - margin, size=(len(pts), n_per_point))
    samples = camera[None, None, :] + ts[..., None] * (pts[:, None, :] - camera[None, None, :])
    clearance = (1.0 - ts) * np.linalg.norm(pts - camera, axis=1)[:, None]
    return samples.reshape(-1, 3), clearance.reshape(-1)
