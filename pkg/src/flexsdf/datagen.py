"""Synthetic deformable-tool dataset generator.

Tools are parametric handle+blade solids clamped at the handle end. Contact
loads deform them with the closed-form cantilever deflection of linear
elasticity, so every generated sample carries an exactly verifiable
displacement field and a static-equilibrium reaction force.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, InvalidInputError, InvalidSpecError, RegimeError
from . import geometry
from .geometry import PointCloud, SdfSampleSet, Transform, TriangleMesh

AXIS = np.array([1.0, 0.0, 0.0])  # tool axis: clamp at x=0, tip at x=total_length


@dataclass
class ToolSpec:
    """Parametric tool: square-ish handle lofted into a thin rectangular blade.

    All dimensions in meters, ``youngs_modulus`` in Pa. The clamped region
    (robot grasp) is the axial interval [0, clamp_length] at the handle end;
    the rest of the tool behaves as a uniform cantilever whose bending
    stiffness uses the blade cross-section.
    """

    name: str
    handle_length: float
    handle_radius: float
    blade_length: float
    blade_width: float
    blade_thickness: float
    youngs_modulus: float
    clamp_length: float

    def __post_init__(self):
        dims = [self.handle_length, self.handle_radius, self.blade_length,
                self.blade_width, self.blade_thickness, self.youngs_modulus, self.clamp_length]
        if any(d <= 0 for d in dims):
            raise InvalidSpecError(f"{self.name}: all dimensions and E must be > 0")
        if self.clamp_length >= self.handle_length:
            raise InvalidSpecError(f"{self.name}: clamped region must end within the handle")

    @property
    def total_length(self) -> float:
        return self.handle_length + self.blade_length

    @property
    def second_moment(self) -> float:
        """Area moment of the blade cross-section about its weak axis."""
        return self.blade_width * self.blade_thickness**3 / 12.0

    @property
    def bending_stiffness(self) -> float:
        return self.youngs_modulus * self.second_moment

    @property
    def cantilever_length(self) -> float:
        return self.total_length - self.clamp_length

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "handle_length": self.handle_length,
            "handle_radius": self.handle_radius,
            "blade_length": self.blade_length,
            "blade_width": self.blade_width,
            "blade_thickness": self.blade_thickness,
            "youngs_modulus": self.youngs_modulus,
            "clamp_length": self.clamp_length,
        }


@dataclass
class BoundaryCondition:
    """Point load on the tool surface plus the contact patch radius."""

    load_point: np.ndarray
    load_vector: np.ndarray
    contact_radius: float = 0.01

    def __post_init__(self):
        self.load_point = np.asarray(self.load_point, dtype=np.float64)
        self.load_vector = np.asarray(self.load_vector, dtype=np.float64)
        if self.contact_radius <= 0:
            raise InvalidInputError("contact_radius must be > 0")


@dataclass
class ContactObservation:
    """Contact locations Q (a subset of the nominal cloud) and the reaction
    force u measured at the fixture, in Newtons."""

    Q: PointCloud
    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64).reshape(3)


@dataclass
class DeformationSample:
    """One boundary condition: nominal and deformed clouds are index-aligned
    1:1, so ground-truth correspondences and displacements are implicit."""

    nominal_cloud: PointCloud
    deformed_cloud: PointCloud
    contacts: ContactObservation
    sdf_samples: SdfSampleSet | None
    tool_id: str
    q_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bc: BoundaryCondition | None = None


def cantilever_deflection(xi, load_station: float, magnitude: float, stiffness: float):
    """Transverse deflection of a clamped cantilever under a point load.

    For a load of ``magnitude`` applied at axial station ``load_station`` (a)
    measured from the clamp, the deflection at station xi is
    ``F xi^2 (3a - xi) / (6 EI)`` up to the load point and continues with the
    frozen slope ``F a^2 (3 xi - a) / (6 EI)`` beyond it.
    """
    xi = np.asarray(xi, dtype=np.float64)
    a = load_station
    w = np.where(
        xi <= a,
        magnitude * xi**2 * (3.0 * a - xi) / (6.0 * stiffness),
        magnitude * a**2 * (3.0 * xi - a) / (6.0 * stiffness),
    )
    return w


def cantilever_slope(xi, load_station: float, magnitude: float, stiffness: float):
    """d(deflection)/d(xi); constant past the load station."""
    xi = np.asarray(xi, dtype=np.float64)
    a = load_station
    return np.where(
        xi <= a,
        magnitude * xi * (2.0 * a - xi) / (2.0 * stiffness),
        magnitude * a**2 / (2.0 * stiffness),
    )


def _ring(section: str, x: float, half_w: float, half_h: float) -> np.ndarray:
    """8 points of a cross-section ring at station x, CCW in the y-z plane."""
    if section == "octagon":
        ang = np.deg2rad(np.arange(8) * 45.0 + 22.5)
        ys, zs = half_w * np.cos(ang), half_h * np.sin(ang)
    else:  # rectangle: corners + edge midpoints, ordered by angle
        ys = np.array([half_w, half_w, 0.0, -half_w, -half_w, -half_w, 0.0, half_w])
        zs = np.array([0.0, half_h, half_h, half_h, 0.0, -half_h, -half_h, -half_h])
    return np.stack([np.full(8, x), ys, zs], axis=1)


def build_nominal(spec: ToolSpec, surface_density: float = 300_000.0,
                  seed: int = 0) -> tuple[TriangleMesh, PointCloud]:
    """Watertight genus-0 mesh of the tool plus an outward-oriented surface
    cloud sampled at ``surface_density`` points per square meter."""
    transition = 0.01 * spec.blade_length
    stations = [
        ("octagon", 0.0, spec.handle_radius, spec.handle_radius),
        ("octagon", spec.handle_length, spec.handle_radius, spec.handle_radius),
        ("rect", spec.handle_length + transition, spec.blade_width / 2, spec.blade_thickness / 2),
        ("rect", spec.total_length, spec.blade_width / 2, spec.blade_thickness / 2),
    ]
    rings = [_ring(kind, x, hw, hh) for kind, x, hw, hh in stations]
    vertices = list(np.concatenate(rings))
    faces = []
    for k in range(len(rings) - 1):
        base0, base1 = 8 * k, 8 * (k + 1)
        for i in range(8):
            j = (i + 1) % 8
            faces.append([base0 + i, base0 + j, base1 + j])
            faces.append([base0 + i, base1 + j, base1 + i])
    # end caps: fan around a center vertex
    butt_center = len(vertices)
    vertices.append(np.array([0.0, 0.0, 0.0]))
    tip_center = len(vertices)
    vertices.append(np.array([spec.total_length, 0.0, 0.0]))
    last = 8 * (len(rings) - 1)
    for i in range(8):
        j = (i + 1) % 8
        faces.append([butt_center, j, i])
        faces.append([tip_center, last + i, last + j])

    mesh = TriangleMesh(np.array(vertices), np.array(faces, dtype=np.int64))
    # orient outward: signed volume must be positive
    v = mesh.vertices[mesh.faces]
    volume = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0
    if volume < 0:
        mesh = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    if not mesh.is_watertight():
        raise InvalidSpecError(f"{spec.name}: constructed mesh is not watertight")
    mesh.watertight_flag = True

    n_points = int(round(mesh.area() * surface_density))
    if n_points < 8:
        raise InvalidSpecError(f"{spec.name}: surface density too low ({n_points} points)")
    cloud = mesh.sample_surface(n_points, seed=seed)
    return mesh, cloud


def deform(spec: ToolSpec, nominal: PointCloud, bc: BoundaryCondition,
           on_surface_tol: float = 1e-6) -> DeformationSample:
    """Apply a contact load and return the deformed sample.

    The displacement field is the transverse cantilever deflection evaluated
    at each point's axial station (cross-sections translate rigidly); normals
    are rotated consistently with the local bending slope. The reaction force
    is the exact static-equilibrium balance ``u = -load_vector``.
    """
    if nominal.normals is None:
        raise InvalidInputError("nominal cloud must carry normals")
    d2 = np.linalg.norm(nominal.points - bc.load_point, axis=1)
    if d2.min() > max(on_surface_tol, 1e-12):
        raise InvalidInputError(
            f"load_point is {d2.min():.3g} m away from the nominal surface")

    EI = spec.bending_stiffness
    L = spec.cantilever_length
    station = float(bc.load_point[0]) - spec.clamp_length
    force = bc.load_vector.copy()
    transverse = force - np.dot(force, AXIS) * AXIS
    magnitude = float(np.linalg.norm(transverse))

    if magnitude > 0.0:
        if station <= 0.0:
            raise InvalidInputError("load applied inside the clamped region produces no bending")
        direction = transverse / magnitude
        tip_deflection = float(cantilever_deflection(L, station, magnitude, EI))
        if tip_deflection >= 0.1 * L:
            raise RegimeError(
                f"tip deflection {tip_deflection:.4g} m exceeds 10% of cantilever length {L:.4g} m")
        xi = np.clip(nominal.points[:, 0] - spec.clamp_length, 0.0, None)
        w = cantilever_deflection(xi, station, magnitude, EI)
        slope = cantilever_slope(xi, station, magnitude, EI)
        points = nominal.points + w[:, None] * direction
        # exact normal transform for the shear field u(x) = w(xi) * direction
        dn = nominal.normals @ direction
        normals = nominal.normals - (slope * dn)[:, None] * AXIS
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    else:
        points = nominal.points.copy()
        normals = nominal.normals.copy()

    deformed = PointCloud(points, normals, frame_scale=nominal.frame_scale)
    q_idx = np.flatnonzero(np.linalg.norm(nominal.points - bc.load_point, axis=1) <= bc.contact_radius)
    contacts = ContactObservation(
        Q=PointCloud(nominal.points[q_idx], nominal.normals[q_idx], frame_scale=nominal.frame_scale),
        u=-force,
    )
    return DeformationSample(
        nominal_cloud=nominal,
        deformed_cloud=deformed,
        contacts=contacts,
        sdf_samples=None,
        tool_id=spec.name,
        q_indices=q_idx,
        bc=bc,
    )


def default_tool_specs() -> list[ToolSpec]:
    """Six tools mirroring the scale of the full dataset."""
    return [
        ToolSpec("spatula", 0.15, 0.012, 0.10, 0.080, 0.0040, 2.0e9, 0.05),
        ToolSpec("turner", 0.12, 0.010, 0.09, 0.060, 0.0035, 2.8e9, 0.04),
        ToolSpec("spreader", 0.13, 0.009, 0.07, 0.050, 0.0030, 2.2e9, 0.045),
        ToolSpec("scraper", 0.10, 0.011, 0.08, 0.070, 0.0045, 1.8e9, 0.035),
        ToolSpec("server", 0.14, 0.010, 0.11, 0.065, 0.0050, 1.6e9, 0.05),
        ToolSpec("palette", 0.16, 0.008, 0.09, 0.040, 0.0025, 3.0e9, 0.055),
    ]


def desk_tool_specs() -> list[ToolSpec]:
    return default_tool_specs()[:2]


def _condition_rng(seed: int, tool_idx: int, cond_idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tool_idx, cond_idx)))


def _sample_bc(spec: ToolSpec, nominal_m: PointCloud, rng: np.random.Generator,
               contact_radius: float, load_range: tuple[float, float],
               zero_load: bool = False) -> BoundaryCondition:
    """Draw a boundary condition: patch center on the outer half of the tool,
    magnitude log-uniform, direction uniform in the transverse plane. Loads
    that would leave the small-deflection regime are scaled back into it."""
    outer = np.flatnonzero(nominal_m.points[:, 0] - spec.clamp_length >= 0.5 * spec.cantilever_length)
    load_point = nominal_m.points[rng.choice(outer)]
    if zero_load:
        return BoundaryCondition(load_point=load_point, load_vector=np.zeros(3),
                                 contact_radius=contact_radius)
    lo, hi = load_range
    magnitude = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    phi = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([0.0, np.cos(phi), np.sin(phi)])
    station = float(load_point[0]) - spec.clamp_length
    L, EI = spec.cantilever_length, spec.bending_stiffness
    max_mag = 0.1 * L * 6.0 * EI / (station**2 * (3.0 * L - station))
    if magnitude >= max_mag:
        magnitude = 0.9 * max_mag
    return BoundaryCondition(load_point=load_point, load_vector=magnitude * direction,
                             contact_radius=contact_radius)


def _pack_bin(path: Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    """Concatenate arrays into one little-endian float32 file; return the
    offset table recorded in the dataset manifest."""
    table = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            table.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
            offset += data.nbytes
    return table


def _read_bin(path: Path, table: list[dict]) -> dict[str, np.ndarray]:
    raw = np.fromfile(path, dtype="<f4")
    out = {}
    for entry in table:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"] // 4
        out[entry["name"]] = raw[start:start + count].reshape(entry["shape"]).astype(np.float64)
    return out


def _cloud_arrays(cloud: PointCloud) -> dict[str, np.ndarray]:
    return {"points": cloud.points, "normals": cloud.normals}


def _sdf_arrays(samples: SdfSampleSet) -> dict[str, np.ndarray]:
    return {
        "queries": samples.queries,
        "sdf_values": samples.sdf_values,
        "surface_mask": samples.surface_mask.astype(np.float64),
        "normals": samples.normals,
    }


def generate_dataset(
    specs: list[ToolSpec],
    n_conditions: int,
    seed: int,
    out_dir: str | Path,
    n_test_conditions: int = 0,
    sdf_n_total: int = 25_000,
    near_fraction: float = 0.8,
    sigma_near: float = 0.01,
    surface_density: float = 300_000.0,
    contact_radius: float = 0.01,
    load_range: tuple[float, float] = (0.5, 5.0),
    include_zero_anchor: bool = True,
) -> dict:
    """Write one nominal record per tool plus ``n_conditions`` deformation
    records each (condition 0 is the zero-load anchor when enabled), all in
    the tool's normalized frame. Deterministic for a fixed seed; returns the
    manifest also written to ``out_dir/manifest.json``.
    """
    if n_conditions < 1:
        raise InvalidInputError("n_conditions must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"out_dir {out_dir} is not writable: {exc}") from exc

    manifest: dict = {
        "format": "flexsdf-dataset",
        "version": 1,
        "seed": seed,
        "config": {
            "n_conditions": n_conditions,
            "n_test_conditions": n_test_conditions,
            "sdf_n_total": sdf_n_total,
            "near_fraction": near_fraction,
            "sigma_near": sigma_near,
            "surface_density": surface_density,
            "contact_radius": contact_radius,
            "load_range": list(load_range),
            "include_zero_anchor": include_zero_anchor,
        },
        "tools": [],
    }

    for ti, spec in enumerate(specs):
        tool_dir = out_dir / "tools" / spec.name
        tool_dir.mkdir(parents=True, exist_ok=True)
        mesh, cloud_m = build_nominal(spec, surface_density, seed=seed + ti)
        cloud_norm, transform = geometry.normalize_cloud(cloud_m)
        geometry.write_ply(tool_dir / "nominal.ply", mesh.vertices, faces=mesh.faces)
        cloud_table = _pack_bin(tool_dir / "nominal.bin", _cloud_arrays(cloud_norm))
        nominal_sdf = geometry.sample_sdf(cloud_norm, sdf_n_total, near_fraction, sigma_near,
                                          seed=seed + 1000 * ti)
        sdf_table = _pack_bin(tool_dir / "nominal_sdf.bin", _sdf_arrays(nominal_sdf))

        tool_entry = {
            "tool_id": spec.name,
            "spec": spec.to_dict(),
            "frame_scale": cloud_norm.frame_scale,
            "transform": {"scale": transform.scale, "translation": transform.translation.tolist()},
            "n_points": len(cloud_norm),
            "nominal": {
                "mesh": str(Path("tools") / spec.name / "nominal.ply"),
                "cloud": str(Path("tools") / spec.name / "nominal.bin"),
                "cloud_arrays": cloud_table,
                "sdf": str(Path("tools") / spec.name / "nominal_sdf.bin"),
                "sdf_arrays": sdf_table,
            },
            "conditions": [],
        }

        total = n_conditions + n_test_conditions
        for k in range(total):
            rng = _condition_rng(seed, ti, k)
            zero = include_zero_anchor and k == 0
            bc = _sample_bc(spec, cloud_m, rng, contact_radius, load_range, zero_load=zero)
            sample = deform(spec, cloud_m, bc)
            def_dir = tool_dir / f"def_{k}"
            def_dir.mkdir(exist_ok=True)

            deformed_norm = PointCloud(transform.apply(sample.deformed_cloud.points),
                                       sample.deformed_cloud.normals,
                                       frame_scale=cloud_norm.frame_scale)
            def_cloud_table = _pack_bin(def_dir / "cloud.bin", _cloud_arrays(deformed_norm))
            sdf = geometry.sample_sdf(deformed_norm, sdf_n_total, near_fraction, sigma_near,
                                      seed=seed + 1000 * ti + 17 * (k + 1))
            def_sdf_table = _pack_bin(def_dir / "sdf.bin", _sdf_arrays(sdf))
            contacts = {
                "q_indices": sample.q_indices.tolist(),
                "u": sample.contacts.u.tolist(),
                "load_point": bc.load_point.tolist(),
                "load_vector": bc.load_vector.tolist(),
                "contact_radius": bc.contact_radius,
                "load_station": float(bc.load_point[0]) - spec.clamp_length,
                "zero_anchor": bool(zero),
                "split": "train" if k < n_conditions else "test",
            }
            with open(def_dir / "contacts.json", "w") as fh:
                json.dump(contacts, fh, indent=2, sort_keys=True)

            tool_entry["conditions"].append({
                "index": k,
                "split": contacts["split"],
                "zero_anchor": bool(zero),
                "dir": str(Path("tools") / spec.name / f"def_{k}"),
                "cloud": str(Path("tools") / spec.name / f"def_{k}" / "cloud.bin"),
                "cloud_arrays": def_cloud_table,
                "sdf": str(Path("tools") / spec.name / f"def_{k}" / "sdf.bin"),
                "sdf_arrays": def_sdf_table,
                "contacts": str(Path("tools") / spec.name / f"def_{k}" / "contacts.json"),
            })
        manifest["tools"].append(tool_entry)

    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


# ---------------------------------------------------------------------------
# Dataset loading.
# ---------------------------------------------------------------------------

@dataclass
class ToolRecord:
    tool_id: str
    spec: ToolSpec
    frame_scale: float
    nominal_cloud: PointCloud
    nominal_sdf: SdfSampleSet
    conditions: list[dict]


def _load_cloud_bin(root: Path, rel: str, table: list[dict], frame_scale: float) -> PointCloud:
    arrays = _read_bin(root / rel, table)
    normals = arrays["normals"]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(arrays["points"], normals, frame_scale=frame_scale)


def _load_sdf_bin(root: Path, rel: str, table: list[dict]) -> SdfSampleSet:
    arrays = _read_bin(root / rel, table)
    mask = arrays["surface_mask"] > 0.5
    sdf = arrays["sdf_values"]
    sdf[mask] = 0.0
    normals = arrays["normals"]
    if mask.any():
        normals[mask] /= np.linalg.norm(normals[mask], axis=1, keepdims=True)
    return SdfSampleSet(arrays["queries"], sdf, mask, normals)


def load_dataset(root: str | Path) -> list[ToolRecord]:
    """Load every tool record referenced by ``root/manifest.json``."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    records = []
    for tool in manifest["tools"]:
        spec = ToolSpec(**tool["spec"])
        fs = float(tool["frame_scale"])
        nominal_cloud = _load_cloud_bin(root, tool["nominal"]["cloud"], tool["nominal"]["cloud_arrays"], fs)
        nominal_sdf = _load_sdf_bin(root, tool["nominal"]["sdf"], tool["nominal"]["sdf_arrays"])
        conditions = []
        for cond in tool["conditions"]:
            with open(root / cond["contacts"]) as fh:
                contacts = json.load(fh)
            conditions.append({
                "index": cond["index"],
                "split": cond["split"],
                "zero_anchor": cond["zero_anchor"],
                "cloud": _load_cloud_bin(root, cond["cloud"], cond["cloud_arrays"], fs),
                "sdf": _load_sdf_bin(root, cond["sdf"], cond["sdf_arrays"]),
                "contacts": contacts,
            })
        records.append(ToolRecord(
            tool_id=tool["tool_id"], spec=spec, frame_scale=fs,
            nominal_cloud=nominal_cloud, nominal_sdf=nominal_sdf, conditions=conditions,
        ))
    return records
