"""Point-cloud and mesh primitives: normalization, SDF sample construction, I/O.

Conventions: geometry is computed in float64; on-disk binary payloads are
little-endian float32 (int32 for face indices), row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

# Half-width of the normalized bounding region. Normalized objects live in the
# unit ball; deformed clouds and query grids may spill slightly past it.
GRID_BOUND = 1.1

_UNIT_TOL = 1e-6


@dataclass
class PointCloud:
    """Unordered set of 3D points with optional per-point unit normals.

    ``frame_scale`` maps normalized units back to meters (1.0 for clouds that
    were never normalized).
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    frame_scale: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidInputError(f"points must be (N, 3), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise InvalidInputError("points contain non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise InvalidInputError("normals must match points in shape")
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.allclose(norms, 1.0, atol=_UNIT_TOL):
                raise InvalidInputError("normals must have unit length")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class Transform:
    """Similarity transform ``x_out = (x - translation_pre) / scale`` used by
    :func:`normalize_cloud`; invertible to 1e-9 relative error."""

    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and not self.translation.any()


@dataclass
class TriangleMesh:
    """Indexed triangle mesh; ``watertight_flag`` asserts every edge is shared
    by exactly two faces."""

    vertices: np.ndarray
    faces: np.ndarray
    watertight_flag: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise InvalidInputError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise InvalidInputError("negative face index")
        if self.watertight_flag and not self.is_watertight():
            raise InvalidInputError("watertight_flag set but mesh has boundary/non-manifold edges")

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        return all(c == 2 for c in self.edge_counts().values())

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edge_counts()) + len(self.faces)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        n = np.cross(e1, e2)
        lengths = np.linalg.norm(n, axis=1, keepdims=True)
        lengths[lengths == 0] = 1.0
        return n / lengths

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def sample_surface(self, n: int, seed: int = 0) -> PointCloud:
        """Area-weighted uniform surface samples with face normals attached."""
        if n < 1:
            raise InvalidInputError("n must be >= 1")
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        probs = areas / areas.sum()
        idx = rng.choice(len(self.faces), size=n, p=probs)
        u = rng.random(n)
        v = rng.random(n)
        flip = u + v > 1.0
        u[flip] = 1.0 - u[flip]
        v[flip] = 1.0 - v[flip]
        tri = self.vertices[self.faces[idx]]  # (n, 3, 3)
        pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
        normals = self.face_normals()[idx]
        return PointCloud(points=pts, normals=normals)


@dataclass
class SdfSampleSet:
    """Query points with ground-truth signed distances.

    ``surface_mask`` marks the on-surface subset (|sdf| ~ 0); ``normals`` are
    defined (unit) exactly on that subset and zero elsewhere.
    """

    queries: np.ndarray
    sdf_values: np.ndarray
    surface_mask: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.sdf_values = np.asarray(self.sdf_values, dtype=np.float64)
        self.surface_mask = np.asarray(self.surface_mask, dtype=bool)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        n = len(self.queries)
        if not (len(self.sdf_values) == len(self.surface_mask) == len(self.normals) == n):
            raise InvalidInputError("sample arrays must have equal length")
        if self.surface_mask.any() and np.abs(self.sdf_values[self.surface_mask]).max() > _UNIT_TOL:
            raise InvalidInputError("surface-masked samples must have |sdf| <= 1e-6")

    def __len__(self) -> int:
        return len(self.queries)


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, Transform]:
    """Translate the centroid to the origin and scale by the maximum
    centroid-to-point distance so the cloud fits in the unit ball.

    Clouds already centered with max radius 1 come back unchanged with an
    identity transform. The returned transform round-trips coordinates to
    1e-9 relative error and its scale is stored as ``frame_scale`` so
    metric-unit evaluation stays possible.
    """
    if len(cloud) == 0:
        raise InvalidInputError("cannot normalize an empty cloud")
    centroid = cloud.centroid
    radii = np.linalg.norm(cloud.points - centroid, axis=1)
    scale = float(radii.max())
    if scale == 0.0:
        scale = 1.0  # single point / degenerate cloud: translation only
    transform = Transform(scale=scale, translation=centroid.copy())
    if transform.is_identity:
        return PointCloud(cloud.points.copy(), None if cloud.normals is None else cloud.normals.copy(),
                          frame_scale=cloud.frame_scale), transform
    pts = transform.apply(cloud.points)
    normals = None if cloud.normals is None else cloud.normals.copy()  # pure similarity keeps directions
    return PointCloud(pts, normals, frame_scale=scale * cloud.frame_scale), transform


def subsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Deterministic random subset of ``n`` points (without replacement)."""
    if n > len(cloud):
        raise InvalidInputError(f"cannot subsample {n} points from a cloud of {len(cloud)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(cloud), size=n, replace=False)
    normals = None if cloud.normals is None else cloud.normals[idx]
    return PointCloud(cloud.points[idx], normals, frame_scale=cloud.frame_scale)


def signed_distance_to_cloud(queries: np.ndarray, cloud: PointCloud) -> np.ndarray:
    """Signed distance of each query to the surface described by an oriented
    cloud: magnitude is the Euclidean distance to the nearest surface point;
    the sign is negative when ``(query - nearest) . normal_nearest < 0``
    (query behind the outward surface normal, i.e. inside)."""
    if cloud.normals is None:
        raise InvalidInputError("sign computation requires oriented normals on the cloud")
    queries = np.asarray(queries, dtype=np.float64)
    tree = cKDTree(cloud.points)
    dist, idx = tree.query(queries)
    offset = queries - cloud.points[idx]
    inside = np.einsum("ij,ij->i", offset, cloud.normals[idx]) < 0.0
    sdf = dist.copy()
    sdf[inside] *= -1.0
    return sdf


def _bounding_region(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centroid-centered cube of half-width GRID_BOUND x max radius: the
    normalized bounding region expressed in the cloud's own frame. Sampling
    the whole region (not just the surface's box) keeps the far field
    constrained so isosurface extraction sees no phantom sheets."""
    centroid = points.mean(axis=0)
    radius = float(np.linalg.norm(points - centroid, axis=1).max())
    half = GRID_BOUND * max(radius, 1e-12)
    return centroid - half, centroid + half


def sample_sdf(
    mesh_or_cloud: TriangleMesh | PointCloud,
    n_total: int = 25_000,
    near_fraction: float = 0.8,
    sigma_near: float = 0.01,
    seed: int = 0,
) -> SdfSampleSet:
    """Build ground-truth SDF samples around a surface.

    ``near_fraction`` of the budget is spent near the surface: half of those
    are kept exactly on it (surface_mask=True, carrying normals), the other
    half are surface points perturbed by zero-mean Gaussian noise of standard
    deviation ``sigma_near``. The remainder is uniform over the bounding
    region. Off-surface signed distances use the nearest-surface-point rule
    of :func:`signed_distance_to_cloud`.
    """
    if n_total < 1:
        raise InvalidInputError("n_total must be >= 1")
    if not 0.0 <= near_fraction <= 1.0:
        raise InvalidInputError("near_fraction must lie in [0, 1]")

    if isinstance(mesh_or_cloud, TriangleMesh):
        if not mesh_or_cloud.is_watertight():
            raise InvalidInputError("mesh must be watertight for inside/outside sign computation")
        surface = mesh_or_cloud.sample_surface(max(4 * n_total, 16_384), seed=seed)
    else:
        surface = mesh_or_cloud
        if surface.normals is None:
            raise InvalidInputError("cloud input must carry oriented normals")
    if len(surface) == 0:
        raise InvalidInputError("empty surface")

    rng = np.random.default_rng(seed + 1)
    near_count = int(round(n_total * near_fraction))
    surf_count = near_count // 2
    pert_count = near_count - surf_count
    unif_count = n_total - near_count

    replace = len(surface) < near_count
    pick = rng.choice(len(surface), size=near_count, replace=replace)
    surf_idx, pert_idx = pick[:surf_count], pick[surf_count:]

    sections = []
    # exact surface samples
    q_surf = surface.points[surf_idx]
    sections.append((q_surf, np.zeros(surf_count), np.ones(surf_count, dtype=bool), surface.normals[surf_idx]))
    # gaussian-perturbed surface samples
    q_pert = surface.points[pert_idx] + rng.normal(0.0, sigma_near, size=(pert_count, 3))
    sections.append((q_pert, None, np.zeros(pert_count, dtype=bool), np.zeros((pert_count, 3))))
    # uniform samples over the bounding region
    lo, hi = _bounding_region(surface.points)
    q_unif = rng.uniform(lo, hi, size=(unif_count, 3))
    sections.append((q_unif, None, np.zeros(unif_count, dtype=bool), np.zeros((unif_count, 3))))

    queries = np.concatenate([s[0] for s in sections])
    mask = np.concatenate([s[2] for s in sections])
    normals = np.concatenate([s[3] for s in sections])
    sdf = np.empty(n_total)
    sdf[:surf_count] = 0.0
    if n_total > surf_count:
        sdf[surf_count:] = signed_distance_to_cloud(queries[surf_count:], surface)
    return SdfSampleSet(queries=queries, sdf_values=sdf, surface_mask=mask, normals=normals)


def mean_nn_spacing(points: np.ndarray) -> float:
    """Mean distance from each point to its nearest distinct neighbor."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise InvalidInputError("need at least two points")
    dist, _ = cKDTree(points).query(points, k=2)
    return float(dist[:, 1].mean())


# ---------------------------------------------------------------------------
# Array-directory serialization: JSON manifest + raw little-endian binaries.
# ---------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "int32": "<i4", "uint8": "|u1"}


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named arrays as raw row-major little-endian binaries plus a JSON
    manifest recording names, shapes, and dtypes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": "flexsdf-arrays", "version": 1, "meta": meta or {}, "arrays": {}}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            out, dtype = arr.astype("<f4"), "float32"
        elif arr.dtype == np.bool_ or arr.dtype == np.uint8:
            out, dtype = arr.astype("|u1"), "uint8"
        else:
            out, dtype = arr.astype("<i4"), "int32"
        fname = f"{name}.bin"
        out.tofile(directory / fname)
        manifest["arrays"][name] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, entry in manifest["arrays"].items():
        raw = np.fromfile(directory / entry["file"], dtype=_DTYPES[entry["dtype"]])
        arrays[name] = raw.reshape(entry["shape"])
    return arrays, manifest.get("meta", {})


def save_cloud(directory: str | Path, cloud: PointCloud) -> Path:
    arrays = {"points": cloud.points}
    if cloud.normals is not None:
        arrays["normals"] = cloud.normals
    return save_arrays(directory, arrays, meta={"frame_scale": cloud.frame_scale})


def load_cloud(directory: str | Path) -> PointCloud:
    arrays, meta = load_arrays(directory)
    normals = arrays.get("normals")
    if normals is not None:
        # float32 round-trip can leave norms ~1e-8 off unit; restore exactly
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(arrays["points"], normals, frame_scale=float(meta.get("frame_scale", 1.0)))


def save_samples(directory: str | Path, samples: SdfSampleSet, meta: dict | None = None) -> Path:
    return save_arrays(
        directory,
        {
            "queries": samples.queries,
            "sdf_values": samples.sdf_values,
            "surface_mask": samples.surface_mask,
            "normals": samples.normals,
        },
        meta=meta,
    )


def load_samples(directory: str | Path) -> SdfSampleSet:
    arrays, _ = load_arrays(directory)
    sdf = arrays["sdf_values"].astype(np.float64)
    mask = arrays["surface_mask"].astype(bool)
    sdf[mask] = 0.0  # float32 storage noise must not break the surface invariant
    normals = arrays["normals"].astype(np.float64)
    lengths = np.linalg.norm(normals[mask], axis=1, keepdims=True)
    if mask.any():
        normals[mask] = normals[mask] / lengths
    return SdfSampleSet(arrays["queries"], sdf, mask, normals)


# ---------------------------------------------------------------------------
# OBJ / PLY mesh import & export.
# ---------------------------------------------------------------------------

def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path: str | Path) -> TriangleMesh:
    vertices, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(vertices), np.array(faces, dtype=np.int64))


def write_ply(path: str | Path, vertices: np.ndarray, faces: np.ndarray | None = None,
              normals: np.ndarray | None = None, scalar: np.ndarray | None = None,
              scalar_name: str = "quality") -> None:
    """ASCII PLY writer for meshes and (optionally annotated) point clouds."""
    vertices = np.asarray(vertices, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property float x", "property float y", "property float z"]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    if scalar is not None:
        lines += [f"property float {scalar_name}"]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines += ["end_header"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i, v in enumerate(vertices):
            row = [f"{v[0]:.9g}", f"{v[1]:.9g}", f"{v[2]:.9g}"]
            if normals is not None:
                row += [f"{normals[i][0]:.9g}", f"{normals[i][1]:.9g}", f"{normals[i][2]:.9g}"]
            if scalar is not None:
                row += [f"{float(scalar[i]):.9g}"]
            fh.write(" ".join(row) + "\n")
        if faces is not None:
            for f in faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def write_ply_mesh(mesh: TriangleMesh, path: str | Path) -> None:
    write_ply(path, mesh.vertices, faces=mesh.faces)


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Read an ASCII PLY; returns (vertices, faces or None, normals or None)."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise InvalidInputError(f"{path} is not a PLY file")
        fmt = fh.readline().strip()
        if "ascii" not in fmt:
            raise InvalidInputError("only ascii PLY is supported")
        n_vert = n_face = 0
        vert_props: list[str] = []
        element = None
        for line in fh:
            parts = line.split()
            if parts[0] == "element":
                element = parts[1]
                if element == "vertex":
                    n_vert = int(parts[2])
                elif element == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property" and element == "vertex" and parts[1] != "list":
                vert_props.append(parts[2])
            elif parts[0] == "end_header":
                break
        rows = np.array([next(fh).split() for _ in range(n_vert)], dtype=np.float64)
        cols = {p: rows[:, i] for i, p in enumerate(vert_props)}
        vertices = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
        normals = None
        if {"nx", "ny", "nz"} <= set(vert_props):
            normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        faces = None
        if n_face:
            faces = np.array([next(fh).split()[1:4] for _ in range(n_face)], dtype=np.int64)
    return vertices, faces, normals


def read_ply_mesh(path: str | Path) -> TriangleMesh:
    vertices, faces, _ = read_ply(path)
    if faces is None:
        raise InvalidInputError(f"{path} holds no faces")
    return TriangleMesh(vertices, faces)
