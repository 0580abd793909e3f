"""Pure geometric core: boxes, cuboid meshes, point clouds, IoU/NMS, distance metrics.

Conventions fixed here and relied on by the file formats:
  * object space is the cube [-1, 1]^3
  * cuboid corners are ordered by binary corner index (bit0 -> x, bit1 -> y, bit2 -> z)
  * all distances are L2 in object units
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree


class DegenerateBoxError(ValueError):
    """Raised when an operation requires a box with strictly positive extents."""


class EmptyGeometryError(ValueError):
    """Raised when an operation requires non-empty geometry."""


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for v in (self.x, self.y, self.z):
            if not math.isfinite(v):
                raise ValueError(f"non-finite Vec3 component: {v!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Vec3":
        return Vec3(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box; admits zero extents (point/degenerate boxes).

    Operations that need a valid *part* box (strictly positive extents) call
    :meth:`require_positive_extent`.
    """

    min: Vec3
    max: Vec3

    def __post_init__(self):
        if self.min.x > self.max.x or self.min.y > self.max.y or self.min.z > self.max.z:
            raise ValueError(f"Aabb min must be <= max componentwise: {self}")

    @staticmethod
    def from_arrays(mn, mx) -> "Aabb":
        return Aabb(Vec3.from_array(mn), Vec3.from_array(mx))

    def min_array(self) -> np.ndarray:
        return self.min.as_array()

    def max_array(self) -> np.ndarray:
        return self.max.as_array()

    def extent(self) -> np.ndarray:
        return self.max_array() - self.min_array()

    def center(self) -> Vec3:
        return Vec3.from_array(0.5 * (self.min_array() + self.max_array()))

    def volume(self) -> float:
        e = self.extent()
        return float(e[0] * e[1] * e[2])

    def require_positive_extent(self, context: str = "operation") -> "Aabb":
        if np.any(self.extent() <= 0.0):
            raise DegenerateBoxError(f"{context} requires strictly positive box extents: {self}")
        return self

    def corners(self) -> np.ndarray:
        """8 corners in binary-index order, shape (8, 3)."""
        mn, mx = self.min_array(), self.max_array()
        out = np.empty((8, 3), dtype=np.float64)
        for i in range(8):
            out[i, 0] = mx[0] if i & 1 else mn[0]
            out[i, 1] = mx[1] if i & 2 else mn[1]
            out[i, 2] = mx[2] if i & 4 else mn[2]
        return out

    def contains(self, p: Vec3) -> bool:
        mn, mx = self.min_array(), self.max_array()
        a = p.as_array()
        return bool(np.all(a >= mn) and np.all(a <= mx))


UNIT_OBJECT_BOX = Aabb(Vec3(-1.0, -1.0, -1.0), Vec3(1.0, 1.0, 1.0))

# Triangles of a cuboid in binary-corner-index order, outward winding.
CUBOID_FACES = np.array(
    [
        (0, 2, 3), (0, 3, 1),   # -z
        (4, 5, 7), (4, 7, 6),   # +z
        (0, 1, 5), (0, 5, 4),   # -y
        (2, 6, 7), (2, 7, 3),   # +y
        (0, 4, 6), (0, 6, 2),   # -x
        (1, 3, 7), (1, 7, 5),   # +x
    ],
    dtype=np.int32,
)

# 6-tetrahedra split of a cuboid around the 0-7 diagonal; used for
# point-in-hexahedron tests on (possibly deformed) decoded boxes.
CUBOID_TETS = np.array(
    [
        (0, 1, 3, 7), (0, 3, 2, 7), (0, 2, 6, 7),
        (0, 6, 4, 7), (0, 4, 5, 7), (0, 5, 1, 7),
    ],
    dtype=np.int32,
)


@dataclass(frozen=True)
class CuboidMesh:
    """A hexahedron with cuboid topology: 8 vertices plus the fixed 12-face table.

    Vertices follow binary corner order; for a box they are the box corners, for
    a decoded layout slot they may form a sheared/deformed hexahedron.
    """

    vertices: np.ndarray  # (8, 3) float64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.shape != (8, 3):
            raise ValueError(f"CuboidMesh needs exactly 8 vertices, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("CuboidMesh vertices must be finite")
        object.__setattr__(self, "vertices", v)

    @property
    def faces(self) -> np.ndarray:
        return CUBOID_FACES


@dataclass
class TriMesh:
    """General indexed triangle mesh with optional per-vertex RGB in [0, 1]."""

    vertices: np.ndarray            # (V, 3) float64
    faces: np.ndarray               # (F, 3) int32
    colors: np.ndarray | None = None  # (V, 3) float64 in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("colors must match vertex count")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float64

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


def box_to_cuboid_mesh(box: Aabb) -> CuboidMesh:
    """Cuboid mesh whose 8 vertices are the corners of ``box``."""
    box.require_positive_extent("box_to_cuboid_mesh")
    return CuboidMesh(box.corners())


def aabb_of_mesh(mesh) -> Aabb:
    """Componentwise min/max box of a mesh (or bare vertex array)."""
    verts = mesh.vertices if hasattr(mesh, "vertices") else np.asarray(mesh, dtype=np.float64)
    verts = verts.reshape(-1, 3)
    if len(verts) == 0:
        raise EmptyGeometryError("aabb_of_mesh: empty vertex list")
    return Aabb.from_arrays(verts.min(axis=0), verts.max(axis=0))


def iou(a: Aabb, b: Aabb) -> float:
    """Intersection-over-union of two axis-aligned boxes; 0 when disjoint."""
    lo = np.maximum(a.min_array(), b.min_array())
    hi = np.minimum(a.max_array(), b.max_array())
    e = hi - lo
    if np.any(e <= 0.0):
        return 0.0
    inter = float(e[0] * e[1] * e[2])
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(boxes: Sequence[Aabb], iou_threshold: float = 0.7) -> list[Aabb]:
    """Greedy suppression in descending-volume order; ties broken by index.

    Survivors are returned in their original relative order and no surviving
    pair has IoU above the threshold.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].volume(), i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return [boxes[i] for i in sorted(kept)]


def to_global(box: Aabb, canonical) -> np.ndarray:
    """Map canonical coordinates in [-1, 1]^3 into the global frame of ``box``.

    Accepts a Vec3 or an (..., 3) array; returns an array of the same shape.
    """
    box.require_positive_extent("to_global")
    c = canonical.as_array() if isinstance(canonical, Vec3) else np.asarray(canonical, dtype=np.float64)
    return box.min_array() + (c + 1.0) * 0.5 * box.extent()


def normalize_to_canonical(box: Aabb, p_global) -> np.ndarray:
    """Inverse of :func:`to_global`: global point -> canonical [-1, 1]^3."""
    box.require_positive_extent("normalize_to_canonical")
    g = p_global.as_array() if isinstance(p_global, Vec3) else np.asarray(p_global, dtype=np.float64)
    return 2.0 * (g - box.min_array()) / box.extent() - 1.0


def _tet_signed_volumes(a, b, c, d) -> np.ndarray:
    return np.einsum("...i,...i->...", b - a, np.cross(c - a, d - a)) / 6.0


def points_in_hexahedron(vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Containment test against the fixed 6-tet split of a cuboid-topology hexahedron.

    ``vertices``: (8, 3) in binary corner order.  Returns a bool array over points.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    for tet in CUBOID_TETS:
        a, b, c, d = (verts[i] for i in tet)
        vol = _tet_signed_volumes(a[None], b[None], c[None], d[None])[0]
        if abs(vol) < 1e-14:
            continue
        s = np.sign(vol)
        v0 = _tet_signed_volumes(pts, b[None], c[None], d[None])
        v1 = _tet_signed_volumes(a[None], pts, c[None], d[None])
        v2 = _tet_signed_volumes(a[None], b[None], pts, d[None])
        v3 = _tet_signed_volumes(a[None], b[None], c[None], pts)
        eps = 1e-12
        inside |= (s * v0 >= -eps) & (s * v1 >= -eps) & (s * v2 >= -eps) & (s * v3 >= -eps)
    return inside


def hexahedron_volume(vertices: np.ndarray) -> float:
    """Volume of a cuboid-topology hexahedron via its 6-tet split."""
    verts = np.asarray(vertices, dtype=np.float64)
    total = 0.0
    for tet in CUBOID_TETS:
        a, b, c, d = (verts[i] for i in tet)
        total += abs(_tet_signed_volumes(a[None], b[None], c[None], d[None])[0])
    return float(total)


def mesh_signed_volume(mesh: TriMesh | CuboidMesh) -> float:
    """Signed enclosed volume of a closed triangle mesh (positive if outward)."""
    v = mesh.vertices
    f = mesh.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def sample_surface(mesh: TriMesh | CuboidMesh, count: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface; deterministic per seed."""
    if count < 0:
        raise ValueError("count must be >= 0")
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0 or len(verts) == 0:
        raise EmptyGeometryError("sample_surface: empty mesh")
    if count == 0:
        return PointCloud(np.zeros((0, 3)))
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise EmptyGeometryError("sample_surface: mesh has zero total area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(faces), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    pts = a[idx] + u[:, None] * (b[idx] - a[idx]) + v[:, None] * (c[idx] - a[idx])
    return PointCloud(pts)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric chamfer distance: mean of the two directed mean-NN L2 distances."""
    pa, pb = a.points, b.points
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyGeometryError("chamfer: empty point cloud")
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float(0.5 * (da.mean() + db.mean()))


def fscore(a: PointCloud, b: PointCloud, tau: float = 0.1) -> float:
    """F-score at distance threshold tau: harmonic mean of precision and recall."""
    pa, pb = a.points, b.points
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyGeometryError("fscore: empty point cloud")
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    precision = float((da <= tau).mean())
    recall = float((db <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
