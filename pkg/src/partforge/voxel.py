"""Binary voxel grids: voxelization of analytic solids and surface-cube extraction.

The occupancy rule is cell-center containment: bit (x, y, z) is set iff the
center of that cell lies inside the solid.  The linear bit index is
``x + n*y + n*n*z`` (x fastest); this layout is the PVOX file contract and is
fixed forever.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Aabb, EmptyGeometryError, TriMesh, PointCloud
from .solids import Solid, contains_points


@dataclass
class VoxelGrid:
    """n^3 binary occupancy, stored as a bool array indexed [x, y, z]."""

    n: int
    occ: np.ndarray  # (n, n, n) bool

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("VoxelGrid resolution must be positive")
        occ = np.asarray(self.occ, dtype=bool)
        if occ.shape != (self.n, self.n, self.n):
            raise ValueError(f"occupancy shape {occ.shape} does not match n={self.n}")
        self.occ = occ

    @staticmethod
    def empty(n: int) -> "VoxelGrid":
        return VoxelGrid(n, np.zeros((n, n, n), dtype=bool))

    @staticmethod
    def full(n: int) -> "VoxelGrid":
        return VoxelGrid(n, np.ones((n, n, n), dtype=bool))

    def popcount(self) -> int:
        return int(self.occ.sum())

    def linear_bits(self) -> np.ndarray:
        """Flat bool array in linear-index order (x fastest)."""
        return self.occ.transpose(2, 1, 0).reshape(-1)

    @staticmethod
    def from_linear_bits(n: int, bits: np.ndarray) -> "VoxelGrid":
        occ = np.asarray(bits, dtype=bool).reshape(n, n, n).transpose(2, 1, 0)
        return VoxelGrid(n, occ)

    def occupied_cells(self) -> np.ndarray:
        """Integer (L, 3) coordinates of occupied cells, sorted by linear index."""
        xs, ys, zs = np.nonzero(self.occ)
        order = np.argsort(xs + self.n * ys + self.n * self.n * zs, kind="stable")
        return np.stack([xs, ys, zs], axis=1)[order].astype(np.int64)

    def __eq__(self, other) -> bool:
        return isinstance(other, VoxelGrid) and self.n == other.n and bool(np.array_equal(self.occ, other.occ))


def cell_centers(frame: Aabb, n: int) -> np.ndarray:
    """Centers of all n^3 cells of ``frame``, shape (n, n, n, 3), indexed [x, y, z]."""
    mn, ext = frame.min_array(), frame.extent()
    axes = [mn[a] + (np.arange(n) + 0.5) * ext[a] / n for a in range(3)]
    gx, gy, gz = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def voxelize(solid: Solid, frame: Aabb, n: int) -> VoxelGrid:
    """Occupancy of ``solid`` over the n^3 grid of ``frame`` (cell-center rule)."""
    if n <= 0:
        raise ValueError("voxelize: resolution must be positive")
    frame.require_positive_extent("voxelize")
    centers = cell_centers(frame, n).reshape(-1, 3)
    occ = contains_points(solid, centers).reshape(n, n, n)
    return VoxelGrid(n, occ)


# Quad corner offsets for each of the 6 exposed-face directions, wound so the
# normal points out of the occupied cell.  Offsets are lattice-corner deltas
# relative to the cell's (x, y, z) corner.
_FACE_QUADS = {
    (1, 0, 0): ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    (-1, 0, 0): ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    (0, 1, 0): ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    (0, -1, 0): ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    (0, 0, 1): ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
    (0, 0, -1): ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
}


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def grid_to_cubes(grid: VoxelGrid, frame: Aabb, voxel_colors: np.ndarray | None = None) -> TriMesh:
    """Exposed-surface mesh of the occupied cells, as triangle pairs per quad.

    Vertices are deduplicated per surface sheet: at pinched edges/corners the
    lattice point is duplicated so the output is 2-manifold for every component.
    ``voxel_colors`` (n, n, n, 3) in [0, 1] yields averaged per-vertex colors.
    """
    n = grid.n
    occ = grid.occ
    padded = np.zeros((n + 2, n + 2, n + 2), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = occ

    quads: list[tuple[tuple[int, int, int], ...]] = []  # 4 lattice corners each
    quad_voxel: list[tuple[int, int, int]] = []
    for direction, offsets in _FACE_QUADS.items():
        dx, dy, dz = direction
        neighbor = padded[1 + dx : n + 1 + dx, 1 + dy : n + 1 + dy, 1 + dz : n + 1 + dz]
        xs, ys, zs = np.nonzero(occ & ~neighbor)
        for x, y, z in zip(xs.tolist(), ys.tolist(), zs.tolist()):
            quads.append(tuple((x + ox, y + oy, z + oz) for ox, oy, oz in offsets))
            quad_voxel.append((x, y, z))

    if not quads:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))

    # Slot = (quad index, corner index).  Union slots across quads that share an
    # edge; edges with four incident quads are pinches and pair within a voxel.
    n_slots = 4 * len(quads)
    uf = _UnionFind(n_slots)
    edge_map: dict[tuple, list[tuple[int, int, int]]] = {}
    for qi, corners in enumerate(quads):
        for ci in range(4):
            a, b = corners[ci], corners[(ci + 1) % 4]
            key = (a, b) if a <= b else (b, a)
            edge_map.setdefault(key, []).append((qi, ci, (ci + 1) % 4))

    for key, incident in edge_map.items():
        if len(incident) == 2:
            groups = [incident]
        else:
            by_voxel: dict[tuple[int, int, int], list] = {}
            for item in incident:
                by_voxel.setdefault(quad_voxel[item[0]], []).append(item)
            groups = list(by_voxel.values())
        for group in groups:
            (q0, a0, b0), (q1, a1, b1) = group[0], group[1]
            # Match slots by lattice point, not by corner position.
            if quads[q0][a0] == quads[q1][a1]:
                uf.union(4 * q0 + a0, 4 * q1 + a1)
                uf.union(4 * q0 + b0, 4 * q1 + b1)
            else:
                uf.union(4 * q0 + a0, 4 * q1 + b1)
                uf.union(4 * q0 + b0, 4 * q1 + a1)

    root_to_vertex: dict[int, int] = {}
    slot_vertex = np.empty(n_slots, dtype=np.int64)
    lattice_points: list[tuple[int, int, int]] = []
    color_accum: list[list] = []
    for qi, corners in enumerate(quads):
        for ci in range(4):
            root = uf.find(4 * qi + ci)
            if root not in root_to_vertex:
                root_to_vertex[root] = len(lattice_points)
                lattice_points.append(corners[ci])
                color_accum.append([])
            vid = root_to_vertex[root]
            slot_vertex[4 * qi + ci] = vid
            if voxel_colors is not None:
                color_accum[vid].append(quad_voxel[qi])

    mn, ext = frame.min_array(), frame.extent()
    verts = mn + np.asarray(lattice_points, dtype=np.float64) / n * ext

    faces = np.empty((2 * len(quads), 3), dtype=np.int32)
    for qi in range(len(quads)):
        s = slot_vertex[4 * qi : 4 * qi + 4]
        faces[2 * qi] = (s[0], s[1], s[2])
        faces[2 * qi + 1] = (s[0], s[2], s[3])

    colors = None
    if voxel_colors is not None:
        vc = np.asarray(voxel_colors, dtype=np.float64)
        colors = np.zeros((len(verts), 3))
        for vid, cells in enumerate(color_accum):
            samples = np.array([vc[c] for c in cells])
            colors[vid] = samples.mean(axis=0)
    return TriMesh(verts, faces, colors)


def surface_cells(grid: VoxelGrid) -> np.ndarray:
    """Occupied cells with at least one empty or out-of-bounds 6-neighbor."""
    n = grid.n
    padded = np.zeros((n + 2, n + 2, n + 2), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = grid.occ
    exposed = np.zeros_like(grid.occ)
    for dx, dy, dz in _FACE_QUADS:
        neighbor = padded[1 + dx : n + 1 + dx, 1 + dy : n + 1 + dy, 1 + dz : n + 1 + dz]
        exposed |= grid.occ & ~neighbor
    xs, ys, zs = np.nonzero(exposed)
    return np.stack([xs, ys, zs], axis=1).astype(np.int64)


def sample_occupied(grid: VoxelGrid, frame: Aabb, count: int, seed: int = 0) -> PointCloud:
    """Uniform samples inside the surface voxels of ``grid``; deterministic per seed."""
    if count < 0:
        raise ValueError("count must be >= 0")
    cells = surface_cells(grid)
    if len(cells) == 0:
        raise EmptyGeometryError("sample_occupied: grid has no occupied cells")
    if count == 0:
        return PointCloud(np.zeros((0, 3)))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(cells), size=count)
    offs = rng.random((count, 3))
    mn, ext = frame.min_array(), frame.extent()
    pts = mn + (cells[idx] + offs) / grid.n * ext
    return PointCloud(pts)
