"""On-disk binary formats.

PVOX (occupancy grids): magic ``PVOX``, u32 LE version (=1), u32 LE n, then
ceil(n^3 / 8) bytes with bit i of the linear index (x fastest) stored at byte
``i >> 3``, LSB-first.

Meshes: binary little-endian PLY with float32 positions, optional uchar RGB,
and int32 triangle indices.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import TriMesh
from .voxel import VoxelGrid

PVOX_MAGIC = b"PVOX"
PVOX_VERSION = 1


def pvox_bytes(grid: VoxelGrid) -> bytes:
    bits = grid.linear_bits()
    packed = np.packbits(bits, bitorder="little")
    header = PVOX_MAGIC + struct.pack("<II", PVOX_VERSION, grid.n)
    return header + packed.tobytes()


def write_pvox(path: str | Path, grid: VoxelGrid) -> None:
    Path(path).write_bytes(pvox_bytes(grid))


def read_pvox(data_or_path) -> VoxelGrid:
    if isinstance(data_or_path, (str, Path)):
        data = Path(data_or_path).read_bytes()
    else:
        data = bytes(data_or_path)
    if data[:4] != PVOX_MAGIC:
        raise ValueError("not a PVOX file (bad magic)")
    version, n = struct.unpack("<II", data[4:12])
    if version != PVOX_VERSION:
        raise ValueError(f"unsupported PVOX version {version}")
    n_bytes = (n**3 + 7) // 8
    payload = np.frombuffer(data[12 : 12 + n_bytes], dtype=np.uint8)
    if len(payload) != n_bytes:
        raise ValueError("truncated PVOX payload")
    bits = np.unpackbits(payload, bitorder="little")[: n**3]
    return VoxelGrid.from_linear_bits(n, bits)


def ply_bytes(mesh: TriMesh) -> bytes:
    has_color = mesh.colors is not None
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")

    out = bytearray(header)
    verts = mesh.vertices.astype("<f4")
    if has_color:
        rgb = np.clip(np.round(mesh.colors * 255.0), 0, 255).astype(np.uint8)
        for i in range(mesh.n_vertices):
            out += verts[i].tobytes()
            out += rgb[i].tobytes()
    else:
        out += verts.tobytes()
    faces = mesh.faces.astype("<i4")
    for i in range(mesh.n_faces):
        out += struct.pack("<B", 3)
        out += faces[i].tobytes()
    return bytes(out)


def write_ply(path: str | Path, mesh: TriMesh) -> None:
    Path(path).write_bytes(ply_bytes(mesh))


def read_ply(data_or_path) -> TriMesh:
    """Reads back the subset of PLY produced by :func:`ply_bytes`."""
    if isinstance(data_or_path, (str, Path)):
        data = Path(data_or_path).read_bytes()
    else:
        data = bytes(data_or_path)
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n_verts = n_faces = 0
    has_color = False
    for line in header:
        if line.startswith("element vertex"):
            n_verts = int(line.split()[-1])
        elif line.startswith("element face"):
            n_faces = int(line.split()[-1])
        elif line == "property uchar red":
            has_color = True
        elif line.startswith("format") and "binary_little_endian" not in line:
            raise ValueError("only binary little-endian PLY is supported")
    stride = 12 + (3 if has_color else 0)
    body = data[end:]
    raw = np.frombuffer(body[: n_verts * stride], dtype=np.uint8).reshape(n_verts, stride)
    verts = raw[:, :12].copy().view("<f4").astype(np.float64)
    colors = raw[:, 12:15].astype(np.float64) / 255.0 if has_color else None
    offset = n_verts * stride
    faces = np.empty((n_faces, 3), dtype=np.int32)
    for i in range(n_faces):
        count = body[offset]
        if count != 3:
            raise ValueError("only triangle faces are supported")
        faces[i] = np.frombuffer(body[offset + 1 : offset + 13], dtype="<i4")
        offset += 13
    return TriMesh(verts, faces, colors)
