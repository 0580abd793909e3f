"""Analytic solid primitives (box / sphere / axis-aligned cylinder / union).

These are the ground-truth shapes of the synthetic dataset.  Everything about
them is exact: point containment, bounding boxes, and orthographic projections,
which is what makes the downstream oracles exact as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .geometry import Aabb, Vec3

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class BoxSolid:
    box: Aabb


@dataclass(frozen=True)
class SphereSolid:
    center: Vec3
    radius: float


@dataclass(frozen=True)
class CylinderSolid:
    """Solid cylinder with axis parallel to a coordinate axis."""

    axis: str  # 'x' | 'y' | 'z'
    center: Vec3
    radius: float
    half_length: float

    def __post_init__(self):
        if self.axis not in _AXES:
            raise ValueError(f"cylinder axis must be one of x/y/z, got {self.axis!r}")


@dataclass(frozen=True)
class UnionSolid:
    parts: tuple


Solid = Union[BoxSolid, SphereSolid, CylinderSolid, UnionSolid]


def contains_points(solid: Solid, points: np.ndarray) -> np.ndarray:
    """Vectorized point containment; points shape (N, 3) -> bool (N,)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if isinstance(solid, BoxSolid):
        mn, mx = solid.box.min_array(), solid.box.max_array()
        return np.all((pts >= mn) & (pts <= mx), axis=1)
    if isinstance(solid, SphereSolid):
        d = pts - solid.center.as_array()
        return np.einsum("ij,ij->i", d, d) <= solid.radius**2
    if isinstance(solid, CylinderSolid):
        ax = _AXES[solid.axis]
        others = [i for i in range(3) if i != ax]
        c = solid.center.as_array()
        along = np.abs(pts[:, ax] - c[ax]) <= solid.half_length
        d2 = (pts[:, others[0]] - c[others[0]]) ** 2 + (pts[:, others[1]] - c[others[1]]) ** 2
        return along & (d2 <= solid.radius**2)
    if isinstance(solid, UnionSolid):
        out = np.zeros(len(pts), dtype=bool)
        for part in solid.parts:
            out |= contains_points(part, pts)
        return out
    raise TypeError(f"unknown solid type: {type(solid)!r}")


def solid_aabb(solid: Solid) -> Aabb:
    """Tight axis-aligned bounding box of a solid."""
    if isinstance(solid, BoxSolid):
        return solid.box
    if isinstance(solid, SphereSolid):
        c, r = solid.center.as_array(), solid.radius
        return Aabb.from_arrays(c - r, c + r)
    if isinstance(solid, CylinderSolid):
        c = solid.center.as_array()
        half = np.full(3, solid.radius)
        half[_AXES[solid.axis]] = solid.half_length
        return Aabb.from_arrays(c - half, c + half)
    if isinstance(solid, UnionSolid):
        boxes = [solid_aabb(p) for p in solid.parts]
        mn = np.min([b.min_array() for b in boxes], axis=0)
        mx = np.max([b.max_array() for b in boxes], axis=0)
        return Aabb.from_arrays(mn, mx)
    raise TypeError(f"unknown solid type: {type(solid)!r}")


def projected_contains(solid: Solid, view_axis: str, uv: np.ndarray) -> np.ndarray:
    """Orthographic-shadow containment: does the axis-parallel ray through (u, v) hit the solid?

    View axis conventions: +x -> (u, v) = (y, z); +y -> (x, z); +z -> (x, y).
    """
    ax = _AXES[view_axis]
    others = [i for i in range(3) if i != ax]
    pts = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if isinstance(solid, BoxSolid):
        mn, mx = solid.box.min_array(), solid.box.max_array()
        return (
            (pts[:, 0] >= mn[others[0]]) & (pts[:, 0] <= mx[others[0]])
            & (pts[:, 1] >= mn[others[1]]) & (pts[:, 1] <= mx[others[1]])
        )
    if isinstance(solid, SphereSolid):
        c = solid.center.as_array()
        d2 = (pts[:, 0] - c[others[0]]) ** 2 + (pts[:, 1] - c[others[1]]) ** 2
        return d2 <= solid.radius**2
    if isinstance(solid, CylinderSolid):
        c = solid.center.as_array()
        cyl_ax = _AXES[solid.axis]
        if cyl_ax == ax:
            # Looking down the cylinder axis: shadow is its disk.
            d2 = (pts[:, 0] - c[others[0]]) ** 2 + (pts[:, 1] - c[others[1]]) ** 2
            return d2 <= solid.radius**2
        # Side view: shadow is a rectangle (length x diameter).
        half = np.full(3, solid.radius)
        half[cyl_ax] = solid.half_length
        return (
            (np.abs(pts[:, 0] - c[others[0]]) <= half[others[0]])
            & (np.abs(pts[:, 1] - c[others[1]]) <= half[others[1]])
        )
    if isinstance(solid, UnionSolid):
        out = np.zeros(len(pts), dtype=bool)
        for part in solid.parts:
            out |= projected_contains(part, view_axis, pts)
        return out
    raise TypeError(f"unknown solid type: {type(solid)!r}")


def solid_to_dict(solid: Solid) -> dict:
    """JSON-serializable description (used by the dataset manifest)."""
    if isinstance(solid, BoxSolid):
        return {"kind": "box", "min": list(solid.box.min_array()), "max": list(solid.box.max_array())}
    if isinstance(solid, SphereSolid):
        return {"kind": "sphere", "center": list(solid.center.as_array()), "radius": solid.radius}
    if isinstance(solid, CylinderSolid):
        return {
            "kind": "cylinder",
            "axis": solid.axis,
            "center": list(solid.center.as_array()),
            "radius": solid.radius,
            "half_length": solid.half_length,
        }
    if isinstance(solid, UnionSolid):
        return {"kind": "union", "parts": [solid_to_dict(p) for p in solid.parts]}
    raise TypeError(f"unknown solid type: {type(solid)!r}")


def solid_from_dict(d: dict) -> Solid:
    kind = d["kind"]
    if kind == "box":
        return BoxSolid(Aabb(Vec3(*d["min"]), Vec3(*d["max"])))
    if kind == "sphere":
        return SphereSolid(Vec3(*d["center"]), float(d["radius"]))
    if kind == "cylinder":
        return CylinderSolid(d["axis"], Vec3(*d["center"]), float(d["radius"]), float(d["half_length"]))
    if kind == "union":
        return UnionSolid(tuple(solid_from_dict(p) for p in d["parts"]))
    raise ValueError(f"unknown solid kind: {kind!r}")
