"""Center-corner positional encoding.

Every token cell of a part grid is keyed by nine quantized coordinates on a
shared super-resolution lattice (default 2048 per axis): the cell center plus
its eight corners, all expressed in global object space.  Keys are embedded by
summing factorized per-axis position tables plus a part-ID table, which keeps
tokens aware of their true spatial extent even though each part lives in its
own canonical grid.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Aabb, to_global

DEFAULT_LATTICE = 2048


@dataclass(frozen=True)
class QuantCoord:
    ix: int
    iy: int
    iz: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.ix, self.iy, self.iz)


@dataclass(frozen=True)
class CenterCornerKey:
    """One center plus eight corners, corners ordered by binary corner index."""

    center: QuantCoord
    corners: tuple  # 8 x QuantCoord

    def __post_init__(self):
        if len(self.corners) != 8:
            raise ValueError("CenterCornerKey needs exactly 8 corners")

    def to_bytes(self) -> bytes:
        """27 little-endian u16 values: center then corners in binary order."""
        vals = list(self.center.as_tuple())
        for c in self.corners:
            vals.extend(c.as_tuple())
        return struct.pack("<27H", *vals)


def quantize(global_coords: np.ndarray, r: int = DEFAULT_LATTICE) -> np.ndarray:
    """Map global coordinates in [-1, 1] to integer lattice cells [0, r-1].

    floor with a clamp at r-1, so the +1 boundary lands in the last cell.
    """
    q = np.floor((np.asarray(global_coords, dtype=np.float64) + 1.0) * 0.5 * r)
    return np.clip(q, 0, r - 1).astype(np.int64)


def cell_key(part_box: Aabb, cell: tuple[int, int, int], n: int, r: int = DEFAULT_LATTICE) -> CenterCornerKey:
    """Key for one grid cell of a part: quantized global center + 8 corners.

    The cell (x, y, z) spans the canonical interval [-1 + 2x/n, -1 + 2(x+1)/n]
    per axis; endpoints and center are mapped through the part box into global
    space before quantization.
    """
    keys = cell_keys_array(part_box, np.asarray([cell], dtype=np.int64), n, r)
    center = QuantCoord(*keys[0, 0].tolist())
    corners = tuple(QuantCoord(*keys[0, 1 + i].tolist()) for i in range(8))
    return CenterCornerKey(center, corners)


def cell_keys_array(part_box: Aabb, cells: np.ndarray, n: int, r: int = DEFAULT_LATTICE) -> np.ndarray:
    """Vectorized keys for many cells: (L, 3) int cells -> (L, 9, 3) int lattice coords.

    Row 0 is the center, rows 1..8 the corners in binary order.
    """
    part_box.require_positive_extent("cell_key")
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if np.any(cells < 0) or np.any(cells >= n):
        raise ValueError(f"cell index out of range for n={n}")
    lo = -1.0 + 2.0 * cells / n            # (L, 3) canonical lower corner
    hi = -1.0 + 2.0 * (cells + 1) / n
    cen = 0.5 * (lo + hi)
    points = np.empty((len(cells), 9, 3), dtype=np.float64)
    points[:, 0] = cen
    for i in range(8):
        points[:, 1 + i, 0] = hi[:, 0] if i & 1 else lo[:, 0]
        points[:, 1 + i, 1] = hi[:, 1] if i & 2 else lo[:, 1]
        points[:, 1 + i, 2] = hi[:, 2] if i & 4 else lo[:, 2]
    return quantize(to_global(part_box, points), r)


def sinusoidal_table(r: int, dim: int, base: float | None = None,
                     gain: float = 1.0) -> torch.Tensor:
    """Deterministic sinusoidal init for one per-axis position table, (r, dim).

    Frequency bands span [1, base] geometrically so all r positions resolve.
    ``gain`` scales the amplitude: the embed step sums nine lookups over three
    axes, so a small gain keeps the positional term from drowning the tokens.
    """
    if base is None:
        base = float(2 * r)
    pos = torch.arange(r, dtype=torch.float64).unsqueeze(1)
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    angles = pos * freqs.unsqueeze(0)
    table = torch.zeros(r, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles[:, : (dim + 1) // 2])
    table[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return (gain * table).to(torch.float32)


class EmbeddingTable(torch.nn.Module):
    """Factorized position tables (per axis, summed) plus a part-ID table.

    A dense r^3 table is infeasible at r=2048; the factorized form keeps each
    axis injective and extrapolates across scales.  Tables are sinusoidally
    initialized and trainable.
    """

    def __init__(self, r: int = DEFAULT_LATTICE, dim: int = 128, k_max: int = 30,
                 init_gain: float = 0.05, id_gain: float = 0.3):
        super().__init__()
        self.r = r
        self.dim = dim
        self.k_max = k_max
        self.table_x = torch.nn.Parameter(sinusoidal_table(r, dim, gain=init_gain))
        self.table_y = torch.nn.Parameter(sinusoidal_table(r, dim, gain=init_gain))
        self.table_z = torch.nn.Parameter(sinusoidal_table(r, dim, gain=init_gain))
        # slots with no positional keys are told apart only by this term, so
        # its init must be well above the noise floor
        self.id_table = torch.nn.Parameter(id_gain * _seeded_randn((k_max + 1, dim), seed=17))

    def pos(self, coords: torch.Tensor) -> torch.Tensor:
        """Position embedding of integer lattice coords (..., 3) -> (..., dim)."""
        return self.table_x[coords[..., 0]] + self.table_y[coords[..., 1]] + self.table_z[coords[..., 2]]

    def part_id(self, k: int) -> torch.Tensor:
        if not 0 <= k <= self.k_max:
            raise ValueError(f"part id {k} out of range [0, {self.k_max}]")
        return self.id_table[k]

    def embed_keys(self, keys: torch.Tensor, part_id: int) -> torch.Tensor:
        """Sum of nine position lookups plus the ID term.

        ``keys``: integer tensor (L, 9, 3) as produced by cell_keys_array.
        """
        pos_sum = self.pos(keys).sum(dim=-2)
        return pos_sum + self.part_id(part_id)


def _seeded_randn(shape, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen)


def embed(table: EmbeddingTable, key: CenterCornerKey, part_id: int) -> torch.Tensor:
    """Embedding of a single key: e_pos(center) + sum of 8 corner e_pos + e_id."""
    coords = [key.center.as_tuple()] + [c.as_tuple() for c in key.corners]
    keys = torch.tensor(coords, dtype=torch.int64).unsqueeze(0)
    return table.embed_keys(keys, part_id)[0]
