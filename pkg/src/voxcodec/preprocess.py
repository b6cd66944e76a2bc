"""Scaling, cube partitioning and octree coding of occupied cube positions."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .pointcloud_io import PointSet, VoxelSet


@dataclass(frozen=True)
class ScaleConfig:
    """Exact rational scale factor ``num / den``."""

    num: int = 1
    den: int = 1

    def __post_init__(self):
        if self.num <= 0 or self.den <= 0:
            raise ValueError(f"scale must be positive, got {self.num}/{self.den}")
        f = Fraction(self.num, self.den)
        object.__setattr__(self, "num", f.numerator)
        object.__setattr__(self, "den", f.denominator)

    @classmethod
    def parse(cls, text):
        f = Fraction(str(text))
        return cls(f.numerator, f.denominator)

    @property
    def value(self):
        return self.num / self.den

    def __str__(self):
        return f"{self.num}/{self.den}"


def _scale_round(coords, num, den):
    """round_half_away(coords * num / den) in exact integer arithmetic."""
    c = np.asarray(coords, dtype=np.int64)
    mag = (2 * np.abs(c) * num + den) // (2 * den)
    return np.sign(c) * mag


def scale_points(voxels, scale):
    """Multiply by ``s``, round half away from zero, drop duplicates."""
    return VoxelSet(_scale_round(voxels.occupied, scale.num, scale.den), voxels.precision)


def inverse_scale(voxels, scale):
    """Multiply by ``1/s`` and round; clipped to the bit-depth range since
    rounding up at the top edge can otherwise step one past it."""
    pts = _scale_round(voxels.occupied, scale.den, scale.num)
    pts = np.clip(pts, 0, (1 << voxels.precision) - 1)
    return PointSet(pts, voxels.precision)


# --------------------------------------------------------------------------
# cubes


@dataclass(frozen=True, eq=False)
class Cube:
    grid_pos: tuple
    occupancy: np.ndarray  # (W, W, W) bool
    k_occupied: int

    @property
    def size(self):
        return self.occupancy.shape[0]

    @classmethod
    def from_local(cls, grid_pos, local, w):
        occ = np.zeros((w, w, w), dtype=bool)
        local = np.asarray(local, dtype=np.int64).reshape(-1, 3)
        occ[local[:, 0], local[:, 1], local[:, 2]] = True
        return cls(tuple(int(v) for v in grid_pos), occ, int(occ.sum()))

    def local_coords(self):
        return np.argwhere(self.occupancy)


@dataclass(frozen=True, eq=False)
class CubeIndexSet:
    indices: np.ndarray  # (M, 3), ascending Morton order
    grid_levels: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        if len(idx) and (idx.min() < 0 or idx.max() >= (1 << self.grid_levels)):
            raise ValueError(f"cube index outside a {self.grid_levels}-level grid")
        if self.grid_levels < 1:
            raise ValueError("grid_levels must be >= 1")
        if len(idx):
            codes = morton_code(idx, self.grid_levels)
            codes, first = np.unique(codes, return_index=True)
            idx = idx[first]
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __eq__(self, other):
        return (isinstance(other, CubeIndexSet) and self.grid_levels == other.grid_levels
                and np.array_equal(self.indices, other.indices))

    __hash__ = None


def morton_code(idx, levels):
    """Interleave bits of (i, j, k), i most significant within each level."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    code = np.zeros(len(idx), dtype=np.int64)
    for b in reversed(range(levels)):
        child = (((idx[:, 0] >> b) & 1) << 2) | (((idx[:, 1] >> b) & 1) << 1) | ((idx[:, 2] >> b) & 1)
        code = (code << 3) | child
    return code


def grid_levels_for(indices):
    if len(indices) == 0:
        return 1
    m = int(np.max(indices))
    return max(1, m.bit_length())


def _check_w(w):
    if w < 1 or w & (w - 1):
        raise ValueError(f"cube size must be a power of two, got {w}")


def partition(voxels, w):
    """Split into non-overlapping W^3 cubes, empty cubes omitted, in
    ascending Morton order of cube position."""
    _check_w(w)
    occ = voxels.occupied
    if len(occ) == 0:
        return CubeIndexSet(np.zeros((0, 3), dtype=np.int64), 1), []
    if occ.min() < 0:
        raise ValueError("partition requires non-negative coordinates")
    cube_idx = occ // w
    levels = grid_levels_for(cube_idx)
    codes = morton_code(cube_idx, levels)
    order = np.argsort(codes, kind="stable")
    codes, cube_idx, local = codes[order], cube_idx[order], occ[order] - cube_idx[order] * w
    uniq, starts = np.unique(codes, return_index=True)
    bounds = list(starts) + [len(codes)]
    cubes = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        cubes.append(Cube.from_local(cube_idx[a], local[a:b], w))
    index_set = CubeIndexSet(np.array([c.grid_pos for c in cubes]), levels)
    return index_set, cubes


def assemble(index_set, cubes, w, precision=10):
    """Inverse of :func:`partition`."""
    seen = set()
    parts = []
    for c in cubes:
        if c.occupancy.shape != (w, w, w):
            raise ValueError(f"cube at {c.grid_pos} has shape {c.occupancy.shape}, expected W={w}")
        if c.grid_pos in seen:
            raise ValueError(f"duplicate cube index {c.grid_pos}")
        seen.add(c.grid_pos)
        parts.append(c.local_coords() + np.asarray(c.grid_pos, dtype=np.int64) * w)
    if index_set is not None and len(index_set) != len(cubes):
        raise ValueError(f"{len(index_set)} cube positions but {len(cubes)} cubes")
    pts = np.concatenate(parts) if parts else np.zeros((0, 3), dtype=np.int64)
    return VoxelSet(pts, precision)


# --------------------------------------------------------------------------
# octree position coding


def encode_cube_positions(index_set):
    """Breadth-first octree occupancy bytes.

    One byte per occupied internal node, level by level in Morton order.
    Child ``c`` (``c = 4*i_bit + 2*j_bit + k_bit``) is flagged by bit
    ``7 - c``, so child 0 is the most significant bit.
    """
    levels = index_set.grid_levels
    codes = morton_code(index_set.indices, levels)
    out = bytearray()
    for depth in range(levels):
        shift = 3 * (levels - depth - 1)
        prefixes = codes >> shift
        parents = prefixes >> 3
        children = prefixes & 7
        uniq_parents, inv = np.unique(parents, return_inverse=True)
        flags = np.zeros(len(uniq_parents), dtype=np.int64)
        np.bitwise_or.at(flags, inv, 1 << (7 - children))
        out.extend(int(f) for f in flags)
    return bytes(out)


def decode_cube_positions(data, grid_levels):
    """Inverse of :func:`encode_cube_positions`; returns ``(index_set,
    bytes_consumed)``."""
    nodes = [0]
    pos = 0
    for _ in range(grid_levels):
        nxt = []
        for node in nodes:
            if pos >= len(data):
                raise ValueError("truncated octree position stream")
            flags = data[pos]
            pos += 1
            if flags == 0:
                raise ValueError("corrupt octree position stream (empty node)")
            for c in range(8):
                if flags & (1 << (7 - c)):
                    nxt.append((node << 3) | c)
        nodes = nxt
    codes = np.asarray(nodes, dtype=np.int64)
    idx = np.zeros((len(codes), 3), dtype=np.int64)
    for b in range(grid_levels):
        child = (codes >> (3 * b)) & 7
        idx[:, 0] |= ((child >> 2) & 1) << b
        idx[:, 1] |= ((child >> 1) & 1) << b
        idx[:, 2] |= (child & 1) << b
    return CubeIndexSet(idx, grid_levels), pos


def octree_node_count(index_set):
    return len(encode_cube_positions(index_set))
