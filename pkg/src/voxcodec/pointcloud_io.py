"""ASCII PLY reading/writing and point list <-> voxel set conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PlyParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _as_coords(points):
    arr = np.asarray(points, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {arr.shape}")
    return arr


def _unique_rows(arr):
    if len(arr) == 0:
        return arr
    return np.unique(arr, axis=0)


@dataclass(frozen=True, eq=False)
class PointSet:
    """Integer point coordinates (voxel units), possibly with duplicates."""

    points: np.ndarray
    precision: int = 10

    def __post_init__(self):
        object.__setattr__(self, "points", _as_coords(self.points))

    def __len__(self):
        return len(self.points)

    def as_set(self):
        return {tuple(int(v) for v in p) for p in self.points}

    def __eq__(self, other):
        if not isinstance(other, PointSet):
            return NotImplemented
        return np.array_equal(_unique_rows(self.points), _unique_rows(other.points))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """Occupied voxel coordinates, deduplicated and sorted lexicographically."""

    occupied: np.ndarray
    precision: int = 10

    def __post_init__(self):
        object.__setattr__(self, "occupied", _unique_rows(_as_coords(self.occupied)))

    def __len__(self):
        return len(self.occupied)

    def __contains__(self, ijk):
        return bool(np.any(np.all(self.occupied == np.asarray(ijk), axis=1)))

    def as_set(self):
        return {tuple(int(v) for v in p) for p in self.occupied}

    def __eq__(self, other):
        if not isinstance(other, VoxelSet):
            return NotImplemented
        return np.array_equal(self.occupied, other.occupied)

    __hash__ = None


def parse_ply(data, precision=10):
    """Parse an ASCII PLY file into a :class:`PointSet`.

    Float coordinates are rounded half away from zero; other vertex
    properties and non-vertex elements are skipped.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("ascii", errors="strict")
    lines = data.split("\n")
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError("missing 'ply' magic", 1)

    elements = []  # (name, count, [property names])
    fmt = None
    i = 1
    while True:
        if i >= len(lines):
            raise PlyParseError("header not terminated by end_header", i)
        tok = lines[i].split()
        lineno = i + 1
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise PlyParseError(f"unsupported format {' '.join(tok[1:])!r}", lineno)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyParseError("malformed element line", lineno)
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyParseError(f"bad element count {tok[2]!r}", lineno) from None
            if count < 0:
                raise PlyParseError("negative element count", lineno)
            elements.append((tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", lineno)
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise PlyParseError("malformed list property", lineno)
                elements[-1][2].append(("list", tok[4]))
            elif len(tok) == 3:
                elements[-1][2].append(("scalar", tok[2]))
            else:
                raise PlyParseError("malformed property line", lineno)
        elif tok[0] == "end_header":
            break
        else:
            raise PlyParseError(f"unknown header keyword {tok[0]!r}", lineno)
    if fmt is None:
        raise PlyParseError("missing format line", i)

    body = i
    points = []
    vertex_seen = False
    for name, count, props in elements:
        if name != "vertex":
            for _ in range(count):
                body = _next_data_line(lines, body, name)
            continue
        vertex_seen = True
        names = [p[1] for p in props]
        try:
            idx = [names.index(a) for a in ("x", "y", "z")]
        except ValueError:
            raise PlyParseError("vertex element lacks x, y, z properties") from None
        if any(props[k][0] == "list" for k in range(max(idx) + 1)):
            raise PlyParseError("list properties before coordinates are not supported")
        for _ in range(count):
            body = _next_data_line(lines, body, "vertex")
            lineno = body
            vals = lines[body - 1].split()
            if len(vals) < len(props) and all(p[0] == "scalar" for p in props):
                raise PlyParseError(f"expected {len(props)} values, got {len(vals)}", lineno)
            try:
                xyz = [float(vals[k]) for k in idx]
            except (ValueError, IndexError):
                raise PlyParseError("non-numeric coordinate", lineno) from None
            if not all(np.isfinite(xyz)):
                raise PlyParseError("non-finite coordinate", lineno)
            points.append(xyz)
    if not vertex_seen:
        raise PlyParseError("no vertex element")
    for rest in lines[body:]:
        if rest.strip():
            raise PlyParseError("element count mismatch: extra data after declared elements",
                                lines.index(rest, body) + 1)
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    coords = np.sign(arr) * np.floor(np.abs(arr) + 0.5)
    return PointSet(coords.astype(np.int64), precision)


def _next_data_line(lines, pos, name):
    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos >= len(lines):
        raise PlyParseError(f"element count mismatch: body ended early in {name!r} data", pos)
    return pos + 1


def write_ply(points):
    """Serialize a :class:`PointSet` as ASCII PLY with integer x y z."""
    pts = points.points if isinstance(points, PointSet) else _as_coords(points)
    header = ("ply\nformat ascii 1.0\n"
              f"element vertex {len(pts)}\n"
              "property int x\nproperty int y\nproperty int z\nend_header\n")
    body = "".join(f"{x} {y} {z}\n" for x, y, z in pts.tolist())
    return (header + body).encode("ascii")


def read_ply(path, precision=10):
    with open(path, "rb") as f:
        return parse_ply(f.read(), precision)


def save_ply(path, points):
    with open(path, "wb") as f:
        f.write(write_ply(points))


def voxelize(points):
    """Merge duplicate points into an occupancy set; checks the bit depth."""
    pts = points.points
    hi = (1 << points.precision) - 1
    if len(pts) and (pts.min() < 0 or pts.max() > hi):
        bad = pts[np.any((pts < 0) | (pts > hi), axis=1)][0]
        raise ValueError(f"coordinate {tuple(int(v) for v in bad)} outside "
                         f"{points.precision}-bit range [0, {hi}]")
    return VoxelSet(pts, points.precision)


def extract(voxels):
    """One point per occupied voxel."""
    return PointSet(voxels.occupied.copy(), voxels.precision)
