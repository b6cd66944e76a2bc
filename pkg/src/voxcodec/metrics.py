"""Geometry distortion (D1 point-to-point, D2 point-to-plane), normals,
PSNR and Bjontegaard delta rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.spatial import cKDTree

from .pointcloud_io import PointSet


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


def _coords(a):
    pts = a.points if isinstance(a, PointSet) else np.asarray(a)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("distortion metrics need non-empty point sets")
    return pts


def _nearest(src, ref):
    """Index into ``ref`` of the nearest neighbour of every ``src`` point."""
    _, idx = cKDTree(ref).query(src, k=1)
    return idx


def p2point_error(a, b):
    """Mean squared distance from each point of ``a`` to its nearest in ``b``."""
    a, b = _coords(a), _coords(b)
    d = a - b[_nearest(a, b)]
    return float(np.mean(np.sum(d * d, axis=1)))


def d1_mse(a, b):
    """Symmetric point-to-point MSE: max of both directions."""
    return max(p2point_error(a, b), p2point_error(b, a))


def p2plane_error(a, b, normals_b):
    """Mean squared projection of ``a``-to-nearest-``b`` error vectors onto
    the normal at the ``b`` point."""
    a, b = _coords(a), _coords(b)
    if normals_b is None:
        raise ValueError("point-to-plane error needs normals of the reference cloud")
    n = np.asarray(normals_b, dtype=np.float64).reshape(-1, 3)
    if len(n) != len(b):
        raise ValueError(f"{len(n)} normals for {len(b)} points")
    idx = _nearest(a, b)
    proj = np.sum((a - b[idx]) * n[idx], axis=1)
    return float(np.mean(proj * proj))


def d2_mse(a, b, normals_b, normals_a=None):
    """Point-to-plane MSE.

    With only ``normals_b`` this is the ``a -> b`` term.  Given both normal
    fields it is the symmetric max, each direction projecting onto the
    normals of the cloud being searched.
    """
    e_ab = p2plane_error(a, b, normals_b)
    if normals_a is None:
        return e_ab
    return max(e_ab, p2plane_error(b, a, normals_a))


def estimate_normals(points, k=20):
    """PCA normals from the ``k`` nearest neighbours (the point included).

    Signs are fixed so the first non-zero of (z, y, x) is positive.
    """
    pts = _coords(points)
    n = len(pts)
    if n < 3:
        raise ValueError("normal estimation needs at least 3 points")
    k = min(k, n)
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    eps = 1e-9
    key = np.where(np.abs(normals[:, 2]) > eps, normals[:, 2],
                   np.where(np.abs(normals[:, 1]) > eps, normals[:, 1], normals[:, 0]))
    normals[key < 0] *= -1
    return normals


def psnr(mse, precision):
    """``10 log10(3 p^2 / mse)`` with peak ``p = 2^precision - 1``."""
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return float("inf")
    peak = (1 << precision) - 1
    return float(10.0 * np.log10(3.0 * peak * peak / mse))


def d1_psnr(a, b, precision):
    return psnr(d1_mse(a, b), precision)


def d2_psnr(a, b, precision, k=20):
    return psnr(d2_mse(a, b, estimate_normals(b, k), estimate_normals(a, k)), precision)


def _curve(points):
    pts = [p if isinstance(p, RdPoint) else RdPoint(*p) for p in points]
    if len(pts) < 4:
        raise ValueError("BD-Rate needs at least 4 RD points per curve")
    q = np.array([p.psnr for p in pts])
    r = np.log10([p.bpp for p in pts])
    order = np.argsort(q)
    q, r = q[order], r[order]
    if np.any(np.diff(q) <= 0):
        raise ValueError("PSNR values of a curve must be distinct")
    return q, r


def bd_rate(curve_a, curve_b):
    """Average rate difference (percent) of ``curve_b`` relative to
    ``curve_a`` at equal PSNR, using shape-preserving cubic interpolation of
    log10(rate) over the overlapping PSNR interval."""
    qa, ra = _curve(curve_a)
    qb, rb = _curve(curve_b)
    lo, hi = max(qa[0], qb[0]), min(qa[-1], qb[-1])
    if not hi > lo:
        raise ValueError("RD curves have no overlapping PSNR range")
    ia = PchipInterpolator(qa, ra).integrate(lo, hi)
    ib = PchipInterpolator(qb, rb).integrate(lo, hi)
    avg = (ib - ia) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)
