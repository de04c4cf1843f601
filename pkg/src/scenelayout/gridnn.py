"""Exact nearest-neighbour search on a uniform bucket grid (numba kernels).

Used by the registration loop, where the same static clouds are queried
thousands of times and the per-call overhead of a general kd-tree dominates.
A query scans cubic shells of cells around its own cell and stops once no
unvisited cell can hold a closer point, so results are exact.
"""

from __future__ import annotations

import numba
import numpy as np

from .errors import EmptyCloud

MAX_CELLS_PER_AXIS = 512


@numba.njit(cache=True, nogil=True)
def _cell_coord(x, lo, h, n):
    c = int(np.floor((x - lo) / h))
    if c < 0:
        return 0
    if c >= n:
        return n - 1
    return c


@numba.njit(cache=True, nogil=True)
def _face_gap(x, lo, h, n, c, r):
    """Distance from coordinate ``x`` to the nearest unvisited slab along one
    axis after shells ``0..r`` around cell ``c``; inf if none remain."""
    gap = np.inf
    if c - r > 0:
        gap = x - (lo + (c - r) * h)
        if gap < 0.0:
            gap = 0.0
    if c + r < n - 1:
        g2 = lo + (c + r + 1) * h - x
        if g2 < 0.0:
            g2 = 0.0
        if g2 < gap:
            gap = g2
    return gap


@numba.njit(cache=True, nogil=True)
def _outside(x, lo, h, n):
    """Distance from ``x`` to the grid's slab ``[lo, lo + n*h]`` along one axis."""
    if x < lo:
        return lo - x
    hi = lo + n * h
    if x > hi:
        return x - hi
    return 0.0


@numba.njit(cache=True, nogil=True)
def build(points, lo, h, dims):
    npts, d = points.shape
    ncell = 1
    for k in range(d):
        ncell *= dims[k]
    cell_of = np.empty(npts, dtype=np.int64)
    counts = np.zeros(ncell + 1, dtype=np.int64)
    for i in range(npts):
        cid = 0
        for k in range(d):
            cid = cid * dims[k] + _cell_coord(points[i, k], lo[k], h, dims[k])
        cell_of[i] = cid
        counts[cid + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    fill = counts[:-1].copy()
    order = np.empty(npts, dtype=np.int64)
    for i in range(npts):
        order[fill[cell_of[i]]] = i
        fill[cell_of[i]] += 1
    return order, counts


@numba.njit(cache=True, nogil=True)
def query3(points, order, starts, lo, h, dims, queries, out, max_shells=-1):
    """Nearest indices into ``out``. With ``max_shells >= 0`` a query still
    unresolved after that many shells gets ``-1``."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    maxr = max(nx, max(ny, nz))
    if 0 <= max_shells < maxr:
        maxr = max_shells
    for q in range(queries.shape[0]):
        qx, qy, qz = queries[q, 0], queries[q, 1], queries[q, 2]
        cx = _cell_coord(qx, lo[0], h, nx)
        cy = _cell_coord(qy, lo[1], h, ny)
        cz = _cell_coord(qz, lo[2], h, nz)
        ox = _outside(qx, lo[0], h, nx)
        oy = _outside(qy, lo[1], h, ny)
        oz = _outside(qz, lo[2], h, nz)
        best = np.inf
        besti = -1
        done = False
        for r in range(maxr + 1):
            for ix in range(max(cx - r, 0), min(cx + r, nx - 1) + 1):
                ex = ix == cx - r or ix == cx + r
                for iy in range(max(cy - r, 0), min(cy + r, ny - 1) + 1):
                    ey = ex or iy == cy - r or iy == cy + r
                    if ey:
                        z0, z1, zs = max(cz - r, 0), min(cz + r, nz - 1), 1
                    else:
                        # interior column: only the two shell faces
                        z0, z1, zs = cz - r, cz + r, 2 * r if r > 0 else 1
                    iz = z0
                    while iz <= z1:
                        if 0 <= iz < nz:
                            cid = (ix * ny + iy) * nz + iz
                            for s in range(starts[cid], starts[cid + 1]):
                                j = order[s]
                                dx = points[j, 0] - qx
                                dy = points[j, 1] - qy
                                dz = points[j, 2] - qz
                                dd = dx * dx + dy * dy + dz * dz
                                if dd < best or (dd == best and j < besti):
                                    best = dd
                                    besti = j
                        iz += zs
            # unvisited cells differ from the block along some axis k
            gx = _face_gap(qx, lo[0], h, nx, cx, r)
            gy = _face_gap(qy, lo[1], h, ny, cy, r)
            gz = _face_gap(qz, lo[2], h, nz, cz, r)
            if gx == np.inf and gy == np.inf and gz == np.inf:
                done = True
                break
            bound = min(gx * gx + oy * oy + oz * oz,
                        min(gy * gy + ox * ox + oz * oz, gz * gz + ox * ox + oy * oy))
            if besti >= 0 and best <= bound * (1.0 - 1e-12):
                done = True
                break
        out[q] = besti if done else -1


@numba.njit(cache=True, nogil=True)
def query2(points, order, starts, lo, h, dims, queries, out):
    nx, ny = dims[0], dims[1]
    maxr = max(nx, ny)
    for q in range(queries.shape[0]):
        qx, qy = queries[q, 0], queries[q, 1]
        cx = _cell_coord(qx, lo[0], h, nx)
        cy = _cell_coord(qy, lo[1], h, ny)
        ox = _outside(qx, lo[0], h, nx)
        oy = _outside(qy, lo[1], h, ny)
        best = np.inf
        besti = -1
        for r in range(maxr + 1):
            for ix in range(max(cx - r, 0), min(cx + r, nx - 1) + 1):
                ex = ix == cx - r or ix == cx + r
                if ex:
                    y0, y1, ys = max(cy - r, 0), min(cy + r, ny - 1), 1
                else:
                    y0, y1, ys = cy - r, cy + r, 2 * r if r > 0 else 1
                iy = y0
                while iy <= y1:
                    if 0 <= iy < ny:
                        cid = ix * ny + iy
                        for s in range(starts[cid], starts[cid + 1]):
                            j = order[s]
                            dx = points[j, 0] - qx
                            dy = points[j, 1] - qy
                            dd = dx * dx + dy * dy
                            if dd < best or (dd == best and j < besti):
                                best = dd
                                besti = j
                    iy += ys
            gx = _face_gap(qx, lo[0], h, nx, cx, r)
            gy = _face_gap(qy, lo[1], h, ny, cy, r)
            if gx == np.inf and gy == np.inf:
                break
            bound = min(gx * gx + oy * oy, gy * gy + ox * ox)
            if besti >= 0 and best <= bound * (1.0 - 1e-12):
                break
        out[q] = besti


@numba.njit(cache=True, nogil=True)
def grid_layout(points, per_cell, surface, max_axis):
    """Bounding box origin, cell size and per-axis cell counts for a cloud."""
    n, d = points.shape
    lo = np.empty(d)
    ext = np.empty(d)
    for k in range(d):
        mn = points[0, k]
        mx = points[0, k]
        for i in range(1, n):
            x = points[i, k]
            if x < mn:
                mn = x
            if x > mx:
                mx = x
        lo[k] = mn
        ext[k] = max(mx - mn, 1e-12)
    if d == 3 and surface:
        h = np.sqrt(2.0 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[2] * ext[0]) * per_cell / n)
    else:
        vol = 1.0
        for k in range(d):
            vol *= ext[k]
        h = (vol * per_cell / n) ** (1.0 / d)
    emax = ext.max()
    h = max(h, emax / max_axis, 1e-12)
    dims = np.empty(d, dtype=np.int64)
    for k in range(d):
        dims[k] = min(int(np.floor(ext[k] / h)) + 1, max_axis + 1)
    return lo, h, dims


class GridIndex:
    """Bucket grid over a fixed 2D or 3D cloud; ``query`` returns nearest indices.

    ``per_cell`` is the target occupancy of non-empty cells. Clouds lying on
    a surface in 3D should pass ``surface=True`` so the cell size follows the
    surface area rather than the volume.
    """

    def __init__(self, points, per_cell: float = 3.0, surface: bool = False):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        d = pts.shape[1]
        if d not in (2, 3):
            raise ValueError("grid index supports 2D and 3D points only")
        lo, h, dims = grid_layout(pts, float(per_cell), bool(surface), MAX_CELLS_PER_AXIS)
        self.points = pts
        self.lo = lo
        self.h = float(h)
        self.dims = dims
        self.order, self.starts = build(pts, lo, self.h, dims)

    def query(self, queries, max_shells: int | None = None) -> np.ndarray:
        """Nearest indices. In 3D, ``max_shells`` caps the search; queries it
        leaves unresolved come back as ``-1``."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        out = np.empty(len(q), dtype=np.int64)
        if self.points.shape[1] == 3:
            query3(self.points, self.order, self.starts, self.lo, self.h, self.dims, q, out,
                   -1 if max_shells is None else int(max_shells))
        else:
            query2(self.points, self.order, self.starts, self.lo, self.h, self.dims, q, out)
        return out
