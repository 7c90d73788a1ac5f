"""Numba kernels for field evaluation.

Both kernels compute, per query point, a softmax over kernel scores
``-||q - p_i||^2 / tau`` restricted to tokens within ``SCORE_WINDOW``
log-units of the per-query maximum score.  Tokens outside the window have
relative weight below exp(-SCORE_WINDOW), which is orders of magnitude
under double-precision rounding of the kept mass, so results are
independent of how queries are tiled or grouped.

Candidate tokens are gathered once per tile/group from a bound on the
group's nearest-token distance; the per-query window test is exact, so
the candidate superset never changes the value.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# log-unit width of the per-query score window
SCORE_WINDOW = 60.0


@njit(cache=True, fastmath=True)
def eval_dense_grid(res, bbox_min, h, anchors, normals, offsets, tau, trunc, out, tile):
    """Evaluate every voxel center of a res^3 grid into ``out`` (float32)."""
    M = anchors.shape[0]
    nt = (res + tile - 1) // tile
    cand = np.empty(M, np.int64)
    rad = 0.5 * h * tile * np.sqrt(3.0)
    for tz in range(nt):
        for ty in range(nt):
            for tx in range(nt):
                cx = bbox_min + (tx + 0.5) * tile * h
                cy = bbox_min + (ty + 0.5) * tile * h
                cz = bbox_min + (tz + 0.5) * tile * h
                dmin2 = 1e300
                for i in range(M):
                    dx = cx - anchors[i, 0]
                    dy = cy - anchors[i, 1]
                    dz = cz - anchors[i, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < dmin2:
                        dmin2 = d2
                dmin = np.sqrt(dmin2)
                rmax = np.sqrt((dmin + rad) ** 2 + SCORE_WINDOW * tau) + rad
                rmax2 = rmax * rmax
                nc = 0
                for i in range(M):
                    dx = cx - anchors[i, 0]
                    dy = cy - anchors[i, 1]
                    dz = cz - anchors[i, 2]
                    if dx * dx + dy * dy + dz * dz <= rmax2:
                        cand[nc] = i
                        nc += 1
                for lz in range(min(tile, res - tz * tile)):
                    z = tz * tile + lz
                    qz = bbox_min + (z + 0.5) * h
                    for ly in range(min(tile, res - ty * tile)):
                        y = ty * tile + ly
                        qy = bbox_min + (y + 0.5) * h
                        for lx in range(min(tile, res - tx * tile)):
                            x = tx * tile + lx
                            qx = bbox_min + (x + 0.5) * h
                            out[x, y, z] = _eval_one(qx, qy, qz, cand, nc,
                                                     anchors, normals, offsets,
                                                     tau, trunc)


@njit(cache=True, fastmath=True)
def eval_points_grouped(points, group_ptr, token_ids, token_ptr,
                        anchors, normals, offsets, tau, trunc, out):
    """Evaluate points sorted by group; each group attends to its token list."""
    n_groups = group_ptr.shape[0] - 1
    max_tokens = 0
    for g in range(n_groups):
        k = token_ptr[g, 1] - token_ptr[g, 0]
        if k > max_tokens:
            max_tokens = k
    cand = np.empty(max_tokens, np.int64)
    for g in range(n_groups):
        p0 = group_ptr[g]
        p1 = group_ptr[g + 1]
        if p1 == p0:
            continue
        t0 = token_ptr[g, 0]
        t1 = token_ptr[g, 1]
        # group center and radius
        cx = 0.0
        cy = 0.0
        cz = 0.0
        for q in range(p0, p1):
            cx += points[q, 0]
            cy += points[q, 1]
            cz += points[q, 2]
        inv = 1.0 / (p1 - p0)
        cx *= inv
        cy *= inv
        cz *= inv
        rad2 = 0.0
        for q in range(p0, p1):
            dx = points[q, 0] - cx
            dy = points[q, 1] - cy
            dz = points[q, 2] - cz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 > rad2:
                rad2 = d2
        rad = np.sqrt(rad2)
        dmin2 = 1e300
        for j in range(t0, t1):
            i = token_ids[j]
            dx = cx - anchors[i, 0]
            dy = cy - anchors[i, 1]
            dz = cz - anchors[i, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < dmin2:
                dmin2 = d2
        dmin = np.sqrt(dmin2)
        rmax = np.sqrt((dmin + rad) ** 2 + SCORE_WINDOW * tau) + rad
        rmax2 = rmax * rmax
        nc = 0
        for j in range(t0, t1):
            i = token_ids[j]
            dx = cx - anchors[i, 0]
            dy = cy - anchors[i, 1]
            dz = cz - anchors[i, 2]
            if dx * dx + dy * dy + dz * dz <= rmax2:
                cand[nc] = i
                nc += 1
        for q in range(p0, p1):
            out[q] = _eval_one(points[q, 0], points[q, 1], points[q, 2],
                               cand, nc, anchors, normals, offsets, tau, trunc)


# strict IEEE: both kernels above must produce bitwise-identical values for
# the same point, so no fastmath reassociation is allowed in here
@njit(cache=True, fastmath=False)
def _eval_one(qx, qy, qz, cand, nc, anchors, normals, offsets, tau, trunc):
    smax = -1e300
    for j in range(nc):
        i = cand[j]
        dx = qx - anchors[i, 0]
        dy = qy - anchors[i, 1]
        dz = qz - anchors[i, 2]
        s = -(dx * dx + dy * dy + dz * dz) / tau
        if s > smax:
            smax = s
    cutoff = smax - SCORE_WINDOW
    wsum = 0.0
    vsum = 0.0
    for j in range(nc):
        i = cand[j]
        dx = qx - anchors[i, 0]
        dy = qy - anchors[i, 1]
        dz = qz - anchors[i, 2]
        s = -(dx * dx + dy * dy + dz * dz) / tau
        if s > cutoff:
            w = np.exp(s - smax)
            wsum += w
            vsum += w * (normals[i, 0] * qx + normals[i, 1] * qy
                         + normals[i, 2] * qz + offsets[i])
    v = vsum / wsum
    if v > trunc:
        v = trunc
    elif v < -trunc:
        v = -trunc
    return v / trunc
