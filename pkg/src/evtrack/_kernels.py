"""Numba-accelerated inner loops for the M-step objective.

The objective is evaluated thousands of times per buffer (finite-difference
gradients), each time touching every (event, face) pair. The jitted kernel
computes per-event partial sums in parallel and reduces them sequentially,
so results are deterministic and match the pure-numpy path to float64
round-off. Falls back to numpy when numba is unavailable.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _log_sigmoid(x):
        if x >= 0.0:
            return -np.log1p(np.exp(-x))
        return x - np.log1p(np.exp(x))

    @njit(cache=True, inline="always")
    def _pair_log_weight(ox, oy, oz, dx, dy, dz, tri, normals, j,
                         alpha, gamma, with_angular):
        """M-step log weight of one (ray, face) pair; tri is (F, 3, 3)."""
        d_lat = 1e300
        for e in range(3):
            ax = tri[j, e, 0]
            ay = tri[j, e, 1]
            az = tri[j, e, 2]
            bx = tri[j, (e + 1) % 3, 0]
            by = tri[j, (e + 1) % 3, 1]
            bz = tri[j, (e + 1) % 3, 2]
            ex = bx - ax
            ey = by - ay
            ez = bz - az
            aox = ax - ox
            aoy = ay - oy
            aoz = az - oz
            t0 = aox * dx + aoy * dy + aoz * dz
            ux = aox - t0 * dx
            uy = aoy - t0 * dy
            uz = aoz - t0 * dz
            t1 = ex * dx + ey * dy + ez * dz
            wx = ex - t1 * dx
            wy = ey - t1 * dy
            wz = ez - t1 * dz
            ww = wx * wx + wy * wy + wz * wz
            if ww <= 1e-12:
                s = 0.0
            else:
                s = -(ux * wx + uy * wy + uz * wz) / ww
                if s < 0.0:
                    s = 0.0
                elif s > 1.0:
                    s = 1.0
            px = ux + s * wx
            py = uy + s * wy
            pz = uz + s * wz
            dist = np.sqrt(px * px + py * py + pz * pz)
            if dist < d_lat:
                d_lat = dist

        nx = normals[j, 0]
        ny = normals[j, 1]
        nz = normals[j, 2]
        denom = dx * nx + dy * ny + dz * nz

        sign = -1.0
        if d_lat == 0.0:
            sign = 1.0
        elif abs(denom) > 1e-12:
            cx = (tri[j, 0, 0] + tri[j, 1, 0] + tri[j, 2, 0]) / 3.0
            cy = (tri[j, 0, 1] + tri[j, 1, 1] + tri[j, 2, 1]) / 3.0
            cz = (tri[j, 0, 2] + tri[j, 1, 2] + tri[j, 2, 2]) / 3.0
            t = ((cx - ox) * nx + (cy - oy) * ny + (cz - oz) * nz) / denom
            if t >= 0.0:
                hx = ox + t * dx - tri[j, 0, 0]
                hy = oy + t * dy - tri[j, 0, 1]
                hz = oz + t * dz - tri[j, 0, 2]
                e0x = tri[j, 1, 0] - tri[j, 0, 0]
                e0y = tri[j, 1, 1] - tri[j, 0, 1]
                e0z = tri[j, 1, 2] - tri[j, 0, 2]
                e1x = tri[j, 2, 0] - tri[j, 0, 0]
                e1y = tri[j, 2, 1] - tri[j, 0, 1]
                e1z = tri[j, 2, 2] - tri[j, 0, 2]
                d00 = e0x * e0x + e0y * e0y + e0z * e0z
                d01 = e0x * e1x + e0y * e1y + e0z * e1z
                d11 = e1x * e1x + e1y * e1y + e1z * e1z
                q0 = hx * e0x + hy * e0y + hz * e0z
                q1 = hx * e1x + hy * e1y + hz * e1z
                det = d00 * d11 - d01 * d01
                if det > 1e-12:
                    b1 = (d11 * q0 - d01 * q1) / det
                    b2 = (d00 * q1 - d01 * q0) / det
                    b0 = 1.0 - b1 - b2
                    if b0 >= -1e-9 and b1 >= -1e-9 and b2 >= -1e-9:
                        sign = 1.0

        lw = _log_sigmoid(sign * d_lat * d_lat / alpha)
        if with_angular:
            r_ang = abs(denom)
            if r_ang > 1.0:
                r_ang = 1.0
            lw -= r_ang / gamma
        return lw

    @njit(cache=True, parallel=True)
    def _soft_objective_kernel(origins, directions, tri, normals, q,
                               alpha, gamma, with_angular):
        n, f = q.shape
        per_event = np.zeros(n)
        for i in prange(n):
            acc = 0.0
            for j in range(f):
                qij = q[i, j]
                if qij == 0.0:
                    continue
                acc += qij * _pair_log_weight(
                    origins[i, 0], origins[i, 1], origins[i, 2],
                    directions[i, 0], directions[i, 1], directions[i, 2],
                    tri, normals, j, alpha, gamma, with_angular)
            per_event[i] = acc
        return per_event

    @njit(cache=True, parallel=True)
    def _hard_objective_kernel(origins, directions, tri, normals, j_star,
                               alpha, gamma, with_angular):
        n = len(j_star)
        per_event = np.zeros(n)
        for i in prange(n):
            per_event[i] = _pair_log_weight(
                origins[i, 0], origins[i, 1], origins[i, 2],
                directions[i, 0], directions[i, 1], directions[i, 2],
                tri, normals, j_star[i], alpha, gamma, with_angular)
        return per_event


def soft_objective(origins, directions, tri, normals, q, alpha, gamma,
                   with_angular: bool) -> float:
    """Sum_i sum_j q[i,j] * m_log_weight(i, j). Requires numba."""
    per_event = _soft_objective_kernel(
        np.ascontiguousarray(origins), np.ascontiguousarray(directions),
        np.ascontiguousarray(tri), np.ascontiguousarray(normals),
        np.ascontiguousarray(q), alpha, gamma, with_angular)
    return float(per_event.sum())


def hard_objective(origins, directions, tri, normals, j_star, alpha, gamma,
                   with_angular: bool) -> float:
    """Sum_i m_log_weight(i, argmax_j q[i, j]). Requires numba."""
    per_event = _hard_objective_kernel(
        np.ascontiguousarray(origins), np.ascontiguousarray(directions),
        np.ascontiguousarray(tri), np.ascontiguousarray(normals),
        np.ascontiguousarray(j_star), alpha, gamma, with_angular)
    return float(per_event.sum())
