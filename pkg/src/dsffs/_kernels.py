"""Compiled inner loops for coordinate descent."""

import numpy as np
from numba import njit

from .models import HALF_OFFSETS

# full 26-neighborhood: each half offset and its mirror share one weight
NEIGHBOR_OFFSETS = np.array(
    [off for off in HALF_OFFSETS] + [tuple(-o for o in off) for off in HALF_OFFSETS], dtype=np.int64
)

_CURV_FLOOR = 1e-6  # in units of c; bounds the surrogate curvature for p < 2


@njit(cache=True)
def _rho(delta, p, q, c):
    t = abs(delta) / c
    return t**p / (1.0 + t ** (p - q))


@njit(cache=True)
def _drho_and_curv(delta, p, q, c):
    t = abs(delta) / c
    tc = max(t, _CURV_FLOOR)
    tpq = tc ** (p - q)
    curv = tc ** (p - 2.0) * (p + q * tpq) / (1.0 + tpq) ** 2 / (c * c)
    if t == 0.0:
        return 0.0, curv
    tpq = t ** (p - q)
    mag = t ** (p - 1.0) * (p + q * tpq) / (1.0 + tpq) ** 2 / c
    return (mag if delta > 0 else -mag), curv


@njit(cache=True, nogil=True)
def icd_sweep(
    x, anchor, nz, ny, nx,
    indptr, indices, data, d, e, theta2,
    inv_sigma2, prior_scale, p, q, c, offsets, nbr_w,
):
    """One raster sweep of 1-D surrogate Newton updates.

    Updates ``x`` and the weighted residual ``e = y - A x`` in place and
    returns the number of voxels whose step had to be halved.
    """
    n_off = offsets.shape[0]
    halved = 0
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                j = (iz * ny + iy) * nx + ix
                v = x[j]
                g = 0.0
                for k in range(indptr[j], indptr[j + 1]):
                    i = indices[k]
                    g -= data[k] * d[i] * e[i]
                h_data = theta2[j]
                g_data = g
                g += (v - anchor[j]) * inv_sigma2
                h = h_data + inv_sigma2
                if prior_scale > 0.0:
                    for m in range(n_off):
                        jz = iz + offsets[m, 0]
                        jy = iy + offsets[m, 1]
                        jx = ix + offsets[m, 2]
                        if jz < 0 or jz >= nz or jy < 0 or jy >= ny or jx < 0 or jx >= nx:
                            continue
                        xn = x[(jz * ny + jy) * nx + jx]
                        dr, cv = _drho_and_curv(v - xn, p, q, c)
                        g += prior_scale * nbr_w[m] * dr
                        h += prior_scale * nbr_w[m] * cv
                if h <= 0.0:
                    continue
                step = -g / h
                if step == 0.0:
                    continue
                if prior_scale > 0.0 and p < 2.0:
                    # the surrogate is a majorizer only up to the curvature floor
                    for _ in range(40):
                        df = g_data * step + 0.5 * h_data * step * step
                        df += ((v + step - anchor[j]) ** 2 - (v - anchor[j]) ** 2) * 0.5 * inv_sigma2
                        for m in range(n_off):
                            jz = iz + offsets[m, 0]
                            jy = iy + offsets[m, 1]
                            jx = ix + offsets[m, 2]
                            if jz < 0 or jz >= nz or jy < 0 or jy >= ny or jx < 0 or jx >= nx:
                                continue
                            xn = x[(jz * ny + jy) * nx + jx]
                            df += prior_scale * nbr_w[m] * (_rho(v + step - xn, p, q, c) - _rho(v - xn, p, q, c))
                        if df <= 0.0:
                            break
                        step *= 0.5
                        halved += 1
                    else:
                        step = 0.0
                x[j] = v + step
                for k in range(indptr[j], indptr[j + 1]):
                    e[indices[k]] -= data[k] * step
    return halved
