"""Compiled ray-marching kernels for the cone-beam projector.

Both kernels walk the identical sample sequence per detector pixel:
fixed-step midpoint samples over the ray's intersection with the
trilinear support box, plus one midpoint sample over the remainder
segment. The splat kernel distributes exactly the weights the forward
kernel gathers, which makes the pair an algebraic transpose.
"""

import numpy as np
from numba import njit

_TINY = 1e-12


@njit(cache=True)
def march_view_forward(vol, h, bx, by, bz,
                       sx, sy, sz, cx, cy, cz,
                       ux, uy, uz, vx, vy, vz,
                       pitch, step, out):
    nz, ny, nx = vol.shape
    n_rows, n_cols = out.shape
    ox = (nx - 1) * 0.5
    oy = (ny - 1) * 0.5
    oz = (nz - 1) * 0.5
    for r in range(n_rows):
        voff = (r - (n_rows - 1) * 0.5) * pitch
        for c in range(n_cols):
            uoff = (c - (n_cols - 1) * 0.5) * pitch
            px = cx + uoff * ux + voff * vx
            py = cy + uoff * uy + voff * vy
            pz = cz + uoff * uz + voff * vz
            dx = px - sx
            dy = py - sy
            dz = pz - sz
            length = np.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= length
            dy /= length
            dz /= length
            t0 = 0.0
            t1 = length
            hit = True
            # slab clipping against the support box
            for axis in range(3):
                if axis == 0:
                    d = dx
                    s = sx
                    b = bx
                elif axis == 1:
                    d = dy
                    s = sy
                    b = by
                else:
                    d = dz
                    s = sz
                    b = bz
                if d > _TINY or d < -_TINY:
                    ta = (-b - s) / d
                    tb = (b - s) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
                elif s < -b or s > b:
                    hit = False
                    break
            if not hit or t1 <= t0:
                out[r, c] = 0.0
                continue
            span = t1 - t0
            k_full = int(span / step)
            acc = 0.0
            for k in range(k_full):
                t = t0 + (k + 0.5) * step
                qx = (sx + t * dx) / h + ox
                qy = (sy + t * dy) / h + oy
                qz = (sz + t * dz) / h + oz
                ix = int(np.floor(qx))
                iy = int(np.floor(qy))
                iz = int(np.floor(qz))
                fx = qx - ix
                fy = qy - iy
                fz = qz - iz
                for ddz in range(2):
                    izc = iz + ddz
                    if izc < 0 or izc >= nz:
                        continue
                    wz = fz if ddz == 1 else 1.0 - fz
                    for ddy in range(2):
                        iyc = iy + ddy
                        if iyc < 0 or iyc >= ny:
                            continue
                        wzy = wz * (fy if ddy == 1 else 1.0 - fy)
                        for ddx in range(2):
                            ixc = ix + ddx
                            if ixc < 0 or ixc >= nx:
                                continue
                            w = wzy * (fx if ddx == 1 else 1.0 - fx)
                            acc += w * vol[izc, iyc, ixc]
            total = acc * step
            rem = span - k_full * step
            if rem > _TINY:
                t = t0 + k_full * step + 0.5 * rem
                qx = (sx + t * dx) / h + ox
                qy = (sy + t * dy) / h + oy
                qz = (sz + t * dz) / h + oz
                ix = int(np.floor(qx))
                iy = int(np.floor(qy))
                iz = int(np.floor(qz))
                fx = qx - ix
                fy = qy - iy
                fz = qz - iz
                acc2 = 0.0
                for ddz in range(2):
                    izc = iz + ddz
                    if izc < 0 or izc >= nz:
                        continue
                    wz = fz if ddz == 1 else 1.0 - fz
                    for ddy in range(2):
                        iyc = iy + ddy
                        if iyc < 0 or iyc >= ny:
                            continue
                        wzy = wz * (fy if ddy == 1 else 1.0 - fy)
                        for ddx in range(2):
                            ixc = ix + ddx
                            if ixc < 0 or ixc >= nx:
                                continue
                            w = wzy * (fx if ddx == 1 else 1.0 - fx)
                            acc2 += w * vol[izc, iyc, ixc]
                total += acc2 * rem
            out[r, c] = total


@njit(cache=True)
def march_view_splat(view, h, bx, by, bz,
                     sx, sy, sz, cx, cy, cz,
                     ux, uy, uz, vx, vy, vz,
                     pitch, step, vol_out):
    nz, ny, nx = vol_out.shape
    n_rows, n_cols = view.shape
    ox = (nx - 1) * 0.5
    oy = (ny - 1) * 0.5
    oz = (nz - 1) * 0.5
    for r in range(n_rows):
        voff = (r - (n_rows - 1) * 0.5) * pitch
        for c in range(n_cols):
            g = view[r, c]
            if g == 0.0:
                continue
            uoff = (c - (n_cols - 1) * 0.5) * pitch
            px = cx + uoff * ux + voff * vx
            py = cy + uoff * uy + voff * vy
            pz = cz + uoff * uz + voff * vz
            dx = px - sx
            dy = py - sy
            dz = pz - sz
            length = np.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= length
            dy /= length
            dz /= length
            t0 = 0.0
            t1 = length
            hit = True
            for axis in range(3):
                if axis == 0:
                    d = dx
                    s = sx
                    b = bx
                elif axis == 1:
                    d = dy
                    s = sy
                    b = by
                else:
                    d = dz
                    s = sz
                    b = bz
                if d > _TINY or d < -_TINY:
                    ta = (-b - s) / d
                    tb = (b - s) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
                elif s < -b or s > b:
                    hit = False
                    break
            if not hit or t1 <= t0:
                continue
            span = t1 - t0
            k_full = int(span / step)
            gs = g * step
            for k in range(k_full):
                t = t0 + (k + 0.5) * step
                qx = (sx + t * dx) / h + ox
                qy = (sy + t * dy) / h + oy
                qz = (sz + t * dz) / h + oz
                ix = int(np.floor(qx))
                iy = int(np.floor(qy))
                iz = int(np.floor(qz))
                fx = qx - ix
                fy = qy - iy
                fz = qz - iz
                for ddz in range(2):
                    izc = iz + ddz
                    if izc < 0 or izc >= nz:
                        continue
                    wz = fz if ddz == 1 else 1.0 - fz
                    for ddy in range(2):
                        iyc = iy + ddy
                        if iyc < 0 or iyc >= ny:
                            continue
                        wzy = wz * (fy if ddy == 1 else 1.0 - fy)
                        for ddx in range(2):
                            ixc = ix + ddx
                            if ixc < 0 or ixc >= nx:
                                continue
                            w = wzy * (fx if ddx == 1 else 1.0 - fx)
                            vol_out[izc, iyc, ixc] += w * gs
            rem = span - k_full * step
            if rem > _TINY:
                t = t0 + k_full * step + 0.5 * rem
                qx = (sx + t * dx) / h + ox
                qy = (sy + t * dy) / h + oy
                qz = (sz + t * dz) / h + oz
                ix = int(np.floor(qx))
                iy = int(np.floor(qy))
                iz = int(np.floor(qz))
                fx = qx - ix
                fy = qy - iy
                fz = qz - iz
                gr = g * rem
                for ddz in range(2):
                    izc = iz + ddz
                    if izc < 0 or izc >= nz:
                        continue
                    wz = fz if ddz == 1 else 1.0 - fz
                    for ddy in range(2):
                        iyc = iy + ddy
                        if iyc < 0 or iyc >= ny:
                            continue
                        wzy = wz * (fy if ddy == 1 else 1.0 - fy)
                        for ddx in range(2):
                            ixc = ix + ddx
                            if ixc < 0 or ixc >= nx:
                                continue
                            w = wzy * (fx if ddx == 1 else 1.0 - fx)
                            vol_out[izc, iyc, ixc] += w * gr
