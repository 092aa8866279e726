"""Pure NumPy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same arithmetic order. Used when the extension is missing
or when ``CARMREG_BACKEND=python`` is set.
"""

import numpy as np

_ROW_CHUNK = 16


def _sample(mu, x, y, z):
    nz, ny, nx = mu.shape
    inside = (x >= 0) & (y >= 0) & (z >= 0) & (x <= nx - 1) & (y <= ny - 1) & (z <= nz - 1)
    x = np.where(inside, x, 0.0)
    y = np.where(inside, y, 0.0)
    z = np.where(inside, z, 0.0)
    i0 = x.astype(np.intp)
    j0 = y.astype(np.intp)
    k0 = z.astype(np.intp)
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    k1 = np.minimum(k0 + 1, nz - 1)
    fx = x - i0
    fy = y - j0
    fz = z - k0

    def g(k, j, i):
        return mu[k, j, i].astype(np.float64)

    c00 = g(k0, j0, i0) + fx * (g(k0, j0, i1) - g(k0, j0, i0))
    c01 = g(k0, j1, i0) + fx * (g(k0, j1, i1) - g(k0, j1, i0))
    c10 = g(k1, j0, i0) + fx * (g(k1, j0, i1) - g(k1, j0, i0))
    c11 = g(k1, j1, i0) + fx * (g(k1, j1, i1) - g(k1, j1, i0))
    c0 = c00 + fy * (c01 - c00)
    c1 = c10 + fy * (c11 - c10)
    return np.where(inside, c0 + fz * (c1 - c0), 0.0)


def trilinear_many(mu, idx):
    idx = np.asarray(idx, dtype=np.float64)
    return _sample(mu, idx[:, 0], idx[:, 1], idx[:, 2])


def _clip(o, d, lo, hi, t0, t1):
    small = np.abs(d) < 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - o) / d
        b = (hi - o) / d
    a, b = np.minimum(a, b), np.maximum(a, b)
    miss = small & ((o < lo) | (o > hi))
    t0 = np.where(small, t0, np.maximum(t0, a))
    t1 = np.where(small, t1, np.minimum(t1, b))
    t0 = np.where(miss, np.inf, t0)
    t1 = np.where(miss, -np.inf, t1)
    return t0, t1


def render_rays(mu, source, det_origin, u_step, v_step, cols, rows, spacing,
                active, step, out, nthreads):
    nz, ny, nx = mu.shape
    source = np.asarray(source, dtype=np.float64)
    det_origin = np.asarray(det_origin, dtype=np.float64)
    u_step = np.asarray(u_step, dtype=np.float64)
    v_step = np.asarray(v_step, dtype=np.float64)
    sx, sy, sz = (float(s) for s in spacing)
    ox, oy, oz = source
    cols = np.asarray(cols, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)

    for r0 in range(0, len(rows), _ROW_CHUNK):
        rr = rows[r0:r0 + _ROW_CHUNK]
        R, C = np.meshgrid(rr, cols, indexing="ij")
        q = [det_origin[a] + C * u_step[a] + R * v_step[a] for a in range(3)]
        dx, dy, dz = q[0] - ox, q[1] - oy, q[2] - oz
        length = np.sqrt((dx * sx) * (dx * sx) + (dy * sy) * (dy * sy) + (dz * sz) * (dz * sz))
        dx, dy, dz = dx / length, dy / length, dz / length

        t0 = np.zeros_like(dx)
        t1 = np.full_like(dx, np.inf)
        t0, t1 = _clip(ox, dx, 0.0, nx - 1, t0, t1)
        t0, t1 = _clip(oy, dy, 0.0, ny - 1, t0, t1)
        t0, t1 = _clip(oz, dz, 0.0, nz - 1, t0, t1)
        hit = t1 > t0
        t0s = np.where(hit, t0, 0.0)
        nsamp = np.where(hit, np.ceil((np.where(hit, t1, 0.0) - t0s) / step), 0).astype(np.int64)
        ta, tb = t0s.copy(), np.where(hit, t1, 0.0)
        ta, tb = _clip(ox, dx, active[0], active[1], ta, tb)
        ta, tb = _clip(oy, dy, active[2], active[3], ta, tb)
        ta, tb = _clip(oz, dz, active[4], active[5], ta, tb)
        hit &= tb > ta
        ka = np.where(hit, np.floor((np.where(hit, ta, 0.0) - t0s) / step - 0.5), 0).astype(np.int64)
        ka = np.maximum(ka, 0)
        kb = np.where(hit, np.ceil((np.where(hit, tb, 0.0) - t0s) / step - 0.5) + 1, 0).astype(np.int64)
        kb = np.where(hit, np.minimum(kb, nsamp), 0)

        acc = np.zeros_like(dx)
        if hit.any():
            t = t0s + (ka + 0.5) * step
            px, py, pz = ox + t * dx, oy + t * dy, oz + t * dz
            sdx, sdy, sdz = step * dx, step * dy, step * dz
            for k in range(int(ka[hit].min()), int(kb[hit].max())):
                live = hit & (k >= ka) & (k < kb)
                if not live.any():
                    continue
                acc[live] = acc[live] + _sample(mu, px[live], py[live], pz[live])
                px[live] = px[live] + sdx[live]
                py[live] = py[live] + sdy[live]
                pz[live] = pz[live] + sdz[live]
        out[r0:r0 + len(rr), :] = acc * step
    return out
