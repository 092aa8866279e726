# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray-casting and interpolation kernels.

Both kernels mirror :mod:`carmreg._pykernels` operation for operation; the
pure-Python module is the reference and the fallback when this extension is
not built.
"""

from cython.parallel cimport prange
from libc.math cimport floor, ceil, sqrt, fabs, INFINITY

import numpy as np


cdef inline double _sample(const float* mu, Py_ssize_t nx, Py_ssize_t ny,
                           Py_ssize_t nz, double x, double y, double z) noexcept nogil:
    cdef Py_ssize_t i0, j0, k0, di, dj, dk, base
    cdef double fx, fy, fz, c00, c01, c10, c11, c0, c1
    cdef double v000, v001, v010, v011, v100, v101, v110, v111
    if x < 0.0 or y < 0.0 or z < 0.0:
        return 0.0
    if x > nx - 1 or y > ny - 1 or z > nz - 1:
        return 0.0
    i0 = <Py_ssize_t>x
    j0 = <Py_ssize_t>y
    k0 = <Py_ssize_t>z
    di = 1 if i0 + 1 < nx else 0
    dj = nx if j0 + 1 < ny else 0
    dk = nx * ny if k0 + 1 < nz else 0
    fx = x - i0
    fy = y - j0
    fz = z - k0
    base = (k0 * ny + j0) * nx + i0
    v000 = mu[base]
    v001 = mu[base + di]
    v010 = mu[base + dj]
    v011 = mu[base + dj + di]
    v100 = mu[base + dk]
    v101 = mu[base + dk + di]
    v110 = mu[base + dk + dj]
    v111 = mu[base + dk + dj + di]
    c00 = v000 + fx * (v001 - v000)
    c01 = v010 + fx * (v011 - v010)
    c10 = v100 + fx * (v101 - v100)
    c11 = v110 + fx * (v111 - v110)
    c0 = c00 + fy * (c01 - c00)
    c1 = c10 + fy * (c11 - c10)
    return c0 + fz * (c1 - c0)


cdef inline void _clip(double o, double d, double lo, double hi,
                       double* t0, double* t1) noexcept nogil:
    cdef double a, b, tmp
    if fabs(d) < 1e-300:
        if o < lo or o > hi:
            t0[0] = INFINITY
            t1[0] = -INFINITY
        return
    a = (lo - o) / d
    b = (hi - o) / d
    if a > b:
        tmp = a
        a = b
        b = tmp
    if a > t0[0]:
        t0[0] = a
    if b < t1[0]:
        t1[0] = b


def trilinear_many(const float[:, :, ::1] mu, const double[:, ::1] idx):
    """Trilinear samples at continuous voxel-index coordinates ``idx`` (N x 3, xyz)."""
    cdef Py_ssize_t n = idx.shape[0], r
    cdef Py_ssize_t nz = mu.shape[0], ny = mu.shape[1], nx = mu.shape[2]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for r in range(n):
            o[r] = _sample(&mu[0, 0, 0], nx, ny, nz, idx[r, 0], idx[r, 1], idx[r, 2])
    return out


cdef double _ray(const float* m, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                 double ox, double oy, double oz, double qx, double qy, double qz,
                 double sx, double sy, double sz, const long* active,
                 double step) noexcept nogil:
    cdef long k, nsamp, ka, kb
    cdef double dx, dy, dz, length, t0, t1, ta, tb, t, acc
    cdef double px, py, pz, sdx, sdy, sdz
    # direction per unit physical length, in index units
    dx = qx - ox
    dy = qy - oy
    dz = qz - oz
    length = sqrt((dx * sx) * (dx * sx) + (dy * sy) * (dy * sy) + (dz * sz) * (dz * sz))
    dx = dx / length
    dy = dy / length
    dz = dz / length

    t0 = 0.0
    t1 = INFINITY
    _clip(ox, dx, 0.0, nx - 1, &t0, &t1)
    _clip(oy, dy, 0.0, ny - 1, &t0, &t1)
    _clip(oz, dz, 0.0, nz - 1, &t0, &t1)
    if not t1 > t0:
        return 0.0
    nsamp = <long>ceil((t1 - t0) / step)
    ta = t0
    tb = t1
    _clip(ox, dx, active[0], active[1], &ta, &tb)
    _clip(oy, dy, active[2], active[3], &ta, &tb)
    _clip(oz, dz, active[4], active[5], &ta, &tb)
    if not tb > ta:
        return 0.0
    ka = <long>floor((ta - t0) / step - 0.5)
    if ka < 0:
        ka = 0
    kb = <long>ceil((tb - t0) / step - 0.5) + 1
    if kb > nsamp:
        kb = nsamp
    t = t0 + (ka + 0.5) * step
    px = ox + t * dx
    py = oy + t * dy
    pz = oz + t * dz
    sdx = step * dx
    sdy = step * dy
    sdz = step * dz
    acc = 0.0
    for k in range(ka, kb):
        acc = acc + _sample(m, nx, ny, nz, px, py, pz)
        px = px + sdx
        py = py + sdy
        pz = pz + sdz
    return acc * step


def render_rays(const float[:, :, ::1] mu,
                const double[::1] source,
                const double[::1] det_origin,
                const double[::1] u_step,
                const double[::1] v_step,
                const double[::1] cols,
                const double[::1] rows,
                const double[::1] spacing,
                const long[::1] active,
                double step,
                double[:, ::1] out,
                int nthreads):
    """Fixed-step line integrals of ``mu`` for every (row, col) pixel.

    All geometry is expressed in continuous voxel-index coordinates except
    ``step``, which is physical (mm). ``u_step``/``v_step`` move one detector
    pixel along each detector axis. ``spacing`` converts index deltas to mm.
    ``active`` is the index box (xlo, xhi, ylo, yhi, zlo, zhi) outside of
    which ``mu`` is known to interpolate to exactly zero.
    """
    cdef Py_ssize_t nz = mu.shape[0], ny = mu.shape[1], nx = mu.shape[2]
    cdef Py_ssize_t nrows = rows.shape[0], ncols = cols.shape[0]
    cdef Py_ssize_t ri, ci
    cdef const float* m = &mu[0, 0, 0]
    cdef const long* act = &active[0]

    for ri in prange(nrows, nogil=True, num_threads=nthreads, schedule="static"):
        for ci in range(ncols):
            out[ri, ci] = _ray(
                m, nx, ny, nz, source[0], source[1], source[2],
                det_origin[0] + cols[ci] * u_step[0] + rows[ri] * v_step[0],
                det_origin[1] + cols[ci] * u_step[1] + rows[ri] * v_step[1],
                det_origin[2] + cols[ci] * u_step[2] + rows[ri] * v_step[2],
                spacing[0], spacing[1], spacing[2], act, step)
