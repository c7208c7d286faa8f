# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the geometric cutting model.

All kernels operate on C-contiguous float64 grids over the unit work area
[0,1]x[0,1]; grid[i, j] is the surface height at cell center
x = (j + 0.5)/G, y = (i + 0.5)/G. The cutting plane for an action
(roll, pitch, z) is

    p(x, y) = z + tan(pitch) * (x - 0.5) + tan(roll) * (y - 0.5)

so the plane passes through the work-area center at height z.

Summations run in row-major sequential order; `grid_sum` uses the same
order so volume identities hold bit-for-bit against these kernels.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, tan

cnp.import_array()


def plane_grid(double roll, double pitch, double z, double[:, ::1] out):
    """Evaluate the cutting plane at every cell center of `out`."""
    cdef Py_ssize_t g = out.shape[0]
    cdef double tp = tan(pitch)
    cdef double tr = tan(roll)
    cdef double inv = 1.0 / g
    cdef double base
    cdef Py_ssize_t i, j
    for i in range(g):
        base = z + tr * ((i + 0.5) * inv - 0.5)
        for j in range(g):
            out[i, j] = base + tp * ((j + 0.5) * inv - 0.5)


def cut_grid(double[:, ::1] s, double roll, double pitch, double z,
             double[:, ::1] s_next, double[:, ::1] w):
    """Split shape `s` by the cutting plane: s_next = max(0, min(s, p)), w = s - s_next."""
    cdef Py_ssize_t g = s.shape[0]
    cdef double tp = tan(pitch)
    cdef double tr = tan(roll)
    cdef double inv = 1.0 / g
    cdef double base, p, sn
    cdef Py_ssize_t i, j
    for i in range(g):
        base = z + tr * ((i + 0.5) * inv - 0.5)
        for j in range(g):
            p = base + tp * ((j + 0.5) * inv - 0.5)
            sn = s[i, j] if s[i, j] < p else p
            if sn < 0.0:
                sn = 0.0
            s_next[i, j] = sn
            w[i, j] = s[i, j] - sn


def removal_volume(double[:, ::1] s, double roll, double pitch, double z,
                   double cell_area):
    """Volume the plane would remove from `s`: sum of max(0, s - p) * cell_area."""
    cdef Py_ssize_t g = s.shape[0]
    cdef double tp = tan(pitch)
    cdef double tr = tan(roll)
    cdef double inv = 1.0 / g
    cdef double base, p, d
    cdef double acc = 0.0
    cdef Py_ssize_t i, j
    for i in range(g):
        base = z + tr * ((i + 0.5) * inv - 0.5)
        for j in range(g):
            p = base + tp * ((j + 0.5) * inv - 0.5)
            d = s[i, j] - p
            if d > 0.0:
                acc += d
    return acc * cell_area


def removal_volume_grad(double[:, ::1] s, double roll, double pitch, double z,
                        double cell_area):
    """Analytic subgradient of removal_volume over the active cells {s > p}.

    Returns (d/droll, d/dpitch, d/dz).
    """
    cdef Py_ssize_t g = s.shape[0]
    cdef double tp = tan(pitch)
    cdef double tr = tan(roll)
    cdef double inv = 1.0 / g
    cdef double base, p, dx, dy
    cdef double sum_x = 0.0, sum_y = 0.0
    cdef Py_ssize_t count = 0
    cdef Py_ssize_t i, j
    for i in range(g):
        dy = (i + 0.5) * inv - 0.5
        base = z + tr * dy
        for j in range(g):
            dx = (j + 0.5) * inv - 0.5
            p = base + tp * dx
            if s[i, j] > p:
                sum_x += dx
                sum_y += dy
                count += 1
    cdef double cp = cos(pitch)
    cdef double cr = cos(roll)
    cdef double d_pitch = -cell_area * sum_x / (cp * cp)
    cdef double d_roll = -cell_area * sum_y / (cr * cr)
    cdef double d_z = -cell_area * count
    return d_roll, d_pitch, d_z


def grid_sum(double[:, ::1] s):
    """Row-major sequential sum, matching the kernels' accumulation order."""
    cdef Py_ssize_t g0 = s.shape[0]
    cdef Py_ssize_t g1 = s.shape[1]
    cdef double acc = 0.0
    cdef Py_ssize_t i, j
    for i in range(g0):
        for j in range(g1):
            acc += s[i, j]
    return acc


def rollout(double[:, ::1] s0, double[:, ::1] actions, double cell_area,
            double[:, :, ::1] shapes_out, double[::1] vol_out):
    """Chain cuts from s0 through an (n, 3) action array [roll, pitch, z].

    shapes_out[k] is the shape before action k (shapes_out[0] = s0),
    shapes_out[n] the final shape. vol_out[k] is the removal-volume value
    of action k against shapes_out[k] (same semantics as removal_volume,
    i.e. not reduced by the floor clamp).
    """
    cdef Py_ssize_t n = actions.shape[0]
    cdef Py_ssize_t g = s0.shape[0]
    cdef double inv = 1.0 / g
    cdef double tp, tr, base, p, sn, d, acc
    cdef Py_ssize_t k, i, j
    shapes_out[0, :, :] = s0
    for k in range(n):
        tr = tan(actions[k, 0])
        tp = tan(actions[k, 1])
        acc = 0.0
        for i in range(g):
            base = actions[k, 2] + tr * ((i + 0.5) * inv - 0.5)
            for j in range(g):
                p = base + tp * ((j + 0.5) * inv - 0.5)
                d = shapes_out[k, i, j] - p
                if d > 0.0:
                    acc += d
                sn = shapes_out[k, i, j] if shapes_out[k, i, j] < p else p
                if sn < 0.0:
                    sn = 0.0
                shapes_out[k + 1, i, j] = sn
        vol_out[k] = acc * cell_area
