"""Pure-numpy fallback for the compiled cutting-model kernels.

Same call signatures and float64 semantics as grindplan._core; used when
the extension is not built or GRINDPLAN_FORCE_PY=1 is set. Kernel math is
identical; summation order may differ from the compiled core in the last
ulps, so cross-backend comparisons are approximate (see the parity tests),
while each backend is internally self-consistent (grid_sum matches the
accumulation its own removal_volume uses).
"""
import numpy as np

# per-G cache of centered cell coordinates (dy column, dx row)
_coords: dict = {}


def _centered(g):
    got = _coords.get(g)
    if got is None:
        c = (np.arange(g, dtype=np.float64) + 0.5) / g - 0.5
        got = (c[:, None], c[None, :])
        _coords[g] = got
    return got


def _plane(g, roll, pitch, z):
    dy, dx = _centered(g)
    return z + np.tan(pitch) * dx + np.tan(roll) * dy


def plane_grid(roll, pitch, z, out):
    """Evaluate the cutting plane at every cell center of `out`."""
    np.copyto(out, _plane(out.shape[0], roll, pitch, z))


def cut_grid(s, roll, pitch, z, s_next, w):
    """Split shape `s` by the cutting plane: s_next = max(0, min(s, p)), w = s - s_next."""
    p = _plane(s.shape[0], roll, pitch, z)
    np.copyto(s_next, np.maximum(0.0, np.minimum(s, p)))
    np.copyto(w, s - s_next)


def removal_volume(s, roll, pitch, z, cell_area):
    """Volume the plane would remove from `s`: sum of max(0, s - p) * cell_area."""
    p = _plane(s.shape[0], roll, pitch, z)
    return float(np.sum(np.maximum(0.0, s - p)) * cell_area)


def removal_volume_grad(s, roll, pitch, z, cell_area):
    """Analytic subgradient of removal_volume over the active cells {s > p}.

    Returns (d/droll, d/dpitch, d/dz).
    """
    g = s.shape[0]
    dy, dx = _centered(g)
    p = _plane(g, roll, pitch, z)
    active = s > p
    count = np.count_nonzero(active)
    sum_x = float(np.sum(np.broadcast_to(dx, s.shape)[active]))
    sum_y = float(np.sum(np.broadcast_to(dy, s.shape)[active]))
    d_pitch = -cell_area * sum_x / np.cos(pitch) ** 2
    d_roll = -cell_area * sum_y / np.cos(roll) ** 2
    d_z = -cell_area * count
    return float(d_roll), float(d_pitch), float(d_z)


def grid_sum(s):
    """Sum of all cells (numpy pairwise order, matching this backend's kernels)."""
    return float(np.sum(s))


def rollout(s0, actions, cell_area, shapes_out, vol_out):
    """Chain cuts from s0 through an (n, 3) action array [roll, pitch, z].

    shapes_out[k] is the shape before action k (shapes_out[0] = s0),
    shapes_out[n] the final shape. vol_out[k] is the removal-volume value
    of action k against shapes_out[k] (same semantics as removal_volume,
    i.e. not reduced by the floor clamp).
    """
    shapes_out[0] = s0
    g = s0.shape[0]
    for k in range(actions.shape[0]):
        p = _plane(g, actions[k, 0], actions[k, 1], actions[k, 2])
        cur = shapes_out[k]
        vol_out[k] = np.sum(np.maximum(0.0, cur - p)) * cell_area
        shapes_out[k + 1] = np.maximum(0.0, np.minimum(cur, p))
