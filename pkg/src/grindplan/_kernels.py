"""Kernel backend selection: compiled core if built, numpy fallback otherwise.

Set GRINDPLAN_FORCE_PY=1 to force the fallback (used by the parity tests and
the kernel benchmark).
"""
import os

if os.environ.get("GRINDPLAN_FORCE_PY", "") == "1":
    from . import _core_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _core_py as _impl

        BACKEND = "python"

plane_grid = _impl.plane_grid
cut_grid = _impl.cut_grid
removal_volume = _impl.removal_volume
removal_volume_grad = _impl.removal_volume_grad
grid_sum = _impl.grid_sum
rollout = _impl.rollout
