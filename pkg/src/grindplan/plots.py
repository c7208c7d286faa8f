"""Figure and table emission from stored run results.

Everything here reads the artifacts that planner.save_result wrote (plus the
manifest the CLI drops next to them) and renders batch outputs: PNG figures
via the Agg backend and delimited text tables. No interactive UI.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import planner
from .errors import DataError

# fixed colors so methods look the same across figures
_METHOD_COLORS = {
    "csd": "tab:blue",
    "csd_unguided": "tab:cyan",
    "csd_one_step": "tab:orange",
    "csd_one_step_unguided": "tab:red",
    "const_rs": "tab:green",
    "cvae": "tab:purple",
}


def _color(method: str):
    return _METHOD_COLORS.get(method, "tab:gray")


def load_runs(results_dir: str | Path) -> list[dict]:
    """Collect every stored run under a directory tree.

    A run is any directory containing result.json; its traces, timing, and
    provenance records are loaded alongside. Raises DataError when the tree
    holds no runs, so plotting never silently emits empty files.
    """
    root = Path(results_dir)
    if not root.exists():
        raise DataError(f"results directory not found: {root}")
    runs = []
    for res_path in sorted(root.rglob("result.json")):
        d = res_path.parent
        run = json.loads(res_path.read_text())
        run["dir"] = d
        npz = d / "traces.npz"
        if npz.exists():
            with np.load(npz) as z:
                run["traces"] = {k: z[k].copy() for k in z.files}
        prov = d / "provenance.json"
        if prov.exists():
            run["provenance"] = json.loads(prov.read_text())
        timing = d / "timing.json"
        if timing.exists():
            run["timing"] = json.loads(timing.read_text())
        runs.append(run)
    if not runs:
        raise DataError(f"no run results under {root}")
    return runs


def cumulative_excess(removed: np.ndarray, delta_vol: float) -> np.ndarray:
    """Running total of removal volume beyond the per-step allowance."""
    return np.maximum(0.0, np.asarray(removed, dtype=np.float64) - delta_vol).cumsum()


def plot_excess_curves(runs: list[dict], path: str | Path) -> Path:
    """Cumulative volume-excess vs step, one thin line per run plus a
    per-method mean."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    by_method: dict[str, list[np.ndarray]] = {}
    for run in runs:
        if "traces" not in run:
            continue
        curve = cumulative_excess(run["traces"]["removed"], run["delta_vol"])
        by_method.setdefault(run["method"], []).append(curve)
        ax.plot(np.arange(1, curve.size + 1), curve,
                color=_color(run["method"]), alpha=0.25, lw=0.8)
    if not by_method:
        raise DataError("no runs carry step traces; nothing to plot")
    for method in sorted(by_method):
        curves = by_method[method]
        n = min(c.size for c in curves)
        mean = np.mean([c[:n] for c in curves], axis=0)
        ax.plot(np.arange(1, n + 1), mean, color=_color(method),
                lw=2.0, label=f"{method} (n={len(curves)})")
    ax.set_xlabel("step")
    ax.set_ylabel("cumulative volume excess")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_timing(runs: list[dict], path: str | Path) -> Path:
    """Stacked bars of mean wall time per method, split by loop phase."""
    phases = ("observe", "plan", "execute")
    by_method: dict[str, list[dict]] = {}
    for run in runs:
        if "timing" in run:
            by_method.setdefault(run["method"], []).append(run["timing"])
    if not by_method:
        raise DataError("no runs carry timing records; nothing to plot")
    methods = sorted(by_method)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    bottom = np.zeros(len(methods))
    hatches = {"observe": "//", "plan": None, "execute": ".."}
    for phase in phases:
        vals = np.array([np.mean([t.get(phase, 0.0) for t in by_method[m]])
                         for m in methods])
        ax.bar(methods, vals, bottom=bottom, label=phase,
               color=[_color(m) for m in methods],
               alpha=0.9 if phase == "plan" else 0.45,
               hatch=hatches[phase], edgecolor="white")
        bottom += vals
    ax.set_ylabel("mean wall time per run [s]")
    ax.legend(fontsize=8)
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_shapes(final_grid: np.ndarray, target_grid: np.ndarray,
                path: str | Path, title: str = "") -> Path:
    """Side-by-side heightfield images: achieved final vs target, plus the
    signed difference."""
    final_grid = np.asarray(final_grid, dtype=np.float64)
    target_grid = np.asarray(target_grid, dtype=np.float64)
    if final_grid.shape != target_grid.shape:
        raise DataError(f"grid shape mismatch: final {final_grid.shape} "
                        f"vs target {target_grid.shape}")
    vmax = max(final_grid.max(), target_grid.max(), 1e-9)
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.2))
    for ax, grid, name in ((axes[0], final_grid, "final"),
                           (axes[1], target_grid, "target")):
        im = ax.imshow(grid.T, origin="lower", cmap="viridis",
                       vmin=0.0, vmax=vmax)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    diff = final_grid - target_grid
    lim = max(abs(diff).max(), 1e-9)
    im = axes[2].imshow(diff.T, origin="lower", cmap="coolwarm",
                        vmin=-lim, vmax=lim)
    axes[2].set_title("final - target", fontsize=9)
    axes[2].set_xticks([])
    axes[2].set_yticks([])
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def condition_label(run: dict) -> str:
    """Sweep condition of a stored run, e.g. "A/ASA" or "A/ideal"."""
    prov = run.get("provenance", {})
    shape = prov.get("shape_id", "?")
    if prov.get("mode") == "ideal":
        return f"{shape}/ideal"
    return f"{shape}/{prov.get('material', '?')}"


def group_runs(runs: list[dict]) -> dict[tuple[str, str], list[dict]]:
    """Bucket runs by (method, condition) for tables and aggregates."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for run in runs:
        groups.setdefault((run["method"], condition_label(run)), []).append(run)
    return groups


def metric_table(runs: list[dict],
                 metrics=("shape_error", "overcut_count",
                          "smoothness", "vol_excess")) -> str:
    """Render mean +/- std of each metric as delimited text.

    One row per (method, condition) group; tab-separated so the file pastes
    straight into analysis notebooks. Deterministic for fixed inputs.
    """
    groups = group_runs(runs)
    lines = ["\t".join(["method", "condition", "runs"]
                       + [f"{m}_mean\t{m}_std" for m in metrics])]
    for (method, condition), members in sorted(groups.items()):
        stats = planner.aggregate(
            [r["metrics"] for r in members], keys=metrics)
        cells = [method, condition, str(len(members))]
        for m in metrics:
            cells.append(f"{stats[m]['mean']:.6g}")
            cells.append(f"{stats[m]['std']:.6g}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_metric_table(runs: list[dict], path: str | Path, **kw) -> Path:
    out = Path(path)
    out.write_text(metric_table(runs, **kw))
    return out
