"""File formats: heightfields, episode datasets, model checkpoints, run traces.

All binary payloads are little-endian float32, row-major. Heightfields use a
single file with a structured-text header; datasets and checkpoints use a
directory with a JSON manifest plus flat array files. Loading validates
format markers, versions, and byte counts and raises DataError with an
actionable message on any mismatch.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import Heightfield

_HF_MAGIC = "grindplan-heightfield"
_DS_FORMAT = "grindplan-dataset"
_CKPT_FORMAT = "grindplan-checkpoint"
_F32 = np.dtype("<f4")


def save_heightfield(s: Heightfield, path: str | Path):
    path = Path(path)
    header = (
        f"{_HF_MAGIC} 1\n"
        f"grid {s.g}\n"
        f"h_max {s.h_max!r}\n"
        f"cell_area {s.cell_area!r}\n"
        f"data\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(s.grid, dtype=_F32).tobytes())


def load_heightfield(path: str | Path) -> Heightfield:
    path = Path(path)
    if not path.exists():
        raise DataError(f"heightfield file not found: {path}")
    blob = path.read_bytes()
    end = blob.find(b"data\n")
    if end < 0:
        raise DataError(f"{path}: missing data marker; not a heightfield file?")
    try:
        lines = blob[:end].decode("ascii").strip().splitlines()
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: corrupt header: {e}") from e
    fields = {}
    for ln in lines:
        key, _, value = ln.partition(" ")
        fields[key] = value
    if fields.get(_HF_MAGIC) != "1":
        raise DataError(f"{path}: bad magic/version; expected '{_HF_MAGIC} 1'")
    try:
        g = int(fields["grid"])
        h_max = float(fields["h_max"])
        cell_area = float(fields["cell_area"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: corrupt header field: {e}") from e
    raw = blob[end + 5:]
    expected = g * g * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} data bytes, found {len(raw)}")
    if abs(cell_area - 1.0 / (g * g)) > 1e-12:
        raise DataError(f"{path}: cell_area {cell_area} inconsistent with grid {g}")
    grid = np.frombuffer(raw, dtype=_F32).reshape(g, g).astype(np.float64)
    if not np.all(np.isfinite(grid)):
        raise DataError(f"{path}: non-finite heights")
    if grid.min() < 0 or grid.max() > h_max + 1e-6:
        raise DataError(f"{path}: heights outside [0, h_max]")
    return Heightfield(np.clip(grid, 0.0, h_max), h_max)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise DataError(f"{what} manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: corrupt {what} manifest: {e}") from e
    if not isinstance(data, dict):
        raise DataError(f"{path}: {what} manifest must be a JSON object")
    return data


def _read_f32(path: Path, shape: tuple, mmap: bool):
    if not path.exists():
        raise DataError(f"array file not found: {path}")
    count = int(np.prod(shape))
    if path.stat().st_size != count * 4:
        raise DataError(
            f"{path}: expected {count * 4} bytes for shape {shape}, "
            f"found {path.stat().st_size}")
    if mmap:
        return np.memmap(path, dtype=_F32, mode="r", shape=shape)
    return np.fromfile(path, dtype=_F32).reshape(shape)


def save_dataset(ds, dirpath: str | Path):
    """Persist an EpisodeDataset as manifest.json + flat f32 arrays."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    k, steps = ds.actions.shape[:2]
    manifest = {
        "format": _DS_FORMAT,
        "version": 1,
        "episodes": k,
        "episode_steps": steps,
        "grid": int(ds.shapes.shape[-1]),
        "h_max": ds.h_max,
        "seed": ds.seed,
        "norm_stats": {
            "action_min": [float(v) for v in ds.action_min],
            "action_max": [float(v) for v in ds.action_max],
        },
        "config_echo": ds.config_echo,
    }
    _write_json(d / "manifest.json", manifest)
    for name, arr in (("shapes", ds.shapes), ("actions", ds.actions), ("removed", ds.removed)):
        a = np.ascontiguousarray(arr, dtype=_F32)
        with open(d / f"{name}.f32", "wb") as f:
            # chunked write keeps memory flat when shapes is a memmap
            flat = a.reshape(-1)
            step = 1 << 22
            for i in range(0, flat.size, step):
                f.write(flat[i:i + step].tobytes())


def load_dataset(dirpath: str | Path, mmap_shapes: bool = True):
    from .datagen import EpisodeDataset  # local import to avoid a cycle

    d = Path(dirpath)
    m = _read_json(d / "manifest.json", "dataset")
    if m.get("format") != _DS_FORMAT:
        raise DataError(f"{d}: not a dataset directory (format={m.get('format')!r})")
    if m.get("version") != 1:
        raise DataError(f"{d}: unsupported dataset version {m.get('version')!r}")
    k = int(m["episodes"])
    steps = int(m["episode_steps"])
    g = int(m["grid"])
    shapes = _read_f32(d / "shapes.f32", (k, steps + 1, g, g), mmap=mmap_shapes)
    actions = _read_f32(d / "actions.f32", (k, steps, 3), mmap=False)
    removed = _read_f32(d / "removed.f32", (k, steps), mmap=False)
    ns = m.get("norm_stats", {})
    return EpisodeDataset(
        shapes=shapes,
        actions=actions,
        removed=removed,
        h_max=float(m["h_max"]),
        action_min=np.array(ns["action_min"], dtype=np.float64),
        action_max=np.array(ns["action_max"], dtype=np.float64),
        config_echo=m.get("config_echo", {}),
        seed=int(m["seed"]),
    )


def save_checkpoint(dirpath: str | Path, kind: str, meta: dict, params: dict):
    """Persist named parameter arrays plus metadata.

    meta must be JSON-serializable; params maps name -> float32 array.
    """
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    blobs = []
    for name in sorted(params):
        a = np.ascontiguousarray(params[name], dtype=_F32)
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.reshape(-1))
    manifest = {
        "format": _CKPT_FORMAT,
        "version": 1,
        "kind": kind,
        "meta": meta,
        "params": index,
        "total_values": offset,
    }
    _write_json(d / "manifest.json", manifest)
    with open(d / "params.f32", "wb") as f:
        for b in blobs:
            f.write(b.tobytes())


def load_checkpoint(dirpath: str | Path, kind: str) -> tuple[dict, dict]:
    d = Path(dirpath)
    m = _read_json(d / "manifest.json", "checkpoint")
    if m.get("format") != _CKPT_FORMAT:
        raise DataError(f"{d}: not a checkpoint directory (format={m.get('format')!r})")
    if m.get("version") != 1:
        raise DataError(f"{d}: unsupported checkpoint version {m.get('version')!r}")
    if m.get("kind") != kind:
        raise DataError(f"{d}: checkpoint kind {m.get('kind')!r}, expected {kind!r}")
    total = int(m["total_values"])
    flat = _read_f32(d / "params.f32", (total,), mmap=False)
    params = {}
    for entry in m["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"]:entry["offset"] + size]
        if chunk.size != size:
            raise DataError(f"{d}: truncated parameter {entry['name']!r}")
        params[entry["name"]] = chunk.reshape(entry["shape"]).copy()
    return m["meta"], params
