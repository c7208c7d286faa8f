"""Constrained random episode collection and dataset persistence.

Episodes are rolled out in the ideal environment from the configured slab.
Every step's action is rejection-sampled until it satisfies both volume
constraints: removal from the current shape at most eps_vol, and overcut of
the reference shape (the bevel target) at most d_vol. A bounded retry budget
falls back to a guaranteed no-contact action.

Stored arrays are float32. To keep the stored chain exactly re-verifiable,
collection quantizes each intermediate shape (and every action) to float32
before using it further: what the file contains is precisely what the
constraints were checked against, so an audit can replay the episode
bit-for-bit on the same kernel backend.
"""
from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .config import Config
from .errors import DataError
from .geometry import CuttingAction, Heightfield


@dataclass
class EpisodeDataset:
    """K episodes of (shapes, actions, removed) plus normalization stats.

    shapes: (K, steps+1, G, G) float32, possibly a read-only memmap.
    actions: (K, steps, 3) float32 rows [roll, pitch, z].
    removed: (K, steps) float32 actually-removed volumes.
    """

    shapes: np.ndarray
    actions: np.ndarray
    removed: np.ndarray
    h_max: float
    action_min: np.ndarray
    action_max: np.ndarray
    config_echo: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def episodes(self) -> int:
        return self.actions.shape[0]

    @property
    def episode_steps(self) -> int:
        return self.actions.shape[1]

    @property
    def grid(self) -> int:
        return self.shapes.shape[-1]

    def shape_at(self, episode: int, step: int) -> Heightfield:
        return Heightfield(np.asarray(self.shapes[episode, step], dtype=np.float64), self.h_max)


def sample_constrained_action(s: Heightfield, s_ref: Heightfield, eps_vol: float,
                              d_vol: float, rng, theta_max: float = math.radians(30.0),
                              h_max: float = 1.0, max_tries: int = 200) -> CuttingAction:
    """Uniform rejection sampling over the action box under both volume caps.

    Returns an action with removal_volume(s, a) <= eps_vol and
    removal_volume(s_ref, a) <= d_vol; after max_tries rejections, the
    no-contact action (0, 0, h_max) (heights never exceed h_max, so it is
    always feasible). Actions are quantized to float32 at draw time so the
    value checked is the value later stored.
    """
    if eps_vol <= 0:
        raise ValueError(f"eps_vol must be > 0, got {eps_vol}")
    if d_vol < 0:
        raise ValueError(f"d_vol must be >= 0, got {d_vol}")
    for _ in range(max_tries):
        draw = rng.uniform(size=3)
        a = CuttingAction(
            float(np.float32((2 * draw[0] - 1) * theta_max)),
            float(np.float32((2 * draw[1] - 1) * theta_max)),
            float(np.float32(draw[2] * h_max)),
        )
        if geometry.removal_volume(s, a) <= eps_vol and geometry.removal_volume(s_ref, a) <= d_vol:
            return a
    return CuttingAction(0.0, 0.0, float(np.float32(h_max)))


def _quantize(grid: np.ndarray) -> np.ndarray:
    return grid.astype(np.float32).astype(np.float64)


def collect(k_episodes: int, episode_steps: int, cfg: Config, seed: int,
            shapes_path: str | Path | None = None, log_every: int = 0) -> EpisodeDataset:
    """Roll out K constrained episodes in the ideal environment.

    Deterministic per (seed, config, kernel backend). The shapes array is
    written into a float32 memmap (at shapes_path or a temp file) so desk-
    scale collections do not need the full array in memory.
    """
    if k_episodes < 1 or episode_steps < 2:
        raise DataError(
            f"need k_episodes >= 1 and episode_steps >= 2, got {k_episodes}, {episode_steps}")
    g = cfg.geometry.grid
    h_max = cfg.geometry.h_max
    initial, _ = geometry.make_target(
        cfg.env.shape_id, g=g, h_max=h_max, slab_height=cfg.geometry.slab_height,
        theta_max=cfg.geometry.theta_max)
    # reference shape guarding Eq-7b-style overcut: the single-bevel target
    _, reference = geometry.make_target(
        "A", g=g, h_max=h_max, slab_height=cfg.geometry.slab_height,
        theta_max=cfg.geometry.theta_max)
    reference = Heightfield(_quantize(reference.grid), h_max)

    if shapes_path is None:
        tmp = tempfile.NamedTemporaryFile(prefix="grindplan-shapes-", suffix=".f32", delete=False)
        shapes_path = tmp.name
        tmp.close()
    shapes = np.memmap(shapes_path, dtype=np.float32, mode="w+",
                       shape=(k_episodes, episode_steps + 1, g, g))
    actions = np.zeros((k_episodes, episode_steps, 3), dtype=np.float32)
    removed = np.zeros((k_episodes, episode_steps), dtype=np.float32)

    dg = cfg.datagen
    for ep in range(k_episodes):
        rng = np.random.default_rng((seed, ep))
        s = Heightfield(_quantize(initial.grid), h_max)
        shapes[ep, 0] = s.grid
        for t in range(episode_steps):
            a = sample_constrained_action(
                s, reference, dg.eps_vol, dg.d_vol, rng,
                theta_max=cfg.geometry.theta_max, h_max=h_max, max_tries=dg.max_tries)
            s_next, w = geometry.cut(s, a)
            s = Heightfield(_quantize(s_next.grid), h_max)
            shapes[ep, t + 1] = s.grid
            actions[ep, t] = [a.roll, a.pitch, a.z]
            removed[ep, t] = np.float32(geometry.shape_volume(w))
        if log_every and (ep + 1) % log_every == 0:
            print(f"collect: {ep + 1}/{k_episodes} episodes")
    shapes.flush()

    a64 = actions.astype(np.float64)
    ds = EpisodeDataset(
        shapes=shapes, actions=actions, removed=removed, h_max=h_max,
        action_min=a64.reshape(-1, 3).min(axis=0),
        action_max=a64.reshape(-1, 3).max(axis=0),
        config_echo=cfg.to_dict(), seed=seed)
    return ds


def audit(ds: EpisodeDataset, cfg: Config | None = None) -> dict:
    """Replay every episode from its stored arrays and verify the invariants.

    Checks, per step: the stored chain (cut of shapes[k] by actions[k]
    reproduces shapes[k+1] bit-exactly after f32 quantization), both volume
    constraints, and the stored removed volume. Raises DataError on the
    first violation; returns summary counters.
    """
    echo = ds.config_echo if cfg is None else cfg.to_dict()
    try:
        eps_vol = echo["datagen"]["eps_vol"]
        d_vol = echo["datagen"]["d_vol"]
        slab = echo["geometry"]["slab_height"]
        theta_max = math.radians(echo["geometry"]["theta_max_deg"])
    except KeyError as e:
        raise DataError(f"dataset config echo missing key: {e}") from e
    _, reference = geometry.make_target("A", g=ds.grid, h_max=ds.h_max,
                                        slab_height=slab, theta_max=theta_max)
    reference = Heightfield(_quantize(reference.grid), ds.h_max)
    fallback = CuttingAction(0.0, 0.0, float(np.float32(ds.h_max)))
    fallbacks = 0
    for ep in range(ds.episodes):
        s = ds.shape_at(ep, 0)
        for t in range(ds.episode_steps):
            a = CuttingAction(*ds.actions[ep, t].astype(np.float64))
            v = geometry.removal_volume(s, a)
            if v > eps_vol:
                raise DataError(
                    f"episode {ep} step {t}: removal volume {v:.6g} exceeds eps_vol {eps_vol}")
            v_ref = geometry.removal_volume(reference, a)
            if v_ref > d_vol:
                raise DataError(
                    f"episode {ep} step {t}: reference overcut {v_ref:.6g} exceeds d_vol {d_vol}")
            s_next, w = geometry.cut(s, a)
            stored = np.asarray(ds.shapes[ep, t + 1])
            if not np.array_equal(s_next.grid.astype(np.float32), stored):
                raise DataError(f"episode {ep} step {t}: stored chain mismatch")
            if np.float32(geometry.shape_volume(w)) != ds.removed[ep, t]:
                raise DataError(f"episode {ep} step {t}: stored removed volume mismatch")
            if a == fallback:
                fallbacks += 1
            s = Heightfield(stored.astype(np.float64), ds.h_max)
    return {"episodes": ds.episodes, "steps": ds.episodes * ds.episode_steps,
            "fallback_actions": fallbacks}


def action_coverage(ds: EpisodeDataset, bins: int = 20) -> np.ndarray:
    """Per-dimension histogram occupancy over the dataset's own action range."""
    occ = np.zeros(3)
    flat = ds.actions.reshape(-1, 3).astype(np.float64)
    for j in range(3):
        lo, hi = ds.action_min[j], ds.action_max[j]
        if hi <= lo:
            occ[j] = 0.0
            continue
        h, _ = np.histogram(flat[:, j], bins=bins, range=(lo, hi))
        occ[j] = np.count_nonzero(h) / bins
    return occ
