"""Episode-stepping environments over the cutting model.

Two variants share the stepping contract: the ideal environment applies the
commanded plane exactly; the resistance environment models grinding
resistance by deflecting the plane upward in proportion to the commanded
removal volume (F = eta * V / belt_speed), the proxy for the push-away of
the end effector on the real machine. Small commanded volumes keep the two
environments close; that closure is the whole point of constraining removal
volume during data collection and planning.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import geometry
from .config import Config
from .geometry import CuttingAction, Heightfield


@dataclass
class ResistanceParams:
    eta: float
    belt_speed: float = 1.0
    material: str = "ASA"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.belt_speed <= 0:
            raise ValueError(f"belt_speed must be > 0, got {self.belt_speed}")


@dataclass
class EnvState:
    shape: Heightfield
    step: int = 0
    cumulative_removed: float = 0.0


def step_ideal(state: EnvState, a: CuttingAction, task_steps: int) -> tuple[EnvState, float]:
    """Apply the commanded cut exactly; returns (next state, removed volume)."""
    if state.step >= task_steps:
        raise RuntimeError(f"step budget exhausted ({task_steps} steps)")
    s_next, w = geometry.cut(state.shape, a)
    removed = geometry.shape_volume(w)
    return EnvState(s_next, state.step + 1, state.cumulative_removed + removed), removed


def step_resistance(state: EnvState, a: CuttingAction, rp: ResistanceParams,
                    task_steps: int) -> tuple[EnvState, float]:
    """Apply the cut with resistance deflection; returns (next state, removed).

    The plane retreats upward by eta * V_cmd / belt_speed, where V_cmd is the
    removal volume the commanded plane would take; larger requests lose more.
    """
    if state.step >= task_steps:
        raise RuntimeError(f"step budget exhausted ({task_steps} steps)")
    v_cmd = geometry.removal_volume(state.shape, a)
    deflection = rp.eta * v_cmd / rp.belt_speed
    effective = CuttingAction(a.roll, a.pitch, a.z + deflection)
    s_next, w = geometry.cut(state.shape, effective)
    removed = geometry.shape_volume(w)
    return EnvState(s_next, state.step + 1, state.cumulative_removed + removed), removed


class CuttingEnv:
    """Sequential episode wrapper; value-semantic states, one owner per episode."""

    def __init__(self, initial: Heightfield, task_steps: int,
                 resistance: ResistanceParams | None = None):
        self.initial = initial.copy()
        self.task_steps = task_steps
        self.resistance = resistance
        self.state = EnvState(initial.copy())

    def reset(self) -> EnvState:
        self.state = EnvState(self.initial.copy())
        return self.state

    @property
    def shape(self) -> Heightfield:
        return self.state.shape

    def step(self, a: CuttingAction) -> tuple[float, dict]:
        """Advance one cut; returns (removed volume, info).

        info carries the commanded volume and the effective (possibly
        deflected) action actually applied, for metric bookkeeping.
        """
        v_cmd = geometry.removal_volume(self.state.shape, a)
        if self.resistance is None or self.resistance.eta == 0.0:
            effective = a
            self.state, removed = step_ideal(self.state, a, self.task_steps)
        else:
            deflection = self.resistance.eta * v_cmd / self.resistance.belt_speed
            effective = CuttingAction(a.roll, a.pitch, a.z + deflection)
            self.state, removed = step_resistance(self.state, a, self.resistance, self.task_steps)
        return removed, {"commanded_volume": v_cmd, "effective_action": effective}


def make_env(cfg: Config, mode: str = "resistance", material: str | None = None,
             shape_id: str | None = None) -> tuple[CuttingEnv, Heightfield]:
    """Build an environment and its target from config.

    mode "ideal" runs without resistance; "resistance" uses the configured
    material's eta. Returns (env, target heightfield).
    """
    sid = shape_id or cfg.env.shape_id
    initial, target = geometry.make_target(
        sid, g=cfg.geometry.grid, h_max=cfg.geometry.h_max,
        slab_height=cfg.geometry.slab_height, theta_max=cfg.geometry.theta_max)
    if mode == "ideal":
        rp = None
    elif mode == "resistance":
        m = (material or cfg.env.material).upper()
        rp = ResistanceParams(eta=cfg.env.eta(m), belt_speed=cfg.env.belt_speed, material=m)
    else:
        raise ValueError(f"unknown env mode {mode!r}")
    return CuttingEnv(initial, cfg.env.task_steps, rp), target
