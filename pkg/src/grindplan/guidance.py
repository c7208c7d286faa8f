"""Cost terms for cut planning, their gradients, and two-step guided sampling.

Costs are evaluated on raw (de-normalized) trajectories. The guide handed to
the sampler works in normalized coordinates and converts through the chain
rule, returning the descent direction -grad(cost).
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffuser, geometry
from .config import GuidanceConfig
from .errors import ModelError
from .geometry import CuttingAction, Heightfield


@dataclass
class GuideContext:
    """Everything the cost terms need about one planning situation."""

    current: Heightfield
    target: Heightfield
    cfg: GuidanceConfig
    norm_min: np.ndarray
    norm_max: np.ndarray
    latent_dim: int
    a_max: np.ndarray = field(init=False)

    def __post_init__(self):
        self.norm_min = np.asarray(self.norm_min, dtype=np.float64)
        self.norm_max = np.asarray(self.norm_max, dtype=np.float64)
        span = self.norm_max[self.latent_dim:] - self.norm_min[self.latent_dim:]
        self.a_max = self.cfg.travel_frac * span


def make_context(model, cfg: GuidanceConfig, current: Heightfield,
                 target: Heightfield) -> GuideContext:
    if current.g != target.g:
        raise ModelError(f"grid mismatch: current {current.g} vs target {target.g}")
    return GuideContext(current, target, cfg, model.norm_min, model.norm_max,
                        model.latent_dim)


def cost_overcut(a: CuttingAction, target: Heightfield) -> float:
    """Volume the action would remove from the target shape (0 if none)."""
    return geometry.removal_volume(target, a)


def cost_volume_limit(s_est: Heightfield, a: CuttingAction, delta_vol: float) -> float:
    """Hinge on the single-step removal volume against the limit."""
    return max(0.0, geometry.removal_volume(s_est, a) - delta_vol)


def cost_smoothness(actions: np.ndarray, a_max: np.ndarray) -> float:
    """Sum of squared adjacent action jumps larger than the travel bound."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[0] < 2:
        raise ModelError(f"need a (steps, dims) action sequence, got {actions.shape}")
    diff = actions[:-1] - actions[1:]
    gate = np.abs(diff) > np.asarray(a_max, dtype=np.float64)
    return float((diff * diff * gate).sum())


def _rollout_estimates(ctx: GuideContext, actions: np.ndarray) -> np.ndarray:
    shapes, _ = geometry.rollout(ctx.current, actions)
    return shapes


def cost_terms(tau: np.ndarray, ctx: GuideContext,
               shapes: np.ndarray | None = None) -> dict:
    """Unweighted cost components of a raw trajectory (state term is zero
    by construction: constraints are enforced by inpainting, not priced)."""
    tau = np.asarray(tau, dtype=np.float64)
    actions = tau[:, ctx.latent_dim:]
    if actions.shape[1] != diffuser.ACTION_DIM:
        raise ModelError(f"trajectory has {tau.shape[1]} channels, expected "
                         f"{ctx.latent_dim + diffuser.ACTION_DIM}")
    if shapes is None:
        shapes = _rollout_estimates(ctx, actions)
    col = 0.0
    vol = 0.0
    for l in range(actions.shape[0]):
        a = CuttingAction(*actions[l])
        col += cost_overcut(a, ctx.target)
        vol += cost_volume_limit(Heightfield(shapes[l], ctx.current.h_max), a,
                                 ctx.cfg.delta_vol)
    return {
        "smoothness": cost_smoothness(actions, ctx.a_max),
        "overcut": col,
        "volume": vol,
    }


def total_cost(tau: np.ndarray, ctx: GuideContext,
               shapes: np.ndarray | None = None) -> float:
    """Weighted sum of the cost terms; per-step shape estimates come from a
    geometric rollout of the current observed shape (kept frozen under
    differentiation)."""
    terms = cost_terms(tau, ctx, shapes)
    return (ctx.cfg.lambda_sm * terms["smoothness"]
            + ctx.cfg.lambda_col * terms["overcut"]
            + ctx.cfg.lambda_vol * terms["volume"])


def action_cost_gradient(actions: np.ndarray, ctx: GuideContext) -> np.ndarray:
    """Subgradient of total_cost w.r.t. the raw (steps, 3) action block.

    Shape estimates for the volume hinge are frozen, so earlier actions do
    not receive gradient through later shapes.
    """
    actions = np.asarray(actions, dtype=np.float64)
    cfg = ctx.cfg
    shapes = _rollout_estimates(ctx, actions)
    g_act = np.zeros_like(actions)
    for l in range(actions.shape[0]):
        a = CuttingAction(*actions[l])
        if geometry.removal_volume(ctx.target, a) > 0.0:
            g_act[l] += cfg.lambda_col * np.asarray(
                geometry.removal_volume_grad(ctx.target, a))
        s_l = Heightfield(shapes[l], ctx.current.h_max)
        if geometry.removal_volume(s_l, a) > cfg.delta_vol:
            g_act[l] += cfg.lambda_vol * np.asarray(
                geometry.removal_volume_grad(s_l, a))
    diff = actions[:-1] - actions[1:]
    gate = np.abs(diff) > ctx.a_max
    pair = 2.0 * cfg.lambda_sm * diff * gate
    g_act[:-1] += pair
    g_act[1:] -= pair
    return g_act


def guide_gradient(tau_norm: np.ndarray, ctx: GuideContext) -> np.ndarray:
    """Gradient of total_cost w.r.t. the normalized trajectory.

    Latent channels get zero gradient (no cost reads them); action channels
    get analytic subgradients chained through de-normalization.
    """
    tau_norm = np.asarray(tau_norm, dtype=np.float64)
    squeeze = tau_norm.ndim == 2
    if squeeze:
        tau_norm = tau_norm[None]
    span = ctx.norm_max - ctx.norm_min
    raw = (tau_norm + 1.0) * 0.5 * span + ctx.norm_min
    dz = ctx.latent_dim
    grad = np.zeros_like(tau_norm)
    for b in range(raw.shape[0]):
        grad[b, :, dz:] = action_cost_gradient(raw[b, :, dz:], ctx) * (span[dz:] * 0.5)
    return grad[0] if squeeze else grad


def make_guide(ctx: GuideContext):
    """Adapter for the sampler: returns g(mu_norm, i) = -grad total_cost."""
    def guide(mu_norm: np.ndarray, i: int) -> np.ndarray:
        return -guide_gradient(mu_norm, ctx)
    return guide


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _sample_window(model, z_start: np.ndarray, z_end: np.ndarray, h_gen: int,
                   ctx: GuideContext | None, seed: int) -> np.ndarray:
    mask = {0: z_start, h_gen - 1: z_end}
    guide = None
    scale = 1.0
    steps = None
    if ctx is not None:
        guide = make_guide(ctx)
        scale = ctx.cfg.guide_scale
        steps = ctx.cfg.guide_steps
    return diffuser.p_sample_loop(model, h_gen, mask=mask, guide=guide,
                                  guide_scale=scale, guide_steps=steps,
                                  seed=seed)


def plan_reference(model, vae, current: Heightfield, target: Heightfield,
                   t_total: int, seed: int) -> np.ndarray:
    """First guidance pass: one full-task trajectory pinned to start and
    goal; its per-step latents become terminal constraints for replanning."""
    if t_total % model.net.downsample_factor != 0:
        raise ModelError(f"task length {t_total} not divisible by "
                         f"{model.net.downsample_factor}")
    z_cur = vae.encode(current)
    z_tgt = vae.encode(target)
    tau = _sample_window(model, z_cur, z_tgt, t_total, None,
                         _derive_seed(seed, 0x11EF))
    return tau[:, :model.latent_dim]


def plan_two_step(model, vae, current: Heightfield, target: Heightfield,
                  t: int, t_total: int, h: int, m: int, ctx: GuideContext,
                  seed: int, reference: np.ndarray | None = None):
    """Guided replanning against the stored reference trajectory.

    At t=0 (or when no reference is passed) the reference pass runs first.
    Returns (actions (m,3), reference, raw trajectory) so callers can reuse
    the reference and record cost traces.
    """
    if not 1 <= m <= h <= t_total:
        raise ModelError(f"need 1 <= M={m} <= H={h} <= T={t_total}")
    if reference is None:
        reference = plan_reference(model, vae, current, target, t_total, seed)
    z_end = reference[min(t + h - 1, t_total - 1)]
    tau = _sample_window(model, vae.encode(current), z_end, h, ctx,
                         _derive_seed(seed, t + 1))
    return tau[:m, model.latent_dim:], reference, tau


def plan_one_step(model, vae, current: Heightfield, target: Heightfield,
                  t: int, h: int, m: int, ctx: GuideContext, seed: int):
    """Single-pass variant: the window's terminal constraint is the goal
    itself, which tends to front-load removal on long tasks."""
    if not 1 <= m <= h:
        raise ModelError(f"need 1 <= M={m} <= H={h}")
    tau = _sample_window(model, vae.encode(current), vae.encode(target), h,
                         ctx, _derive_seed(seed, t + 1))
    return tau[:m, model.latent_dim:], tau
