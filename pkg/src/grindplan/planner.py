"""Closed-loop shaping runs: observe, plan, execute M steps, repeat.

Three planners share the loop: the guided diffusion planner, a constrained
random-shooting baseline, and the CVAE baseline. Results carry raw traces
plus derived metrics; wall-clock timing is kept separate from the
deterministic artifacts so reruns diff clean.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cvae as cvae_mod
from . import datagen, geometry, guidance
from .envsim import CuttingEnv
from .errors import DataError, ModelError
from .geometry import CuttingAction, Heightfield

_SEED_SHOOT = 0x54071


@dataclass
class RunResult:
    """One closed-loop run: traces, metrics, and timing."""

    method: str
    seed: int
    final_shape: Heightfield
    actions: np.ndarray            # (T, 3) commanded
    effective_actions: np.ndarray  # (T, 3) applied after any deflection
    removed: np.ndarray            # (T,) volumes actually removed
    commanded: np.ndarray          # (T,) volumes the commands asked for
    cost_trace: list               # one dict per replan
    delta_vol: float
    a_max: np.ndarray
    timing: dict = field(default_factory=dict)
    shape_error: float = float("nan")
    overcut_count: int = -1
    smoothness: float = float("nan")
    vol_excess: float = float("nan")

    def __post_init__(self):
        t = self.actions.shape[0]
        if not (self.effective_actions.shape == (t, 3)
                and self.removed.shape == (t,) and self.commanded.shape == (t,)):
            raise DataError("trace lengths disagree with the task length")
        for key, val in self.timing.items():
            if val < 0:
                raise DataError(f"negative timing for {key}")

    def metrics(self) -> dict:
        return {
            "shape_error": self.shape_error,
            "overcut_count": self.overcut_count,
            "smoothness": self.smoothness,
            "vol_excess": self.vol_excess,
        }


def evaluate(result: RunResult, target: Heightfield, d_points: int = 2048) -> dict:
    """Fill and return the run metrics.

    Shape error samples the two clouds with different fixed seeds, so a
    perfect final shape scores the sampling-noise floor rather than zero.
    Overcuts count executed effective actions that bite into the target.
    """
    t = result.actions.shape[0]
    p_final = geometry.sample_points(result.final_shape, d_points, seed=0)
    p_target = geometry.sample_points(target, d_points, seed=1)
    result.shape_error = geometry.chamfer(p_final, p_target)
    over = 0
    for k in range(t):
        a = CuttingAction(*result.effective_actions[k])
        if geometry.removal_volume(target, a) > 0.0:
            over += 1
    result.overcut_count = over
    result.smoothness = guidance.cost_smoothness(result.actions, result.a_max)
    result.vol_excess = float(
        np.maximum(0.0, result.removed - result.delta_vol).sum() / t)
    return result.metrics()


def _check_window(t_total: int, h: int, m: int):
    if not 1 <= m <= h <= t_total:
        raise ModelError(f"need 1 <= M={m} <= H={h} <= T={t_total}")


def _execute(env: CuttingEnv, actions: np.ndarray, traces: dict):
    for row in actions:
        a = CuttingAction(*np.asarray(row, dtype=np.float64))
        removed, info = env.step(a)
        traces["actions"].append(a.as_array())
        traces["effective"].append(info["effective_action"].as_array())
        traces["removed"].append(removed)
        traces["commanded"].append(info["commanded_volume"])


def _result(method, seed, env, traces, cost_trace, ctx, timing) -> RunResult:
    return RunResult(
        method=method, seed=seed, final_shape=env.shape.copy(),
        actions=np.array(traces["actions"]),
        effective_actions=np.array(traces["effective"]),
        removed=np.array(traces["removed"]),
        commanded=np.array(traces["commanded"]),
        cost_trace=cost_trace, delta_vol=ctx.cfg.delta_vol,
        a_max=ctx.a_max.copy(), timing=timing)


def run_csd(env: CuttingEnv, model, vae, target: Heightfield, gcfg, pcfg,
            seed: int = 0, two_step: bool | None = None,
            guided: bool | None = None) -> RunResult:
    """Diffusion planner in the observe/plan/execute loop."""
    if model.latent_dim != vae.latent_dim:
        raise ModelError("diffusion model and codec disagree on latent size")
    if env.shape.g != target.g:
        raise ModelError(f"grid mismatch: env {env.shape.g} vs target {target.g}")
    t_total, h, m = env.task_steps, pcfg.horizon, pcfg.exec_steps
    _check_window(t_total, h, m)
    two_step = pcfg.two_step if two_step is None else two_step
    guided = pcfg.guided if guided is None else guided
    env.reset()
    traces = {"actions": [], "effective": [], "removed": [], "commanded": []}
    cost_trace = []
    timing = {"observe": 0.0, "plan": 0.0, "execute": 0.0}
    reference = None
    ctx = None
    t = 0
    while t < t_total:
        tick = time.perf_counter()
        observed = env.shape.copy()
        timing["observe"] += time.perf_counter() - tick

        tick = time.perf_counter()
        ctx = guidance.make_context(model, gcfg, observed, target)
        guide_ctx = ctx if guided else None
        m_eff = min(m, t_total - t)
        if two_step:
            acts, reference, tau = guidance.plan_two_step(
                model, vae, observed, target, t, t_total, h, m_eff,
                guide_ctx, seed, reference=reference)
        else:
            acts, tau = guidance.plan_one_step(
                model, vae, observed, target, t, h, m_eff, guide_ctx, seed)
        terms = guidance.cost_terms(tau, ctx)
        terms["t"] = t
        terms["total"] = guidance.total_cost(tau, ctx)
        cost_trace.append(terms)
        timing["plan"] += time.perf_counter() - tick

        tick = time.perf_counter()
        _execute(env, acts, traces)
        timing["execute"] += time.perf_counter() - tick
        t += m_eff
    method = "csd" if two_step else "csd_one_step"
    if not guided:
        method += "_unguided"
    result = _result(method, seed, env, traces, cost_trace, ctx, timing)
    evaluate(result, target)
    return result


def shoot_candidates(observed: Heightfield, target: Heightfield, p_target,
                     h: int, n: int, dcfg, gcfg, theta_max: float, rng,
                     score_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample n constrained H-step candidates, score their rollouts.

    Score is terminal Chamfer distance to the target plus the overcut
    penalty. Returns (best candidate actions, all n scores).
    """
    best_score, best_acts = np.inf, None
    scores = np.empty(n)
    for c in range(n):
        s = observed.copy()
        acts = np.empty((h, 3))
        overcut = 0.0
        for l in range(h):
            a = datagen.sample_constrained_action(
                s, target, dcfg.eps_vol, dcfg.d_vol, rng,
                theta_max=theta_max, h_max=s.h_max, max_tries=dcfg.max_tries)
            acts[l] = a.as_array()
            overcut += geometry.removal_volume(target, a)
            s, _ = geometry.cut(s, a)
        p_s = geometry.sample_points(s, score_points, seed=0)
        scores[c] = geometry.chamfer(p_s, p_target) + gcfg.lambda_col * overcut
        if scores[c] < best_score:
            best_score, best_acts = scores[c], acts
    return best_acts, scores


def run_const_rs(env: CuttingEnv, target: Heightfield, geo, dcfg, gcfg, pcfg,
                 seed: int = 0) -> RunResult:
    """Constrained random shooting: sample candidate action sequences under
    the data-collection volume caps, score rollouts, execute the best."""
    if env.shape.g != target.g:
        raise ModelError(f"grid mismatch: env {env.shape.g} vs target {target.g}")
    t_total, h, m = env.task_steps, pcfg.horizon, pcfg.exec_steps
    _check_window(t_total, h, m)
    if pcfg.n_candidates < 1:
        raise ModelError(f"need at least one candidate, got {pcfg.n_candidates}")
    rng = np.random.default_rng([seed, _SEED_SHOOT])
    env.reset()
    # metric context only; there is no model, so stats come from the action box
    traces = {"actions": [], "effective": [], "removed": [], "commanded": []}
    cost_trace = []
    timing = {"observe": 0.0, "plan": 0.0, "execute": 0.0}
    theta = geo.theta_max
    ctx = guidance.GuideContext(
        env.shape.copy(), target, gcfg,
        np.array([-theta, -theta, 0.0]),
        np.array([theta, theta, env.shape.h_max]), 0)
    p_target = geometry.sample_points(target, pcfg.score_points, seed=1)
    t = 0
    while t < t_total:
        tick = time.perf_counter()
        observed = env.shape.copy()
        timing["observe"] += time.perf_counter() - tick

        tick = time.perf_counter()
        best_acts, scores = shoot_candidates(
            observed, target, p_target, h, pcfg.n_candidates, dcfg, gcfg,
            theta, rng, pcfg.score_points)
        cost_trace.append({"t": t, "score": float(scores.min()),
                           "scores_mean": float(scores.mean())})
        timing["plan"] += time.perf_counter() - tick

        tick = time.perf_counter()
        m_eff = min(m, t_total - t)
        _execute(env, best_acts[:m_eff], traces)
        timing["execute"] += time.perf_counter() - tick
        t += m_eff
    result = _result("const_rs", seed, env, traces, cost_trace, ctx, timing)
    evaluate(result, target)
    return result


def run_cvae(env: CuttingEnv, model: cvae_mod.CvaeModel, vae,
             target: Heightfield, gcfg, ccfg, pcfg, seed: int = 0) -> RunResult:
    """CVAE baseline: sample a window latent, refine by cost descent."""
    if not model.trained:
        raise ModelError("cvae has not been trained")
    if model.latent_dim != vae.latent_dim:
        raise ModelError("cvae and codec disagree on latent size")
    if env.shape.g != target.g:
        raise ModelError(f"grid mismatch: env {env.shape.g} vs target {target.g}")
    t_total, h, m = env.task_steps, model.horizon, pcfg.exec_steps
    if pcfg.horizon != model.horizon:
        raise ModelError(f"cvae was trained at H={model.horizon}, "
                         f"planner asks H={pcfg.horizon}")
    _check_window(t_total, h, m)
    env.reset()
    traces = {"actions": [], "effective": [], "removed": [], "commanded": []}
    cost_trace = []
    timing = {"observe": 0.0, "plan": 0.0, "execute": 0.0}
    ctx = None
    t = 0
    while t < t_total:
        tick = time.perf_counter()
        observed = env.shape.copy()
        timing["observe"] += time.perf_counter() - tick

        tick = time.perf_counter()
        ctx = guidance.GuideContext(observed, target, gcfg, model.norm_min,
                                    model.norm_max, model.latent_dim)
        tau, info = cvae_mod.refine_plan(
            model, ctx, vae.encode(observed), vae.encode(target), ccfg,
            seed=seed * 1000003 + t)
        terms = guidance.cost_terms(tau, ctx)
        terms["t"] = t
        terms["total"] = info["objective"][-1]
        terms["cond_residual"] = info["cond_residual"]
        cost_trace.append(terms)
        timing["plan"] += time.perf_counter() - tick

        tick = time.perf_counter()
        m_eff = min(m, t_total - t)
        _execute(env, tau[:m_eff, model.latent_dim:], traces)
        timing["execute"] += time.perf_counter() - tick
        t += m_eff
    result = _result("cvae", seed, env, traces, cost_trace, ctx, timing)
    evaluate(result, target)
    return result


def save_result(result: RunResult, dirpath) -> None:
    """result.json and traces.npz are deterministic; timing.json is not."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    payload = {
        "method": result.method,
        "seed": result.seed,
        "metrics": result.metrics(),
        "delta_vol": result.delta_vol,
        "a_max": [float(v) for v in result.a_max],
        "task_steps": int(result.actions.shape[0]),
        "cost_trace": result.cost_trace,
    }
    (d / "result.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (d / "timing.json").write_text(json.dumps(result.timing, indent=2, sort_keys=True))
    np.savez_compressed(
        d / "traces.npz",
        final_shape=result.final_shape.grid.astype(np.float32),
        actions=result.actions.astype(np.float32),
        effective_actions=result.effective_actions.astype(np.float32),
        removed=result.removed.astype(np.float32),
        commanded=result.commanded.astype(np.float32))


def load_result_metrics(dirpath) -> dict:
    p = Path(dirpath) / "result.json"
    if not p.exists():
        raise DataError(f"no result.json under {dirpath}")
    return json.loads(p.read_text())


def aggregate(results: list, keys=("shape_error", "overcut_count",
                                   "smoothness", "vol_excess")) -> dict:
    """Mean and standard deviation of each metric over a list of runs.

    Accepts live RunResult objects or the metric dicts stored in
    result.json, so tables rebuilt from disk match in-process ones.
    """
    if not results:
        raise DataError("no runs to aggregate")
    out = {}
    for key in keys:
        vals = np.array([r[key] if isinstance(r, dict) else getattr(r, key)
                         for r in results], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
