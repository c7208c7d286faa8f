"""Command-line front end for the shaping toolkit.

Commands cover the full experiment pipeline: constrained data collection,
codec / diffusion / autoencoder training, open-loop planning, closed-loop
runs against the simulated grinder, and evaluation or figure emission from
stored results. Every output directory is self-describing: a manifest.json
echoes the fully resolved config, the command, and library versions
(provenance.json, kept separate from dataset and checkpoint manifests), so
any artifact can be regenerated from its own folder.

Exit codes follow the error taxonomy: 0 success, 1 generic failure,
2 configuration, 3 data, 4 model.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen, envsim, geometry, guidance, planner, plots, serialio, shapecodec
from . import cvae as cvae_mod
from . import diffuser as diffuser_mod
from .config import Config, config_from_dict, load_config
from .errors import ConfigError, GrindplanError

log = logging.getLogger("grindplan.cli")


def _load_cfg(args) -> Config:
    return load_config(getattr(args, "config", None),
                       getattr(args, "override", None),
                       seed=getattr(args, "seed", None))


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out: Path, command: str, cfg: Config,
                    extra: dict | None = None):
    # no timestamps: reruns with the same config+seed must be byte-identical
    payload = {
        "command": command,
        "config": cfg.to_dict(),
        "versions": {
            "grindplan": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        payload.update(extra)
    (out / "provenance.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True))


def _require(args, names: list[str], method: str):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"{method} requires {', '.join(missing)}")


def cmd_collect(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, "artifacts/dataset")
    every = max(1, cfg.datagen.episodes // 10)
    ds = datagen.collect(cfg.datagen.episodes, cfg.datagen.episode_steps,
                         cfg, cfg.seed, log_every=every)
    serialio.save_dataset(ds, out)
    report = datagen.audit(ds, cfg)
    _write_provenance(out, "collect", cfg, {"audit": report})
    log.info("collected %d episodes x %d steps -> %s (fallback actions: %d)",
             ds.episodes, ds.episode_steps, out, report["fallback_actions"])
    return 0


def cmd_train_codec(args) -> int:
    cfg = _load_cfg(args)
    ds = serialio.load_dataset(args.data)
    every = max(1, cfg.codec.train_steps // 20)
    model = shapecodec.train_vae(ds, cfg.codec, seed=cfg.seed, log_every=every)
    out = _out_dir(args, "artifacts/codec")
    model.save(out)
    _write_provenance(out, "train-codec", cfg, {"train_stats": model.train_stats})
    log.info("codec saved to %s (%s)", out, model.train_stats)
    return 0


def cmd_train_diffuser(args) -> int:
    cfg = _load_cfg(args)
    ds = serialio.load_dataset(args.data)
    vae = shapecodec.VaeModel.load(args.codec)
    every = max(1, cfg.diffuser.train_steps // 20)
    model = diffuser_mod.train_diffuser(ds, vae, cfg.diffuser, seed=cfg.seed,
                                        log_every=every)
    out = _out_dir(args, "artifacts/diffuser")
    model.save(out)
    _write_provenance(out, "train-diffuser", cfg,
                    {"train_stats": model.train_stats})
    log.info("diffuser saved to %s (%s)", out, model.train_stats)
    return 0


def cmd_train_cvae(args) -> int:
    cfg = _load_cfg(args)
    ds = serialio.load_dataset(args.data)
    vae = shapecodec.VaeModel.load(args.codec)
    every = max(1, cfg.cvae.train_steps // 20)
    model = cvae_mod.train_cvae(ds, vae, cfg.cvae, horizon=cfg.planner.horizon,
                                seed=cfg.seed, log_every=every)
    out = _out_dir(args, "artifacts/cvae")
    model.save(out)
    _write_provenance(out, "train-cvae", cfg, {"train_stats": model.train_stats})
    log.info("trajectory autoencoder saved to %s (%s)", out, model.train_stats)
    return 0


def cmd_plan(args) -> int:
    """One open-loop plan over the whole task, without touching the env."""
    cfg = _load_cfg(args)
    vae = shapecodec.VaeModel.load(args.codec)
    model = diffuser_mod.DiffusionModel.load(args.diffuser)
    env, target = envsim.make_env(cfg, mode="ideal", shape_id=args.shape)
    current = env.shape
    t_total = cfg.env.task_steps
    ctx = None
    if cfg.planner.guided:
        ctx = guidance.make_context(model, cfg.guidance, current, target)
    actions, reference, tau = guidance.plan_two_step(
        model, vae, current, target, 0, t_total, t_total, t_total,
        ctx, cfg.seed)
    out = _out_dir(args, "artifacts/plan")
    np.savez_compressed(
        out / "plan.npz",
        actions=actions.astype(np.float32),
        states=tau[:, :vae.latent_dim].astype(np.float32),
        reference=reference.astype(np.float32),
        reference_shapes=vae.decode_batch(reference).astype(np.float32))
    _write_provenance(out, "plan", cfg, {
        "shape_id": args.shape or cfg.env.shape_id,
        "task_steps": t_total,
        "guided": bool(cfg.planner.guided),
    })
    log.info("planned %d actions -> %s", len(actions), out / "plan.npz")
    return 0


_METHODS = ("csd", "const-rs", "cvae")


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    mode = args.mode
    env, target = envsim.make_env(cfg, mode=mode, material=args.material,
                                  shape_id=args.shape)
    if args.method == "csd":
        _require(args, ["codec", "diffuser"], "method csd")
        vae = shapecodec.VaeModel.load(args.codec)
        model = diffuser_mod.DiffusionModel.load(args.diffuser)
        result = planner.run_csd(env, model, vae, target, cfg.guidance,
                                 cfg.planner, seed=cfg.seed)
    elif args.method == "const-rs":
        result = planner.run_const_rs(env, target, cfg.geometry, cfg.datagen,
                                      cfg.guidance, cfg.planner, seed=cfg.seed)
    elif args.method == "cvae":
        _require(args, ["codec", "cvae"], "method cvae")
        vae = shapecodec.VaeModel.load(args.codec)
        model = cvae_mod.CvaeModel.load(args.cvae)
        result = planner.run_cvae(env, model, vae, target, cfg.guidance,
                                  cfg.cvae, cfg.planner, seed=cfg.seed)
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown method {args.method!r}")
    metrics = planner.evaluate(result, target,
                               d_points=cfg.geometry.eval_points)
    shape_id = args.shape or cfg.env.shape_id
    material = None
    if mode == "resistance":
        material = (args.material or cfg.env.material).upper()
    cond = f"{shape_id}-{material or 'ideal'}"
    out = _out_dir(args, f"artifacts/runs/{result.method}-{cond}-seed{cfg.seed}")
    planner.save_result(result, out)
    _write_provenance(out, "run", cfg, {
        "method": result.method,
        "mode": mode,
        "material": material,
        "shape_id": shape_id,
    })
    log.info("run %s (%s, seed %d): %s -> %s", result.method, cond, cfg.seed,
             json.dumps(metrics, sort_keys=True), out)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    runs = plots.load_runs(args.results)
    out = _out_dir(args, "artifacts/eval")
    table = plots.metric_table(runs)
    (out / "metrics.tsv").write_text(table)
    agg = {}
    for (method, condition), members in sorted(plots.group_runs(runs).items()):
        agg[f"{method}|{condition}"] = planner.aggregate(
            [r["metrics"] for r in members])
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2,
                                                   sort_keys=True))
    _write_provenance(out, "eval", cfg, {"n_runs": len(runs)})
    sys.stdout.write(table)
    return 0


def _run_target(run: dict):
    prov = run.get("provenance")
    if prov is None or "config" not in prov:
        return None
    run_cfg = config_from_dict(prov["config"])
    sid = prov.get("shape_id", run_cfg.env.shape_id)
    _, target = geometry.make_target(
        sid, g=run_cfg.geometry.grid, h_max=run_cfg.geometry.h_max,
        slab_height=run_cfg.geometry.slab_height,
        theta_max=run_cfg.geometry.theta_max)
    return target


def cmd_plot(args) -> int:
    cfg = _load_cfg(args)
    runs = plots.load_runs(args.results)
    out = _out_dir(args, "artifacts/plots")
    written = [
        plots.plot_excess_curves(runs, out / "excess_curves.png"),
        plots.plot_timing(runs, out / "timing.png"),
        plots.write_metric_table(runs, out / "metrics.tsv"),
    ]
    for run in runs:
        target = _run_target(run)
        if target is None or "traces" not in run:
            continue
        title = (f"{run['method']} {plots.condition_label(run)} "
                 f"seed {run['seed']}")
        written.append(plots.plot_shapes(
            run["traces"]["final_shape"], target.grid,
            out / f"shapes_{run['dir'].name}.png", title=title))
    _write_provenance(out, "plot", cfg, {"n_runs": len(runs)})
    log.info("wrote %d files under %s", len(written), out)
    return 0


def _add_common(sp, out_hint: str):
    sp.add_argument("--config", default=None, metavar="PATH",
                    help="YAML config file (defaults apply if omitted)")
    sp.add_argument("--seed", type=int, default=None,
                    help="seed override")
    sp.add_argument("--out", default=None, metavar="DIR",
                    help=f"output directory (default {out_hint})")
    sp.add_argument("--override", action="append", default=[],
                    metavar="KEY=VALUE",
                    help="dotted config override, repeatable "
                         "(e.g. planner.guided=false)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="grindplan",
        description="Plan and simulate object shaping by constrained grinding.")
    p.add_argument("--version", action="version",
                   version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    sp = sub.add_parser("collect", help="generate the constrained episode dataset")
    _add_common(sp, "artifacts/dataset")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train-codec", help="train the shape encoder-decoder")
    _add_common(sp, "artifacts/codec")
    sp.add_argument("--data", required=True, metavar="DIR",
                    help="dataset directory from `collect`")
    sp.set_defaults(func=cmd_train_codec)

    sp = sub.add_parser("train-diffuser",
                        help="train the trajectory denoising model")
    _add_common(sp, "artifacts/diffuser")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--codec", required=True, metavar="DIR",
                    help="codec checkpoint from `train-codec`")
    sp.set_defaults(func=cmd_train_diffuser)

    sp = sub.add_parser("train-cvae",
                        help="train the conditional trajectory autoencoder baseline")
    _add_common(sp, "artifacts/cvae")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--codec", required=True, metavar="DIR")
    sp.set_defaults(func=cmd_train_cvae)

    sp = sub.add_parser("plan",
                        help="emit one open-loop plan for the configured task")
    _add_common(sp, "artifacts/plan")
    sp.add_argument("--codec", required=True, metavar="DIR")
    sp.add_argument("--diffuser", required=True, metavar="DIR")
    sp.add_argument("--shape", default=None, help="target shape id override")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("run", help="closed-loop planning run in the simulator")
    _add_common(sp, "artifacts/runs/<method>-<condition>-seed<seed>")
    sp.add_argument("--method", required=True, choices=_METHODS)
    sp.add_argument("--mode", default="resistance",
                    choices=("ideal", "resistance"),
                    help="simulator variant (default resistance)")
    sp.add_argument("--material", default=None,
                    help="resistance material override (e.g. ASA, PC)")
    sp.add_argument("--shape", default=None, help="target shape id override")
    sp.add_argument("--codec", default=None, metavar="DIR")
    sp.add_argument("--diffuser", default=None, metavar="DIR")
    sp.add_argument("--cvae", default=None, metavar="DIR")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval",
                        help="aggregate stored runs into metric tables")
    _add_common(sp, "artifacts/eval")
    sp.add_argument("--results", required=True, metavar="DIR",
                    help="directory tree holding `run` outputs")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="render figures from stored runs")
    _add_common(sp, "artifacts/plots")
    sp.add_argument("--results", required=True, metavar="DIR")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GrindplanError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
