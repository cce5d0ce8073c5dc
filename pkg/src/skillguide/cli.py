"""Command-line workflow: train-ref -> collect -> fit-encoder -> train-skills -> eval.

Exit codes: 0 success, 2 configuration error, 3 artifact/IO error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .approx import LinearProjection, read_projection, write_projection
from .core import (ArtifactError, Config, ConfigError, NumericalError, ValidationError, make_rng)
from .env import make_env
from .evaluation import (evaluate_skills, displacement, read_eval_returns, return_curves,
                         summary_table, visitation_export, write_displacements,
                         write_feature_importance, write_return_curves, write_summary)
from .manifest import write_sidecar
from .project import collect_labeled_states, load_dataset, pretrain_encoder, save_dataset
from .sac import SacTrainer, load_checkpoint, save_checkpoint, train_reference_policy
from .skill import METRIC_COLUMNS, MetricsWriter, SkillDiscovery

log = logging.getLogger("skillguide")

OUT_ENV_VAR = "SKILLGUIDE_OUT"
EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERICAL = 2, 3, 4
REF_COLUMNS = ("epoch", "env_steps", "q1_loss", "q2_loss", "policy_loss", "eval_return")


def default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "runs")) / name


def build_config(args, base: Optional[Config] = None) -> Config:
    """Config file (or ``base``) first, then command-line flags on top."""
    overrides = {
        "seed": getattr(args, "seed", None),
        "num_skills": getattr(args, "skills", None),
        "embedding_dim": getattr(args, "embedding_dim", None),
        "n_traj": getattr(args, "n_traj", None),
    }
    if getattr(args, "config", None):
        cfg = Config.load(args.config)
    elif base is not None:
        cfg = base
    else:
        cfg = Config()
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _env_for(cfg: Config):
    return make_env(cfg.env, cfg.horizon, cfg.shared_init_noise)


# ---------------------------------------------------------------------------
# commands


def cmd_train_ref(args) -> int:
    cfg = build_config(args)
    if args.steps is not None:
        cfg = cfg.replace(ref_steps=args.steps)
    out = Path(args.out or default_out("ref"))
    out.mkdir(parents=True, exist_ok=True)
    env = _env_for(cfg)
    metrics_path = out / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    writer = MetricsWriter(metrics_path, REF_COLUMNS)
    trainer, history = train_reference_policy(env, cfg, on_epoch=writer.write)
    steps = history[-1]["env_steps"] if history else 0
    save_checkpoint(out, {"trainer": trainer.state_dict()}, cfg, steps,
                    {"kind": "reference", "state_dim": env.spec.state_dim,
                     "action_dim": env.spec.action_dim})
    write_sidecar(metrics_path, cfg)
    final = history[-1]["eval_return"] if history else float("nan")
    print(f"reference policy: {steps} env steps, eval return {final:.3f} -> {out}")
    return 0


def load_reference(directory, env_spec=None) -> tuple[SacTrainer, Config]:
    blobs, cfg, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "reference" or "trainer" not in blobs:
        raise ArtifactError(f"{directory} is not a reference-policy checkpoint")
    s_dim, a_dim = int(manifest["state_dim"]), int(manifest["action_dim"])
    if env_spec is not None and (s_dim, a_dim) != (env_spec.state_dim, env_spec.action_dim):
        raise ValidationError(f"checkpoint is for state/action dims ({s_dim}, {a_dim}); environment has "
                              f"({env_spec.state_dim}, {env_spec.action_dim})")
    trainer = SacTrainer(s_dim, a_dim, 1, cfg)
    try:
        trainer.load_state_dict(blobs["trainer"])
    except (KeyError, RuntimeError) as exc:
        raise ArtifactError(f"corrupted checkpoint {directory}: {exc}") from exc
    return trainer, cfg


def cmd_collect(args) -> int:
    _, ref_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = build_config(args, ref_cfg)
    horizon = args.horizon or cfg.horizon
    env = _env_for(cfg)
    trainer, _ = load_reference(args.checkpoint, env.spec)
    rng = make_rng(cfg.seed, "collect")
    expert = lambda s: trainer.act(s, 0, cfg.expert_mode)
    dataset = collect_labeled_states(env, expert, cfg.n_traj, horizon, rng, cfg.standardize)
    out = Path(args.out or default_out("dataset.bin"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    write_sidecar(out, cfg, {"samples": len(dataset), "n_traj": cfg.n_traj, "horizon": horizon})
    print(f"collected {len(dataset)} labeled states -> {out}")
    return 0


def cmd_fit_encoder(args) -> int:
    cfg = build_config(args)
    dataset = load_dataset(args.dataset, cfg.standardize)
    if cfg.embedding_dim >= dataset.state_dim:
        raise ConfigError(f"embedding_dim ({cfg.embedding_dim}) must be strictly smaller than the "
                          f"dataset's state_dim ({dataset.state_dim})")
    proj, acc, history = pretrain_encoder(dataset, cfg.embedding_dim, cfg)
    out = Path(args.out or default_out("projection.txt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_projection(proj, out)
    report = out.with_name(out.stem + "_report.csv")
    new = not report.exists()
    with report.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["seed", "embedding_dim", "heldout_accuracy", "steps", "final_loss"])
        w.writerow([cfg.seed, cfg.embedding_dim, f"{acc:.3f}", len(history), repr(history[-1])])
    write_sidecar(out, cfg, {"heldout_accuracy": f"{acc:.3f}"})
    write_sidecar(report, cfg)
    print(f"held-out accuracy: {acc:.3f}")
    print(f"projection ({proj.embedding_dim}x{proj.state_dim}) -> {out}")
    return 0


def _drop_rows_after(path: Path, epoch: int) -> None:
    if not path.is_file():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    col = rows[0].index("epoch")
    kept = [rows[0]] + [r for r in rows[1:] if int(r[col]) <= epoch]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(kept)


def cmd_train_skills(args) -> int:
    out = Path(args.out or default_out("skills"))
    resume = (out / "manifest.txt").is_file()
    if resume:
        _, saved_cfg, _ = load_checkpoint(out)
        run = SkillDiscovery.load(out, _env_for(saved_cfg))
        if args.steps is not None:
            run.config = run.config.replace(epochs=-(-args.steps // run.config.env_steps_per_epoch))
        cfg = run.config
        # rows written after the last checkpoint are recomputed
        for name in ("metrics.csv", "eval_returns.csv"):
            _drop_rows_after(out / name, run.epoch)
        log.info("resuming %s at epoch %d", out, run.epoch)
    else:
        cfg = build_config(args)
        if args.baseline:
            cfg = cfg.replace(use_projection=False, standardize=False)
            proj = None
        else:
            if not args.projection:
                raise ConfigError("train-skills needs --projection PATH or --baseline")
            proj = read_projection(args.projection)
            cfg = cfg.replace(embedding_dim=proj.embedding_dim)
        if args.steps is not None:
            cfg = cfg.replace(epochs=-(-args.steps // cfg.env_steps_per_epoch))
        env = _env_for(cfg)
        run = SkillDiscovery(env, cfg, proj)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("metrics.csv", "eval_returns.csv"):
            (out / name).unlink(missing_ok=True)
    metrics = MetricsWriter(out / "metrics.csv")
    returns = MetricsWriter(out / "eval_returns.csv", ("epoch", "skill", "return"))
    while run.epoch < cfg.epochs:
        row = run.run_epoch()
        metrics.write(row)
        if cfg.eval_every and run.epoch % cfg.eval_every == 0:
            for z, ret in enumerate(run.skill_returns()):
                returns.write({"epoch": run.epoch, "skill": z, "return": float(ret)})
        if cfg.checkpoint_every and run.epoch % cfg.checkpoint_every == 0:
            run.save(out)
    run.save(out)
    acc, finals = run.heldout_accuracy(cfg.eval_rollouts)
    with (out / "heldout.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "heldout_disc_acc"] + [f"skill{z}_final_e0" for z in range(len(finals))])
        w.writerow([run.epoch, repr(acc)] + [repr(float(f[0])) for f in finals])
    for name in ("metrics.csv", "eval_returns.csv", "heldout.csv"):
        write_sidecar(out / name, cfg)
    print(f"skills: {run.epoch} epochs, {run.env_steps} env steps, held-out discriminator "
          f"accuracy {acc:.3f} -> {out}")
    return 0


def variant_name(cfg: Config) -> str:
    return f"DIAYN+ENC({cfg.embedding_dim})" if cfg.use_projection else "DIAYN"


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower()


def cmd_eval(args) -> int:
    out = Path(args.out or default_out("eval"))
    out.mkdir(parents=True, exist_ok=True)
    mode = "stochastic" if args.stochastic else "deterministic"
    disp_rows, per_seed, curve_paths = [], {}, {}
    first_cfg = None
    for ckpt in args.checkpoint:
        blobs, cfg, _ = load_checkpoint(ckpt)
        first_cfg = first_cfg or cfg
        variant = args.variant or variant_name(cfg)
        env_factory = lambda cfg=cfg: _env_for(cfg)
        run = SkillDiscovery.load(ckpt, env_factory(), with_buffer=False)
        rollouts = args.rollouts or cfg.eval_rollouts
        trajs = evaluate_skills(run.trainer.policy, env_factory, cfg.num_skills, rollouts,
                                cfg.horizon, cfg.seed, mode, args.workers)
        skill_means = []
        for z, runs in trajs.items():
            values = []
            for r, traj in enumerate(runs):
                d = displacement(traj, args.axis)
                e = run.projection.embed(traj.states[[0, -1]])
                disp_rows.append({"variant": variant, "skill": z, "seed": cfg.seed, "rollout": r,
                                  "displacement": d,
                                  "projected_displacement": float(e[1, 0] - e[0, 0])})
                values.append(d)
            skill_means.append(float(np.mean(values)))
        per_seed.setdefault(variant, []).append(skill_means)
        tag = f"{_slug(variant)}_seed{cfg.seed}"
        n = visitation_export(trajs, run.projection, out / f"visitation_{tag}.csv")
        write_feature_importance(run.projection, out / f"feature_importance_{tag}.csv")
        log.info("%s: %d visitation rows", ckpt, n)
        if (Path(ckpt) / "eval_returns.csv").is_file():
            curve_paths.setdefault(variant, {})[cfg.seed] = Path(ckpt) / "eval_returns.csv"
    write_displacements(disp_rows, out / "displacements.csv")
    write_summary(summary_table(per_seed), out / "summary.csv")
    for variant, paths in curve_paths.items():
        write_return_curves(return_curves(read_eval_returns(paths)),
                            out / f"return_curves_{_slug(variant)}.csv")
    for path in sorted(out.glob("*.csv")):
        write_sidecar(path, first_cfg, {"mode": mode, "axis": args.axis})
    print(f"evaluated {len(args.checkpoint)} checkpoint(s), {len(disp_rows)} rollouts -> {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillguide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        for flag in flags:
            if flag == "skills":
                p.add_argument("--skills", type=int)
            elif flag == "steps":
                p.add_argument("--steps", type=int)
            elif flag == "embedding-dim":
                p.add_argument("--embedding-dim", type=int)

    p = sub.add_parser("train-ref", help="train the reference policy on the extrinsic reward")
    common(p, "steps")
    p.set_defaults(func=cmd_train_ref)

    p = sub.add_parser("collect", help="collect expert and random labeled states")
    common(p)
    p.add_argument("--checkpoint", required=True, help="reference-policy checkpoint directory")
    p.add_argument("--n-traj", type=int)
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("fit-encoder", help="fit the linear projection on a labeled dataset")
    common(p, "embedding-dim")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_fit_encoder)

    p = sub.add_parser("train-skills", help="run skill discovery (resumes if --out holds a checkpoint)")
    common(p, "skills", "steps", "embedding-dim")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--projection", help="projection text file from fit-encoder")
    group.add_argument("--baseline", action="store_true", help="no projection, raw states")
    p.set_defaults(func=cmd_train_skills)

    p = sub.add_parser("eval", help="deterministic skill rollouts and report tables")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="skill checkpoint directory; repeat once per seed")
    p.add_argument("--out")
    p.add_argument("--axis", type=int, required=True, help="state coordinate for displacement")
    p.add_argument("--rollouts", type=int)
    p.add_argument("--variant", help="row label in summary.csv (default: inferred per checkpoint)")
    p.add_argument("--workers", type=int, default=1)
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="stochastic", action="store_false", default=False)
    det.add_argument("--stochastic", dest="stochastic", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArtifactError, OSError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
