"""Command-line entry point: ``idrl expert|train|certify|plot|eval``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import Config, ConfigError, load_config
from .data import DatasetFormatError, load_expert, save_expert
from .nn import CheckpointError, load_checkpoint, load_module_state

log = logging.getLogger("idrl")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

METRICS_HELP = """\
metrics.csv columns (one row per evaluation):
  step              environment steps so far (epochs for behavior cloning)
  eval_return_mean  mean undiscounted true return over the evaluation episodes
  eval_return_std   population std of those returns
  disc_loss         mean discriminator loss since the previous row (empty if none)
  critic_loss       mean critic loss since the previous row
  actor_loss        mean actor loss since the previous row (BC: negative log-likelihood)
  reward_mean       mean reward fed to the critics since the previous row
"""


class UsageError(Exception):
    """Validation failure detected by the CLI itself (exit code 2)."""


def _check_writable_file(path: Path):
    if path.is_dir():
        raise UsageError(f"output path {path} is a directory")
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK) or (path.exists() and not os.access(path, os.W_OK)):
        raise UsageError(f"output path {path} is not writable")


def _check_writable_dir(path: Path):
    probe = path
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise UsageError(f"run directory {path} is not writable")


def _load_dataset(path: str, cfg: Config):
    if not path:
        raise UsageError("an expert dataset is required (--expert or [expert].path)")
    try:
        ds = load_expert(path)
    except FileNotFoundError as exc:
        raise UsageError(f"expert dataset not found: {path}") from exc
    if ds.delay != cfg.delay.delay:
        raise UsageError(f"expert dataset delay {ds.delay} does not match configured delay {cfg.delay.delay}")
    if ds.env_id != cfg.env.id:
        raise UsageError(f"expert dataset env {ds.env_id!r} does not match configured env {cfg.env.id!r}")
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_expert(args) -> int:
    from .training import train_expert

    cfg = load_config(args.config)
    out = Path(args.out)
    _check_writable_file(out)
    n = cfg.expert.n_traj if args.traj is None else args.traj
    if n < 0:
        raise UsageError("--traj must be non-negative")
    tr, ds = train_expert(cfg, n_traj=n)
    save_expert(ds, out)
    ds.write_summary_csv(out.with_name(out.name + ".summary.csv"))
    rets = np.array([t.ret for t in ds.trajectories])
    print(f"wrote {len(ds.trajectories)} trajectories to {out}"
          + (f" (mean return {rets.mean():.4f})" if len(rets) else ""))
    return EXIT_OK


def _train_one(config_path: str, algo: str, expert_path: str, run_dir: str, seed: int | None,
               resume: bool) -> float:
    from .plotting import plot_runs
    from .training import train_bc, train_idrl

    torch.set_num_threads(1)
    cfg = load_config(config_path)
    if seed is not None:
        cfg.run.seed = seed
    cfg.expert.path = str(expert_path or cfg.expert.path)
    ds = _load_dataset(cfg.expert.path, cfg)
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved_config.toml")
    (out / "algo.txt").write_text(algo + "\n")
    if algo == "idrl":
        metrics = train_idrl(cfg, ds, run_dir=out, resume=resume).metrics
    else:
        mode = "delayed_obs" if algo == "bc-delayed" else "augmented"
        metrics = train_bc(cfg, ds, mode, run_dir=out)[1]
    if metrics.rows:
        plot_runs({algo: [out / "metrics.csv"]}, out, title=f"{algo} on {cfg.env.id}, delay {cfg.delay.delay}")
    return metrics.final_return()


def cmd_train(args) -> int:
    cfg = load_config(args.config)  # validates before anything is written
    expert_path = args.expert or cfg.expert.path
    _load_dataset(expert_path, cfg)
    out = Path(args.out)
    _check_writable_dir(out)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise UsageError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}") from exc
        jobs = [(args.config, args.algo, expert_path, str(out / f"seed_{s}"), s, args.resume) for s in seeds]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                finals = list(pool.map(_train_one, *zip(*jobs)))
        else:
            finals = [_train_one(*j) for j in jobs]
        from .plotting import plot_runs
        plot_runs({args.algo: [Path(j[3]) / "metrics.csv" for j in jobs]}, out)
        for s, f in zip(seeds, finals):
            print(f"seed {s}: final return {f:.4f}")
    else:
        final = _train_one(args.config, args.algo, expert_path, str(out), None, args.resume)
        print(f"final return {final:.4f}")
    return EXIT_OK


def cmd_certify(args) -> int:
    from . import theory

    cfg = load_config(args.config)
    out = Path(args.out)
    _check_writable_dir(out)
    c = cfg.certify
    if args.jobs > 1 and c.n_random > 1:
        # split the random suite into contiguous seed blocks, one per worker
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futs = [pool.submit(theory.random_suite, 1, c.delays, [c.seed, i], c.max_states, c.max_actions,
                                c.gamma) for i in range(c.n_random)]
            certs = [cert for f in futs for cert in f.result()]
        certs += theory.named_suite(c.suites, c.suite_max_delay, c.seed)
    else:
        certs = theory.default_suite(c)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved_config.toml")
    theory.write_certificates_csv(certs, out / "certificates.csv")
    theory.write_summary_json(certs, out / "summary.json")
    summary = theory.summarize(certs)
    for kind, s in summary["by_kind"].items():
        print(f"{kind:10s} {s['count']:7d} certificates  {s['failures']} failures  min slack {s['min_slack']:.3e}")
    print(f"total {summary['total']} certificates, {summary['failures']} failures")
    return EXIT_OK if summary["failures"] == 0 else EXIT_RUNTIME


def cmd_plot(args) -> int:
    from .plotting import plot_runs

    groups: dict[str, list] = {}
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.runs):
        raise UsageError(f"{len(labels)} labels for {len(args.runs)} run directories")
    for i, run in enumerate(args.runs):
        run = Path(run)
        if not run.exists():
            raise UsageError(f"run directory {run} does not exist")
        paths = [run / "metrics.csv"] if (run / "metrics.csv").exists() else sorted(run.glob("seed_*/metrics.csv"))
        if not paths:
            raise UsageError(f"no metrics.csv found under {run}")
        groups.setdefault(labels[i] if labels else run.name, []).extend(paths)
    out = Path(args.out)
    _check_writable_dir(out)
    curves = plot_runs(groups, out, args.title)
    for c in curves:
        print(f"{c.label}: {len(c.steps)} points over {c.n_runs} run(s); final {c.mean[-1]:.4f} +- {c.std[-1]:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import BcPolicy, Trainer, agent_act, evaluate_policy

    run = Path(args.run)
    if not (run / "resolved_config.toml").exists():
        raise UsageError(f"{run} has no resolved_config.toml")
    cfg = load_config(run / "resolved_config.toml", seed_from_env=False)
    algo = (run / "algo.txt").read_text().strip() if (run / "algo.txt").exists() else "idrl"
    if algo == "idrl":
        ck = run / "checkpoints" / "latest"
        if not ck.exists():
            raise UsageError(f"{run} has no checkpoint")
        tr = Trainer(cfg.replace(run={"buffer_size": 1}), steps=0)
        sections = load_checkpoint(ck.parent / f"{ck.read_text().strip()}.ckpt")
        for name, mod in tr.agent.modules().items():
            load_module_state(f"agent.{name}", mod, sections)
        env, delay, act = tr.env, tr.delay, agent_act(tr.agent, tr.feat, tr.env)
    else:
        from .envs import make_env
        from .nn import make_generator

        env = make_env(cfg.env.id, **cfg.env.params)
        mode = "delayed_obs" if algo == "bc-delayed" else "augmented"
        pol = BcPolicy(env, cfg.delay.delay, mode, cfg.bc.hidden, make_generator(0))
        load_module_state("bc", pol.head, load_checkpoint(run / "bc_policy.ckpt"))
        delay, act = cfg.delay.delay, pol.act
    rets = evaluate_policy(env, delay, act, args.episodes, args.seed)
    print("episodes,return_mean,return_std")
    print(f"{args.episodes},{rets.mean()!r},{rets.std()!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idrl", description="Adversarial imitation from delayed demonstrations.",
                                epilog=METRICS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("expert", help="train an expert on the true reward and record delayed trajectories")
    e.add_argument("config")
    e.add_argument("--traj", type=int, default=None, help="number of trajectories (default [expert].n_traj)")
    e.add_argument("--out", required=True, help="dataset file to write")
    e.set_defaults(func=cmd_expert)

    t = sub.add_parser("train", help="train an imitator from an expert dataset", epilog=METRICS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("config")
    t.add_argument("--algo", choices=("idrl", "bc-delayed", "bc-augmented"), default="idrl")
    t.add_argument("--expert", default="", help="expert dataset (default [expert].path)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.add_argument("--seeds", default="", help="comma-separated seeds; one sub-directory per seed")
    t.add_argument("--jobs", type=int, default=1, help="parallel seed runs")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="run the delay-bound certification suite")
    c.add_argument("config")
    c.add_argument("--out", required=True, help="directory for certificates.csv and summary.json")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_certify)

    pl = sub.add_parser("plot", help="render learning curves (SVG + CSV) from run directories")
    pl.add_argument("runs", nargs="+", help="run directories (a directory of seed_* runs forms one curve)")
    pl.add_argument("--out", required=True)
    pl.add_argument("--labels", default="", help="comma-separated curve labels")
    pl.add_argument("--title", default="")
    pl.set_defaults(func=cmd_plot)

    ev = sub.add_parser("eval", help="evaluate the latest policy of a run directory")
    ev.add_argument("run")
    ev.add_argument("--episodes", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # configuration-dependent checks raised inside the library (delay/env mismatches, bad params)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
