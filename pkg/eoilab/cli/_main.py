"""The ``eoilab`` command."""

import argparse
import logging
import os
import sys

import numpy as np

from eoilab import backend, classifier, envs, nnkit, qmix, trainer
from eoilab.cli._config import parse_config
from eoilab.cli._presets import (
    CONFIG,
    PRESETS,
    run,
    sweep,
    worker_count,
)
from eoilab.cli._report import report, write_report
from eoilab.errors import ConfigError, StructuralError
from eoilab.replay import ReplayBuffer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STRUCTURAL = 3

PROBE_CSV = "probe.csv"

_FLAG_KEYS = (
    ("env", "env_kind"),
    ("learner", "learner_kind"),
    ("mode", "intrinsic_mode"),
    ("alpha", "alpha"),
    ("beta1", "beta1"),
    ("beta2", "beta2"),
    ("batch_size", "batch_size"),
    ("episodes", "episodes"),
    ("seed", "seed"),
)


def build_parser() -> argparse.ArgumentParser:
    """The argument parser of all subcommands."""
    parser = argparse.ArgumentParser(
        prog="eoilab",
        description="Individuality-driven multi-agent learning on grid worlds.",
    )
    parser.add_argument("--backend", choices=("numpy", "jax"), default="numpy")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one run")
    _add_config_arguments(train)
    train.add_argument("--out", required=True, help="run directory")

    evaluate = sub.add_parser("eval", help="evaluate a finished run")
    evaluate.add_argument("run_dir")
    evaluate.add_argument("--episodes", type=int, default=None)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument(
        "--sample", action="store_true", help="sample actor-critic actions"
    )

    sweep_parser = sub.add_parser("sweep", help="run every arm and seed of a preset")
    sweep_parser.add_argument("preset", choices=sorted(PRESETS))
    sweep_parser.add_argument("--out", default="runs")
    sweep_parser.add_argument("--seeds", type=int, default=None)
    sweep_parser.add_argument("--threads", type=int, default=None)
    sweep_parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE"
    )

    report_parser = sub.add_parser("report", help="aggregate runs across seeds")
    report_parser.add_argument("root")
    report_parser.add_argument("--out", default=None)

    probe = sub.add_parser("dump-probe", help="inspect a run's classifier")
    probe.add_argument("run_dir")
    probe.add_argument(
        "--csv", default=None, help="per-sample probabilities (default: probe.csv)"
    )

    render = sub.add_parser("envs-render", help="print a task as ASCII")
    render.add_argument("env", choices=sorted(envs.KINDS))
    render.add_argument("--steps", type=int, default=0)
    render.add_argument("--seed", type=int, default=0)
    return parser


def _add_config_arguments(parser):
    parser.add_argument("--config", default=None, help="INI file")
    parser.add_argument("--env", default=None)
    parser.add_argument("--learner", default=None)
    parser.add_argument("--mode", default=None, help="eoi, diayn or none")
    parser.add_argument("--alpha", default=None)
    parser.add_argument("--beta1", default=None)
    parser.add_argument("--beta2", default=None)
    parser.add_argument("--batch-size", dest="batch_size", default=None)
    parser.add_argument("--episodes", default=None)
    parser.add_argument("--seed", default=None)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")


def config_from_args(args) -> trainer.TrainConfig:
    """Merge the config file, the dedicated flags and ``--set`` overrides."""
    text = ""
    if args.config is not None:
        try:
            with open(args.config) as file:
                text = file.read()
        except OSError as err:
            raise ConfigError(f"config: cannot read {args.config} ({err})") from err
    overrides = [
        f"{key}={getattr(args, flag)}"
        for flag, key in _FLAG_KEYS
        if getattr(args, flag) is not None
    ]
    return parse_config(text, overrides=[*overrides, *args.set])


def _load_run_config(run_dir):
    path = os.path.join(run_dir, CONFIG)
    try:
        with open(path) as file:
            return parse_config(file.read())
    except OSError as err:
        raise ConfigError(f"run_dir: cannot read {path} ({err})") from err


# Subcommands


def cmd_train(args) -> int:
    """Train one run into ``--out``."""
    cfg = config_from_args(args)
    result = run(cfg, args.out)
    final = result.rows[-1]
    print(
        f"episode {final.episode}: env reward {final.env_reward_mean:.3f} "
        f"+- {final.env_reward_std:.3f}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate the checkpoints of a finished run."""
    cfg = _load_run_config(args.run_dir)
    task, learner, net = trainer.load_run(
        cfg, os.path.join(args.run_dir, "checkpoints")
    )
    result = trainer.evaluate(
        task,
        learner,
        episodes=args.episodes or cfg.eval_episodes,
        rng=np.random.default_rng(args.seed),
        net=net if cfg.intrinsic_mode != "none" else None,
        mode=cfg.intrinsic_mode if cfg.intrinsic_mode != "none" else "eoi",
        delta_t=cfg.delta_t,
        greedy=not args.sample,
    )
    print(
        f"env reward {result.env_reward_mean:.3f} +- {result.env_reward_std:.3f}, "
        f"intrinsic reward {result.intrinsic_reward_mean:.3f}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Run a preset."""
    workers = args.threads if args.threads is not None else worker_count()
    directories = sweep(
        args.preset,
        args.out,
        overrides=args.set,
        seeds=args.seeds,
        workers=workers,
        progress=not args.quiet,
    )
    print(f"{len(directories)} runs under {os.path.join(args.out, args.preset)}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Aggregate runs and print the summary."""
    result = report(args.root)
    write_report(result, args.out or args.root)
    if not result.summary.empty:
        print(result.summary.to_string(index=False))
    if result.warnings:
        print("warnings:")
        for warning in result.warnings:
            print(f"  {warning}")
    return EXIT_OK


def cmd_dump_probe(args) -> int:
    """Print how well the classifier tells agents apart on stored samples."""
    cfg = _load_run_config(args.run_dir)
    checkpoints = os.path.join(args.run_dir, "checkpoints")
    _, learner, net = trainer.load_run(cfg, checkpoints)
    buffer = ReplayBuffer.from_tensors(
        nnkit.load_checkpoint(os.path.join(checkpoints, "replay.eoi"))
    )
    samples = buffer.all_samples()
    probe = classifier.discriminability_report(net, samples)
    print(f"samples: {len(samples.label)}")
    print(f"mean correct probability: {probe.mean_correct_prob:.4f}")
    print(f"mean prediction entropy: {probe.mean_entropy:.4f}")
    print("confusion (rows: agent, columns: prediction):")
    print(np.array2string(probe.confusion))

    if isinstance(learner, qmix.QmixLearner):
        joint_obs = buffer.get(np.arange(len(buffer))).obs
        distribution = qmix.action_distribution(learner, joint_obs)
        print("greedy action distribution (rows: agent):")
        print(np.array2string(distribution, precision=3))

    path = args.csv or os.path.join(args.run_dir, PROBE_CSV)
    probs = np.asarray(classifier.predict(net, samples.anchor_obs))
    table = np.column_stack([samples.label, samples.anchor_obs, probs])
    obs_names = [f"o{k}" for k in range(samples.anchor_obs.shape[1])]
    prob_names = [f"p{i}" for i in range(net.n_agents)]
    header = ",".join(["label", *obs_names, *prob_names])
    np.savetxt(path, table, delimiter=",", header=header, comments="")
    print(f"probabilities written to {path}")
    return EXIT_OK


def cmd_envs_render(args) -> int:
    """Print a task after some random steps."""
    task = envs.make(args.env)
    rng = np.random.default_rng(args.seed)
    state, _ = envs.reset(task, seed=rng)
    for _ in range(min(args.steps, task.horizon)):
        actions = rng.integers(task.n_actions, size=task.n_agents)
        state, _, _, _ = envs.step(task, state, actions, rng=rng)
    print(envs.render(task, state))
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "dump-probe": cmd_dump_probe,
    "envs-render": cmd_envs_render,
}


def _select_backend(name):
    if not backend.has_been_selected:
        backend.select(name)
    elif backend.name != name:
        backend.change_to(name)


def main(argv=None) -> int:
    """Run the command line; returns the exit code."""
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s"
    )
    _select_backend(args.backend)

    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"eoilab: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except StructuralError as err:
        print(f"eoilab: {err}", file=sys.stderr)
        return EXIT_STRUCTURAL
    except OSError as err:
        print(f"eoilab: {err}", file=sys.stderr)
        return EXIT_STRUCTURAL
