"""The training loop.

Episodes are rolled out with the current policies and stored with their
environmental reward only. After a warm-up, every environment step buys
one iteration of

1. a classifier step on a label-balanced batch,
2. a learner batch whose intrinsic rewards are recomputed with the
   current classifier,
3. a learner update (QMIX: intrinsic value functions, then the combined
   agent step; actor-critic: critics, then policies).

Evaluation runs greedy episodes at a fixed interval and appends one
:class:`MetricsRow` per evaluation point.
"""

import csv
import logging
import math
import os
import time
from typing import Any, Callable, NamedTuple, Optional, Tuple

import numpy as np

from eoilab import actor_critic, classifier, envs, nnkit, qmix
from eoilab.errors import ConfigError, StructuralError
from eoilab.replay import ReplayBuffer, Transition

logger = logging.getLogger(__name__)

LEARNER_KINDS = ("qmix", "actor_critic")
INTRINSIC_MODES = (*classifier.INTRINSIC_MODES, "none")
ALPHA_SCHEDULES = ("constant", "linear_to_zero")
METRICS_HEADER = (
    "episode",
    "env_reward_mean",
    "env_reward_std",
    "intrinsic_reward_mean",
    "classifier_accuracy",
    "classifier_entropy",
    "alpha",
    "seconds",
)


class TrainConfig(NamedTuple):
    """Everything a training run depends on.

    Learner- and task-dependent defaults (horizon, alpha, episode budget)
    are resolved by :func:`eoilab.cli.parse_config`; the values here
    are those of Pac-Men with QMIX.
    """

    env_kind: str = "pacmen"
    learner_kind: str = "qmix"
    alpha: float = 0.05
    beta1: float = 0.04
    beta2: float = 0.1
    delta_t: int = 4
    gamma: float = 0.98
    horizon: int = 30
    batch_size: int = 128
    buffer_size: int = 20000
    episodes: int = 20000
    eval_interval: int = 100
    eval_episodes: int = 20
    seed: int = 0
    shared_init: bool = False
    include_position: bool = True
    intrinsic_mode: str = "eoi"
    alpha_schedule: str = "constant"
    classifier_lr: float = 1e-3
    actor_lr: float = 1e-3
    critic_lr: float = 1e-4
    qmix_lr: float = 1e-4
    ivf_lr: float = 1e-4
    hidden: Tuple[int, ...] = nnkit.HIDDEN
    embed: int = qmix.EMBED
    entropy_coef: float = 0.01
    target_interval: int = 200
    warmup: int = 0  # 0 means ten batches
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05


class MetricsRow(NamedTuple):
    """One evaluation point.

    ``intrinsic_reward_mean`` is the intrinsic reward in the run's own mode;
    it and the classifier columns are NaN without a classifier.
    """

    episode: int
    env_reward_mean: float
    env_reward_std: float
    intrinsic_reward_mean: float
    classifier_accuracy: float
    classifier_entropy: float
    alpha: float
    seconds: float


class EpisodeLog(NamedTuple):
    """What one episode produced.

    ``samples`` holds the classifier samples of every step, agent by agent;
    ``positions`` the joint pre-action positions of every step.
    """

    transitions: Tuple[Transition, ...]
    samples: Tuple[classifier.ClassifierSample, ...]
    positions: Tuple[Tuple[Tuple[int, int], ...], ...]
    env_return: float


class EvalResult(NamedTuple):
    """Greedy evaluation over several episodes."""

    env_reward_mean: float
    env_reward_std: float
    intrinsic_reward_mean: float
    returns: Tuple[float, ...]
    position_logs: Tuple[Any, ...]
    samples: Tuple[classifier.ClassifierSample, ...]


class TrainResult(NamedTuple):
    """Metrics and final components of a training run."""

    rows: Tuple[MetricsRow, ...]
    learner: Any
    classifier: classifier.ClassifierNet
    buffer: ReplayBuffer


class Streams(NamedTuple):
    """Independent random streams of one run.

    Keeping them apart means that switching the classifier on or off
    changes no environment, exploration or replay draw.
    """

    env: np.random.Generator
    explore: np.random.Generator
    replay: np.random.Generator
    classifier: np.random.Generator
    positive: np.random.Generator
    update: np.random.Generator
    evaluation: np.random.Generator


def make_streams(seed, /) -> Streams:
    """Spawn the random streams of a run from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(Streams._fields))
    return Streams(*(np.random.default_rng(c) for c in children))


# Configuration


def validate_config(cfg: TrainConfig, /) -> TrainConfig:
    """Check a configuration before anything is built."""
    if cfg.env_kind not in envs.KINDS:
        raise ConfigError(f"env_kind: unknown task {cfg.env_kind!r}")
    if cfg.learner_kind not in LEARNER_KINDS:
        raise ConfigError(f"learner_kind: unknown learner {cfg.learner_kind!r}")
    if cfg.intrinsic_mode not in INTRINSIC_MODES:
        raise ConfigError(f"intrinsic_mode: unknown mode {cfg.intrinsic_mode!r}")
    if cfg.alpha_schedule not in ALPHA_SCHEDULES:
        raise ConfigError(f"alpha_schedule: unknown schedule {cfg.alpha_schedule!r}")
    for key in (
        "alpha",
        "beta1",
        "beta2",
        "gamma",
        "classifier_lr",
        "actor_lr",
        "critic_lr",
        "qmix_lr",
        "ivf_lr",
        "entropy_coef",
        "warmup",
    ):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be non-negative, got {getattr(cfg, key)}")
    for key in (
        "delta_t",
        "horizon",
        "batch_size",
        "buffer_size",
        "episodes",
        "eval_interval",
        "eval_episodes",
        "embed",
        "target_interval",
    ):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key}: must be at least 1, got {getattr(cfg, key)}")
    if not 0.0 <= cfg.epsilon_end <= cfg.epsilon_start <= 1.0:
        raise ConfigError("epsilon_start, epsilon_end: need 0 <= end <= start <= 1")

    n_agents = make_task(cfg).n_agents
    if cfg.batch_size % n_agents:
        raise ConfigError(
            f"batch_size: {cfg.batch_size} is not divisible by {n_agents} agents, "
            "so classifier batches cannot be balanced"
        )
    if warmup_size(cfg) > cfg.buffer_size:
        raise ConfigError("warmup: exceeds buffer_size")
    return cfg


def make_task(cfg: TrainConfig, /) -> envs.GridTask:
    """The task a configuration trains on."""
    return envs.make(
        cfg.env_kind, horizon=cfg.horizon, include_position=cfg.include_position
    )


def make_learner(cfg: TrainConfig, task: envs.GridTask, /):
    """A freshly initialised learner for a task."""
    if cfg.learner_kind == "qmix":
        return qmix.init_qmix(
            task.n_agents,
            task.obs_dim,
            task.n_actions,
            seed=cfg.seed,
            shared_init=cfg.shared_init,
            hidden=cfg.hidden,
            embed=cfg.embed,
            learning_rate=cfg.qmix_lr,
            ivf_learning_rate=cfg.ivf_lr,
            gamma=cfg.gamma,
            target_interval=cfg.target_interval,
        )
    return actor_critic.init_actor_critic(
        task.n_agents,
        task.obs_dim,
        task.n_actions,
        seed=cfg.seed,
        shared_init=cfg.shared_init,
        hidden=cfg.hidden,
        actor_learning_rate=cfg.actor_lr,
        critic_learning_rate=cfg.critic_lr,
        gamma=cfg.gamma,
        entropy_coef=cfg.entropy_coef,
        target_interval=cfg.target_interval,
    )


def make_classifier(cfg: TrainConfig, task: envs.GridTask, /):
    """A freshly initialised classifier for a task."""
    (seed,) = nnkit.split_seed(cfg.seed + 1, 1)
    return classifier.init_classifier(
        task.obs_dim,
        task.n_agents,
        hidden=cfg.hidden,
        learning_rate=cfg.classifier_lr,
        seed=seed,
    )


def warmup_size(cfg: TrainConfig, /) -> int:
    """Number of stored transitions before updates begin."""
    return cfg.warmup or 10 * cfg.batch_size


# Schedules


def alpha_at(episode, cfg: TrainConfig, /) -> float:
    """Intrinsic weight at a training episode."""
    if cfg.intrinsic_mode == "none":
        return 0.0
    if cfg.alpha_schedule == "constant":
        return cfg.alpha
    return cfg.alpha * max(0.0, 1.0 - episode / cfg.episodes)


def epsilon_at(episode, cfg: TrainConfig, /) -> float:
    """Exploration rate: linear decay over the first half of training."""
    fraction = min(1.0, episode / max(1.0, 0.5 * cfg.episodes))
    return cfg.epsilon_start + fraction * (cfg.epsilon_end - cfg.epsilon_start)


# Acting


def select_actions(learner, joint_obs, /, *, epsilon, rng, greedy=False):
    """Joint action of either learner kind."""
    if isinstance(learner, qmix.QmixLearner):
        if greedy:
            return qmix.greedy_actions(learner, joint_obs)
        return qmix.act(learner, joint_obs, epsilon=epsilon, rng=rng)
    if isinstance(learner, actor_critic.ActorCriticLearner):
        return actor_critic.act(learner, joint_obs, rng=rng, greedy=greedy)
    raise StructuralError("trainer.select_actions", f"unknown learner {type(learner)}")


def run_episode(
    task: envs.GridTask,
    learner,
    /,
    *,
    delta_t=4,
    epsilon=0.0,
    greedy=False,
    env_rng,
    explore_rng,
    positive_rng,
) -> EpisodeLog:
    """Roll out one episode of exactly ``task.horizon`` steps.

    Every agent's observation gets a positive from its own recent history.
    Nothing is learned.
    """
    state, joint_obs = envs.reset(task, seed=env_rng)
    histories = [[] for _ in range(task.n_agents)]
    transitions, samples, positions = [], [], []
    env_return = 0.0
    for t in range(task.horizon):
        positions.append(state.positions)
        positive_obs, positive_valid = [], []
        for i, obs in enumerate(joint_obs):
            histories[i].append(obs)
            positive, valid = classifier.sample_positive(
                histories[i], t, window=delta_t, rng=positive_rng
            )
            positive_obs.append(positive)
            positive_valid.append(valid)
            samples.append(classifier.ClassifierSample(obs, i, positive, valid))

        actions = select_actions(
            learner, joint_obs, epsilon=epsilon, rng=explore_rng, greedy=greedy
        )
        state, next_obs, reward, done = envs.step(task, state, actions, rng=env_rng)
        transitions.append(
            Transition(
                obs=joint_obs,
                actions=np.asarray(actions, dtype=np.int64),
                reward=float(reward),
                next_obs=next_obs,
                done=bool(done),
                positive_obs=np.stack(positive_obs),
                positive_valid=np.asarray(positive_valid, dtype=bool),
            )
        )
        env_return += reward
        joint_obs = next_obs
    return EpisodeLog(
        transitions=tuple(transitions),
        samples=tuple(samples),
        positions=tuple(positions),
        env_return=float(env_return),
    )


# Learning


def build_classifier_batch(buffer: ReplayBuffer, batch_size, n_agents, /, *, rng):
    """Draw ``batch_size / n_agents`` samples per agent label.

    Returns ``None`` while the buffer is too small.
    """
    if batch_size % n_agents:
        raise StructuralError(
            "trainer.build_classifier_batch",
            f"batch size {batch_size} is not divisible by {n_agents} agents",
        )
    per_agent = batch_size // n_agents
    if len(buffer) < per_agent:
        return None
    parts = [
        buffer.agent_samples(i, rng.choice(len(buffer), size=per_agent, replace=False))
        for i in range(n_agents)
    ]
    return classifier.ClassifierSample(
        *(np.concatenate(field) for field in zip(*parts))
    )


def recompute_intrinsic(batch, net: classifier.ClassifierNet, /, *, mode="eoi"):
    """Fresh intrinsic rewards of shape ``(batch, n_agents)`` for a sampled batch."""
    return classifier.intrinsic_rewards(net, batch.obs, mode=mode)


def train_step(
    cfg: TrainConfig,
    learner,
    net: classifier.ClassifierNet,
    buffer: ReplayBuffer,
    /,
    *,
    alpha,
    streams: Streams,
):
    """One classifier step followed by one learner update."""
    n_agents = buffer.n_agents
    uses_classifier = cfg.intrinsic_mode != "none"
    if uses_classifier:
        samples = build_classifier_batch(
            buffer, cfg.batch_size, n_agents, rng=streams.classifier
        )
        if samples is not None:
            net, _ = classifier.train_batch(
                net, samples, beta1=cfg.beta1, beta2=cfg.beta2
            )

    batch = buffer.sample(cfg.batch_size, rng=streams.replay)
    if isinstance(learner, qmix.QmixLearner):
        intrinsic = None
        if uses_classifier:
            intrinsic = recompute_intrinsic(batch, net, mode=cfg.intrinsic_mode)
        learner, _ = qmix.update(learner, batch, alpha=alpha, intrinsic=intrinsic)
    else:
        intrinsic = None
        if uses_classifier and alpha:
            intrinsic = recompute_intrinsic(batch, net, mode=cfg.intrinsic_mode)
        learner, _ = actor_critic.update(
            learner, batch, alpha=alpha, intrinsic=intrinsic, rng=streams.update
        )
    return learner, net


# Evaluation


def evaluate(
    task: envs.GridTask,
    learner,
    /,
    *,
    episodes,
    rng,
    net: Optional[classifier.ClassifierNet] = None,
    mode="eoi",
    delta_t=4,
    greedy=True,
) -> EvalResult:
    """Evaluation episodes without exploration or learning.

    Agents act greedily unless ``greedy`` is false, in which case
    actor-critic policies sample (QMIX agents still act greedily).

    With a classifier, the mean intrinsic reward over all steps and agents
    is reported in the given ``mode`` (:math:`p(i|o_i)` for ``"eoi"``, the
    log-ratio for ``"diayn"``); otherwise it is NaN.
    """
    if episodes < 1:
        raise ValueError("Evaluation needs at least one episode.")
    returns, position_logs, samples, intrinsic = [], [], [], []
    for _ in range(episodes):
        log = run_episode(
            task,
            learner,
            delta_t=delta_t,
            greedy=greedy,
            env_rng=rng,
            explore_rng=rng,
            positive_rng=rng,
        )
        returns.append(log.env_return)
        position_logs.append(log.positions)
        samples.extend(log.samples)
        if net is not None:
            joint_obs = np.stack([t.obs for t in log.transitions])
            values = classifier.intrinsic_rewards(net, joint_obs, mode=mode)
            intrinsic.append(float(np.mean(np.asarray(values))))
    return EvalResult(
        env_reward_mean=float(np.mean(returns)),
        env_reward_std=float(np.std(returns)),
        intrinsic_reward_mean=float(np.mean(intrinsic)) if intrinsic else math.nan,
        returns=tuple(returns),
        position_logs=tuple(position_logs),
        samples=tuple(samples),
    )


# The loop


def train(
    cfg: TrainConfig,
    /,
    *,
    run_dir=None,
    on_eval: Optional[Callable[[MetricsRow], None]] = None,
) -> TrainResult:
    """Train a learner and its classifier.

    If ``run_dir`` is given, writes ``metrics.csv``, occupancy heatmaps
    under ``heatmaps/`` and the final checkpoints under ``checkpoints/``.
    """
    validate_config(cfg)
    task = make_task(cfg)
    learner = make_learner(cfg, task)
    net = make_classifier(cfg, task)
    buffer = ReplayBuffer(cfg.buffer_size, task.n_agents, task.obs_dim)
    streams = make_streams(cfg.seed)
    warmup = warmup_size(cfg)
    uses_classifier = cfg.intrinsic_mode != "none"

    writer = _RunWriter(run_dir) if run_dir is not None else None
    start = time.perf_counter()
    rows = []

    def record(episode):
        result = evaluate(
            task,
            learner,
            episodes=cfg.eval_episodes,
            rng=streams.evaluation,
            net=net if uses_classifier else None,
            mode=cfg.intrinsic_mode if uses_classifier else "eoi",
            delta_t=cfg.delta_t,
        )
        accuracy, entropy = math.nan, math.nan
        if uses_classifier:
            report = classifier.discriminability_report(net, result.samples)
            accuracy = float(np.trace(report.confusion) / np.sum(report.confusion))
            entropy = report.mean_entropy
        row = MetricsRow(
            episode=episode,
            env_reward_mean=result.env_reward_mean,
            env_reward_std=result.env_reward_std,
            intrinsic_reward_mean=result.intrinsic_reward_mean,
            classifier_accuracy=accuracy,
            classifier_entropy=entropy,
            alpha=alpha_at(episode, cfg),
            seconds=time.perf_counter() - start,
        )
        rows.append(row)
        logger.info(
            "episode %d: env reward %.3f, intrinsic reward %.3f, "
            "classifier accuracy %.3f, alpha %.4f",
            row.episode,
            row.env_reward_mean,
            row.intrinsic_reward_mean,
            row.classifier_accuracy,
            row.alpha,
        )
        if writer is not None:
            writer.write_row(row)
            heatmaps = envs.occupancy_heatmap(task, result.position_logs)
            writer.write_heatmaps(episode, heatmaps)
        if on_eval is not None:
            on_eval(row)

    warmed_up = False
    for episode in range(cfg.episodes):
        if episode % cfg.eval_interval == 0:
            record(episode)

        log = run_episode(
            task,
            learner,
            delta_t=cfg.delta_t,
            epsilon=epsilon_at(episode, cfg),
            env_rng=streams.env,
            explore_rng=streams.explore,
            positive_rng=streams.positive,
        )
        for transition in log.transitions:
            buffer.add(transition)

        if len(buffer) < warmup:
            continue
        if not warmed_up:
            logger.debug("Warm-up done after %d transitions.", len(buffer))
            warmed_up = True
        alpha = alpha_at(episode, cfg)
        for _ in log.transitions:
            learner, net = train_step(
                cfg, learner, net, buffer, alpha=alpha, streams=streams
            )

    record(cfg.episodes)
    if writer is not None:
        writer.write_checkpoints(learner, net, buffer)
    return TrainResult(rows=tuple(rows), learner=learner, classifier=net, buffer=buffer)


def learner_to_tensors(learner, /):
    """Named tensors of either learner kind."""
    if isinstance(learner, qmix.QmixLearner):
        return qmix.to_tensors(learner)
    return actor_critic.to_tensors(learner)


def learner_from_tensors(tensors, like, /):
    """Restore a learner of the same kind and shape as ``like``."""
    if isinstance(like, qmix.QmixLearner):
        return qmix.from_tensors(tensors, like)
    return actor_critic.from_tensors(tensors, like)


def load_run(cfg: TrainConfig, checkpoint_dir, /):
    """Rebuild the learner and classifier saved by :func:`train`."""
    task = make_task(cfg)
    learner = learner_from_tensors(
        nnkit.load_checkpoint(os.path.join(checkpoint_dir, "learner.eoi")),
        make_learner(cfg, task),
    )
    like = make_classifier(cfg, task)
    params = nnkit.tree_from_tensors(
        "classifier",
        nnkit.load_checkpoint(os.path.join(checkpoint_dir, "classifier.eoi")),
        like.net,
    )
    return task, learner, like._replace(net=params)


class _RunWriter:
    """Writes the files of one run directory."""

    def __init__(self, run_dir):
        self.run_dir = run_dir
        os.makedirs(os.path.join(run_dir, "heatmaps"), exist_ok=True)
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        self.metrics_path = os.path.join(run_dir, "metrics.csv")
        with open(self.metrics_path, mode="w", newline="") as file:
            csv.writer(file).writerow(METRICS_HEADER)

    def write_row(self, row: MetricsRow):
        with open(self.metrics_path, mode="a", newline="") as file:
            csv.writer(file).writerow(row)

    def write_heatmaps(self, episode, heatmaps):
        for agent, counts in enumerate(heatmaps):
            path = os.path.join(
                self.run_dir, "heatmaps", f"ep{episode}_agent{agent}.csv"
            )
            np.savetxt(path, counts, fmt="%d", delimiter=",")

    def write_checkpoints(self, learner, net, buffer):
        directory = os.path.join(self.run_dir, "checkpoints")
        nnkit.save_checkpoint(
            os.path.join(directory, "learner.eoi"), learner_to_tensors(learner)
        )
        nnkit.save_checkpoint(
            os.path.join(directory, "classifier.eoi"),
            nnkit.tree_to_tensors("classifier", net.net),
        )
        nnkit.save_checkpoint(
            os.path.join(directory, "replay.eoi"), buffer.to_tensors()
        )
        logger.debug("Checkpoints written to %s.", directory)
