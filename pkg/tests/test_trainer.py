"""Tests for the training loop."""

import csv
import math
import os

import numpy as np
import pytest
import pytest_cases

from eoilab import classifier, envs, nnkit, trainer
from eoilab.errors import ConfigError, StructuralError
from eoilab.replay import ReplayBuffer, Transition

TINY = trainer.TrainConfig(
    env_kind="windy_maze",
    horizon=15,
    batch_size=8,
    buffer_size=200,
    episodes=4,
    eval_interval=2,
    eval_episodes=1,
    hidden=(8,),
    embed=4,
    warmup=16,
    target_interval=5,
)


def case_learner_qmix():
    return "qmix"


def case_learner_actor_critic():
    return "actor_critic"


def _leaves_equal(tree, other):
    return all(
        np.array_equal(np.asarray(a), np.asarray(b))
        for a, b in zip(nnkit.tree_leaves(tree), nnkit.tree_leaves(other))
    )


def _online(learner):
    if hasattr(learner, "agents"):
        return learner.agents.online
    return learner.policy.params


def _filled_buffer(cfg, *, episodes=2, seed=0):
    task = trainer.make_task(cfg)
    learner = trainer.make_learner(cfg, task)
    buffer = ReplayBuffer(cfg.buffer_size, task.n_agents, task.obs_dim)
    rng = np.random.default_rng(seed)
    for _ in range(episodes):
        log = trainer.run_episode(
            task, learner, epsilon=1.0, env_rng=rng, explore_rng=rng, positive_rng=rng
        )
        for transition in log.transitions:
            buffer.add(transition)
    return task, learner, buffer


# Configuration


def test_tiny_config_is_valid():
    assert trainer.validate_config(TINY) is TINY


@pytest.mark.parametrize(
    "changes",
    [
        {"env_kind": "battle"},
        {"learner_kind": "ppo"},
        {"intrinsic_mode": "curiosity"},
        {"alpha_schedule": "cosine"},
        {"alpha": -0.1},
        {"batch_size": 0},
        {"epsilon_end": 0.5, "epsilon_start": 0.1},
        {"warmup": 500},
        {"env_kind": "pacmen", "horizon": 30, "batch_size": 102},
    ],
)
def test_invalid_configs_are_rejected(changes):
    with pytest.raises(ConfigError):
        trainer.validate_config(TINY._replace(**changes))


def test_default_warmup_is_ten_batches():
    assert trainer.warmup_size(TINY._replace(warmup=0)) == 80
    assert trainer.warmup_size(TINY) == 16


def test_constant_alpha():
    assert trainer.alpha_at(0, TINY) == TINY.alpha
    assert trainer.alpha_at(3, TINY) == TINY.alpha


def test_linearly_decaying_alpha():
    cfg = TINY._replace(alpha=0.2, alpha_schedule="linear_to_zero", episodes=10)
    assert trainer.alpha_at(0, cfg) == pytest.approx(0.2)
    assert trainer.alpha_at(5, cfg) == pytest.approx(0.1)
    assert trainer.alpha_at(10, cfg) == 0.0


def test_no_intrinsic_mode_means_no_intrinsic_weight():
    assert trainer.alpha_at(0, TINY._replace(intrinsic_mode="none")) == 0.0


def test_exploration_decays_over_the_first_half():
    cfg = TINY._replace(episodes=10)
    assert trainer.epsilon_at(0, cfg) == 1.0
    assert trainer.epsilon_at(5, cfg) == pytest.approx(cfg.epsilon_end)
    assert trainer.epsilon_at(9, cfg) == pytest.approx(cfg.epsilon_end)


def test_streams_are_reproducible_and_distinct():
    first, second = trainer.make_streams(3), trainer.make_streams(3)
    assert first.env.random() == second.env.random()
    a, b = trainer.make_streams(3)[:2]
    assert a.random() != b.random()


# Episodes


@pytest_cases.parametrize_with_cases(argnames="learner_kind", cases=".")
def test_episodes_have_a_fixed_length(learner_kind):
    cfg = TINY._replace(learner_kind=learner_kind)
    task = trainer.make_task(cfg)
    rng = np.random.default_rng(0)
    log = trainer.run_episode(
        task,
        trainer.make_learner(cfg, task),
        epsilon=0.5,
        env_rng=rng,
        explore_rng=rng,
        positive_rng=rng,
    )
    assert len(log.transitions) == task.horizon
    assert len(log.positions) == task.horizon
    assert len(log.samples) == task.horizon * task.n_agents
    assert [t.done for t in log.transitions] == [False] * 14 + [True]
    assert not np.any(log.transitions[0].positive_valid)
    assert np.all(log.transitions[1].positive_valid)
    assert log.env_return == sum(t.reward for t in log.transitions)


def test_unknown_learners_cannot_act():
    with pytest.raises(StructuralError):
        trainer.select_actions(object(), np.zeros((2, 3)), epsilon=0.0, rng=None)


# Learning


def test_classifier_batches_are_balanced():
    _, _, buffer = _filled_buffer(TINY)
    batch = trainer.build_classifier_batch(
        buffer, 8, buffer.n_agents, rng=np.random.default_rng(0)
    )
    np.testing.assert_array_equal(np.bincount(batch.label), [4, 4])


def test_classifier_batches_wait_for_enough_samples():
    buffer = ReplayBuffer(10, 2, 3)
    assert (
        trainer.build_classifier_batch(buffer, 8, 2, rng=np.random.default_rng(0))
        is None
    )
    with pytest.raises(StructuralError):
        trainer.build_classifier_batch(buffer, 9, 2, rng=np.random.default_rng(0))


def test_intrinsic_rewards_follow_the_current_classifier():
    task, _, buffer = _filled_buffer(TINY)
    batch = buffer.sample(8, rng=np.random.default_rng(1))
    stored_reward = batch.reward.copy()
    net = trainer.make_classifier(TINY, task)

    before = np.asarray(trainer.recompute_intrinsic(batch, net))
    assert before.shape == (8, task.n_agents)
    np.testing.assert_allclose(before, classifier.intrinsic_rewards(net, batch.obs))

    samples = trainer.build_classifier_batch(
        buffer, 8, task.n_agents, rng=np.random.default_rng(2)
    )
    for _ in range(5):
        net, _ = classifier.train_batch(net, samples, beta1=0.04, beta2=0.1)
    after = np.asarray(trainer.recompute_intrinsic(batch, net))
    assert not np.allclose(before, after)
    np.testing.assert_array_equal(batch.reward, stored_reward)


@pytest_cases.parametrize_with_cases(argnames="learner_kind", cases=".")
def test_train_step_updates_the_learner(learner_kind):
    cfg = TINY._replace(learner_kind=learner_kind)
    _, learner, buffer = _filled_buffer(cfg)
    net = trainer.make_classifier(cfg, trainer.make_task(cfg))
    updated, updated_net = trainer.train_step(
        cfg, learner, net, buffer, alpha=0.2, streams=trainer.make_streams(0)
    )
    assert updated.update_count == 1
    assert updated_net.opt.step_count == 1
    assert not _leaves_equal(_online(updated), _online(learner))


# Evaluation


def test_evaluation_of_one_episode():
    task = trainer.make_task(TINY)
    learner = trainer.make_learner(TINY, task)
    result = trainer.evaluate(task, learner, episodes=1, rng=np.random.default_rng(0))
    assert len(result.returns) == 1
    assert result.env_reward_std == 0.0
    assert math.isnan(result.intrinsic_reward_mean)
    assert len(result.position_logs[0]) == task.horizon

    net = trainer.make_classifier(TINY, task)
    result = trainer.evaluate(
        task, learner, episodes=1, rng=np.random.default_rng(0), net=net
    )
    assert 0.0 <= result.intrinsic_reward_mean <= 1.0
    with pytest.raises(ValueError):
        trainer.evaluate(task, learner, episodes=0, rng=np.random.default_rng(0))


@pytest_cases.parametrize_with_cases(argnames="learner_kind", cases=".")
def test_evaluation_leaves_the_learner_untouched(learner_kind):
    cfg = TINY._replace(learner_kind=learner_kind)
    task = trainer.make_task(cfg)
    learner = trainer.make_learner(cfg, task)
    net = trainer.make_classifier(cfg, task)
    before = [np.array(leaf, copy=True) for leaf in nnkit.tree_leaves(_online(learner))]
    classifier_before = [
        np.array(leaf, copy=True) for leaf in nnkit.tree_leaves(net.net)
    ]

    trainer.evaluate(task, learner, episodes=2, rng=np.random.default_rng(0), net=net)
    for a, b in zip(before, nnkit.tree_leaves(_online(learner))):
        np.testing.assert_array_equal(a, np.asarray(b))
    for a, b in zip(classifier_before, nnkit.tree_leaves(net.net)):
        np.testing.assert_array_equal(a, np.asarray(b))
    assert learner.update_count == 0


def test_evaluation_reports_the_intrinsic_reward_of_the_mode():
    task = trainer.make_task(TINY)
    learner = trainer.make_learner(TINY, task)
    net = trainer.make_classifier(TINY, task)
    results = {
        mode: trainer.evaluate(
            task,
            learner,
            episodes=1,
            rng=np.random.default_rng(0),
            net=net,
            mode=mode,
        )
        for mode in ("eoi", "diayn")
    }

    samples = classifier.stack_samples(results["eoi"].samples)
    probs = np.asarray(classifier.predict(net, samples.anchor_obs))
    own = probs[np.arange(len(samples.label)), samples.label]
    assert results["eoi"].intrinsic_reward_mean == pytest.approx(np.mean(own))
    diayn = classifier.reward_from_probability(
        own, mode="diayn", n_agents=task.n_agents
    )
    assert results["diayn"].intrinsic_reward_mean == pytest.approx(
        float(np.mean(np.asarray(diayn)))
    )


# The loop


@pytest_cases.parametrize_with_cases(argnames="learner_kind", cases=".")
def test_zero_intrinsic_weight_matches_training_without_classifier(learner_kind):
    cfg = TINY._replace(learner_kind=learner_kind, alpha=0.0)
    with_classifier = trainer.train(cfg)
    without = trainer.train(cfg._replace(intrinsic_mode="none"))

    assert [r.env_reward_mean for r in with_classifier.rows] == [
        r.env_reward_mean for r in without.rows
    ]
    assert _leaves_equal(_online(with_classifier.learner), _online(without.learner))
    assert all(math.isnan(r.classifier_accuracy) for r in without.rows)
    assert not any(math.isnan(r.classifier_accuracy) for r in with_classifier.rows)


def test_training_is_deterministic():
    first = trainer.train(TINY)
    second = trainer.train(TINY)
    assert [r._replace(seconds=0.0) for r in first.rows] == [
        r._replace(seconds=0.0) for r in second.rows
    ]
    assert _leaves_equal(_online(first.learner), _online(second.learner))
    assert _leaves_equal(first.classifier.net, second.classifier.net)


def test_training_evaluates_on_schedule():
    seen = []
    result = trainer.train(TINY, on_eval=seen.append)
    assert [r.episode for r in result.rows] == [0, 2, 4]
    assert seen == list(result.rows)
    assert len(result.buffer) == TINY.episodes * TINY.horizon


def test_stored_rewards_are_environmental_only():
    result = trainer.train(TINY)
    stored = result.buffer.get(np.arange(len(result.buffer)))
    rewards = np.asarray(stored.reward).reshape(TINY.episodes, TINY.horizon)
    done = np.asarray(stored.done).reshape(TINY.episodes, TINY.horizon)

    assert np.all(done[:, -1]) and not np.any(done[:, :-1])
    np.testing.assert_array_equal(rewards[:, :-1], 0.0)
    # The final reward is the number of eaten dots, never a shaped value.
    final = rewards[:, -1]
    np.testing.assert_array_equal(final, np.round(final))
    assert np.all((final >= 0) & (final <= 2))


def test_run_directory_contents(tmp_path):
    result = trainer.train(TINY, run_dir=str(tmp_path))

    with open(tmp_path / "metrics.csv", newline="") as file:
        rows = list(csv.reader(file))
    assert tuple(rows[0]) == trainer.METRICS_HEADER
    assert len(rows) == 1 + len(result.rows)

    heatmap = np.loadtxt(tmp_path / "heatmaps" / "ep2_agent1.csv", delimiter=",")
    task = envs.windy_maze()
    assert heatmap.shape == (task.grid.height, task.grid.width)
    assert heatmap.sum() == TINY.eval_episodes * task.horizon

    for name in ("learner.eoi", "classifier.eoi", "replay.eoi"):
        assert os.path.getsize(tmp_path / "checkpoints" / name) > 0

    _, learner, net = trainer.load_run(TINY, str(tmp_path / "checkpoints"))
    for a, b in zip(
        nnkit.tree_leaves(_online(learner)), nnkit.tree_leaves(_online(result.learner))
    ):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-6, atol=1e-7)
    for a, b in zip(
        nnkit.tree_leaves(net.net), nnkit.tree_leaves(result.classifier.net)
    ):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-6, atol=1e-7)


def test_checkpoints_keep_the_whole_buffer(tmp_path):
    task = trainer.make_task(TINY)
    learner = trainer.make_learner(TINY, task)
    net = trainer.make_classifier(TINY, task)
    buffer = ReplayBuffer(3000, task.n_agents, task.obs_dim)
    rng = np.random.default_rng(0)
    for k in range(2500):
        obs = rng.normal(size=(task.n_agents, task.obs_dim))
        buffer.add(
            Transition(
                obs=obs,
                actions=np.zeros(task.n_agents, dtype=np.int64),
                reward=float(k),
                next_obs=obs,
                done=False,
                positive_obs=obs,
                positive_valid=np.ones(task.n_agents, dtype=bool),
            )
        )

    trainer._RunWriter(str(tmp_path)).write_checkpoints(learner, net, buffer)
    restored = ReplayBuffer.from_tensors(
        nnkit.load_checkpoint(str(tmp_path / "checkpoints" / "replay.eoi"))
    )
    assert len(restored) == 2500
    np.testing.assert_array_equal(restored.get(np.arange(2500)).reward, np.arange(2500))
