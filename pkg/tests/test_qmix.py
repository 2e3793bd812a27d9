"""Tests for the value-factorisation learner."""

import numpy as np
import pytest

from eoilab import backend, nnkit, qmix, replay
from eoilab.errors import StructuralError
from tests import _gradcheck

N_AGENTS, OBS_DIM, N_ACTIONS = 2, 3, 3


def _learner(**kwargs):
    kwargs = {"seed": 0, "hidden": (4,), "embed": 3, **kwargs}
    return qmix.init_qmix(N_AGENTS, OBS_DIM, N_ACTIONS, **kwargs)


def _batch(rng, *, size=6, done=False):
    shape = (size, N_AGENTS, OBS_DIM)
    return replay.TransitionBatch(
        obs=rng.normal(size=shape),
        actions=rng.integers(N_ACTIONS, size=(size, N_AGENTS)),
        reward=rng.normal(size=size),
        next_obs=rng.normal(size=shape),
        done=np.full(size, done),
        positive_obs=rng.normal(size=shape),
        positive_valid=np.ones((size, N_AGENTS), dtype=bool),
    )


def _leaves_equal(tree, other):
    return all(
        np.array_equal(np.asarray(a), np.asarray(b))
        for a, b in zip(nnkit.tree_leaves(tree), nnkit.tree_leaves(other))
    )


# Mixing


def _summing_mixer(n_agents, obs_dim):
    state_dim = n_agents * obs_dim
    np_ = backend.numpy
    ones_bias = nnkit.zeros_mlp(state_dim, n_agents, hidden=())
    return qmix.MixerParams(
        hyper_w1=ones_bias._replace(biases=(np_.ones(n_agents),)),
        hyper_b1=nnkit.zeros_mlp(state_dim, 1, hidden=()),
        hyper_w2=nnkit.zeros_mlp(state_dim, 1, hidden=())._replace(
            biases=(np_.ones(1),)
        ),
        hyper_b2=nnkit.zeros_mlp(state_dim, 1, hidden=(1,)),
    )


def test_unit_weights_sum_positive_values():
    mixer = _summing_mixer(N_AGENTS, OBS_DIM)
    state = np.random.default_rng(0).normal(size=N_AGENTS * OBS_DIM)
    assert float(qmix.mix(mixer, [1.0, 2.0], state)) == pytest.approx(3.0)
    q_tot = qmix.mix(mixer, [[0.5, 0.25], [3.0, 4.0]], np.stack([state, state]))
    np.testing.assert_allclose(np.asarray(q_tot), [0.75, 7.0])


def test_mixing_is_monotone_in_every_agent():
    mixer = _learner().mixer.online
    rng = np.random.default_rng(1)
    chosen_q = rng.normal(size=(1000, N_AGENTS))
    states = rng.normal(size=(1000, N_AGENTS * OBS_DIM))

    q_tot, tape = qmix.mix_forward(mixer, chosen_q, states)
    _, chosen_grads = qmix.mix_backward(mixer, tape, np.ones(1000))
    assert np.all(np.asarray(chosen_grads) >= 0.0)

    for i in range(N_AGENTS):
        raised = chosen_q.copy()
        raised[:, i] += 0.1
        assert np.all(np.asarray(qmix.mix(mixer, raised, states)) >= np.asarray(q_tot))


def test_mixer_rejects_a_different_agent_count():
    mixer = _learner().mixer.online
    with pytest.raises(StructuralError, match="qmix.mix"):
        qmix.mix(mixer, np.zeros((2, 3)), np.zeros((2, N_AGENTS * OBS_DIM)))


def test_global_state_concatenates_observations():
    joint_obs = np.arange(12.0).reshape(2, N_AGENTS, OBS_DIM)
    np.testing.assert_array_equal(
        np.asarray(qmix.global_state(joint_obs)), joint_obs.reshape(2, -1)
    )


# Losses


def test_td_gradients_match_finite_differences():
    online = _learner(seed=0)
    targets = _learner(seed=1)
    batch = _batch(np.random.default_rng(2))

    def loss(tree):
        agent_params, mixer_params = tree
        value, _, _ = qmix.td_loss_and_grads(
            agent_params,
            mixer_params,
            targets.agents.online,
            targets.mixer.online,
            batch,
            gamma=0.9,
        )
        return value

    tree = (online.agents.online, online.mixer.online)
    _, agent_grads, mixer_grads = qmix.td_loss_and_grads(
        *tree, targets.agents.online, targets.mixer.online, batch, gamma=0.9
    )
    _gradcheck.assert_gradients_match(
        (agent_grads, mixer_grads), _gradcheck.numerical_gradient(loss, tree)
    )


def test_terminal_transitions_regress_onto_the_reward():
    learner = _learner()
    batch = _batch(np.random.default_rng(3), done=True)
    agents, mixer = learner.agents, learner.mixer
    args = (agents.online, mixer.online, agents.target, mixer.target, batch)

    discounted, _, _ = qmix.td_loss_and_grads(*args, gamma=0.98)
    myopic, _, _ = qmix.td_loss_and_grads(*args, gamma=0.0)
    assert discounted == pytest.approx(myopic)

    chosen = np.stack(
        [
            np.asarray(qmix.individual_q(agents, i, batch.obs[:, i]))[
                np.arange(len(batch)), batch.actions[:, i]
            ]
            for i in range(N_AGENTS)
        ],
        axis=1,
    )
    q_tot = np.asarray(qmix.mix(mixer.online, chosen, qmix.global_state(batch.obs)))
    assert myopic == pytest.approx(np.mean((q_tot - batch.reward) ** 2))


def test_ivf_gradients_match_finite_differences():
    online = _learner(seed=0)
    targets = _learner(seed=1)
    rng = np.random.default_rng(4)
    batch = _batch(rng)
    intrinsic = rng.uniform(size=(len(batch), N_AGENTS))

    def loss(ivf_params):
        losses, _ = qmix.ivf_loss_and_grads(
            ivf_params,
            online.agents.online,
            targets.ivf.online,
            targets.agents.online,
            batch,
            intrinsic,
            gamma=0.9,
        )
        return sum(losses)

    _, grads = qmix.ivf_loss_and_grads(
        online.ivf.online,
        online.agents.online,
        targets.ivf.online,
        targets.agents.online,
        batch,
        intrinsic,
        gamma=0.9,
    )
    _gradcheck.assert_gradients_match(
        grads, _gradcheck.numerical_gradient(loss, online.ivf.online)
    )


def test_intrinsic_value_gradients_match_finite_differences():
    learner = _learner(seed=5)
    obs = np.random.default_rng(6).normal(size=(5, N_AGENTS, OBS_DIM))

    def value(agent_params):
        ivf = learner.ivf.online
        values, _ = qmix.intrinsic_value_and_grads(agent_params, ivf, obs)
        return sum(values)

    _, grads = qmix.intrinsic_value_and_grads(
        learner.agents.online, learner.ivf.online, obs
    )
    _gradcheck.assert_gradients_match(
        grads, _gradcheck.numerical_gradient(value, learner.agents.online)
    )


def test_untrained_ivf_loss_of_a_uniform_classifier():
    ivf_params = tuple(
        nnkit.zeros_mlp(OBS_DIM + N_ACTIONS, 1, hidden=(4,)) for _ in range(N_AGENTS)
    )
    agent_params = _learner().agents.online
    batch = _batch(np.random.default_rng(7))
    intrinsic = np.full((len(batch), N_AGENTS), 0.25)
    losses, _ = qmix.ivf_loss_and_grads(
        ivf_params, agent_params, ivf_params, agent_params, batch, intrinsic, gamma=0.0
    )
    np.testing.assert_allclose(losses, 0.0625)


def test_ivf_rejects_misshapen_intrinsic_rewards():
    learner = _learner()
    batch = _batch(np.random.default_rng(8))
    with pytest.raises(StructuralError, match="qmix.ivf_update"):
        qmix.ivf_update(learner, batch, np.zeros((len(batch), N_AGENTS + 1)))


def test_ivf_converges_to_the_discounted_reward():
    # Zero observations and a zero agent network leave only the output bias.
    agent_params = (nnkit.zeros_mlp(OBS_DIM, N_ACTIONS, hidden=()),)
    ivf = (nnkit.zeros_mlp(OBS_DIM + N_ACTIONS, 1, hidden=()),)
    zeros = np.zeros((4, 1, OBS_DIM))
    batch = replay.TransitionBatch(
        obs=zeros,
        actions=np.zeros((4, 1), dtype=np.int64),
        reward=np.zeros(4),
        next_obs=zeros,
        done=np.zeros(4, dtype=bool),
        positive_obs=zeros,
        positive_valid=np.zeros((4, 1), dtype=bool),
    )
    intrinsic = np.full((4, 1), 0.25)

    target = ivf
    for _ in range(300):
        for _ in range(10):
            _, grads = qmix.ivf_loss_and_grads(
                ivf, agent_params, target, agent_params, batch, intrinsic, gamma=0.98
            )
            ivf = tuple(
                nnkit.tree_add(p, nnkit.tree_scale(g, -0.25))
                for p, g in zip(ivf, grads)
            )
        target = ivf

    value = float(np.asarray(ivf[0].biases[0])[0])
    assert value == pytest.approx(0.25 / (1 - 0.98), abs=0.5)


def test_learner_updates_drive_the_ivf_to_the_discounted_reward():
    # Frozen agents and mixer; only the intrinsic value function learns.
    learner = qmix.init_qmix(
        1,
        OBS_DIM,
        N_ACTIONS,
        hidden=(),
        embed=3,
        learning_rate=0.0,
        ivf_learning_rate=0.1,
        gamma=0.9,
        target_interval=20,
    )
    zeros = np.zeros((4, 1, OBS_DIM))
    batch = replay.TransitionBatch(
        obs=zeros,
        actions=np.zeros((4, 1), dtype=np.int64),
        reward=np.zeros(4),
        next_obs=zeros,
        done=np.zeros(4, dtype=bool),
        positive_obs=zeros,
        positive_valid=np.zeros((4, 1), dtype=bool),
    )
    intrinsic = np.full((4, 1), 1.25)

    for _ in range(1200):
        learner, _ = qmix.update(learner, batch, alpha=0.0, intrinsic=intrinsic)
    assert learner.ivf.opt[0].step_count == 1200
    assert _leaves_equal(learner.agents.online, learner.agents.target)

    (value,), _ = qmix.intrinsic_value_and_grads(
        learner.agents.online, learner.ivf.online, batch.obs
    )
    assert value == pytest.approx(1.25 / (1 - 0.9), abs=0.5)


# Acting


def test_epsilon_greedy_frequencies():
    rng = np.random.default_rng(9)
    trials = 100_000
    counts = np.zeros(4)
    for _ in range(trials):
        counts[qmix.epsilon_greedy([0.0, 1.0, 0.5, -1.0], 0.2, rng=rng)] += 1
    frequencies = counts / trials
    assert frequencies[1] == pytest.approx(0.85, abs=0.01)
    np.testing.assert_allclose(frequencies[[0, 2, 3]], 0.05, atol=0.005)


def test_greedy_ties_go_to_the_lowest_index():
    rng = np.random.default_rng(0)
    assert qmix.epsilon_greedy([1.0, 1.0, 0.0], 0.0, rng=rng) == 0
    assert qmix.epsilon_greedy([0.0, 2.0, 1.0], 0.0, rng=rng) == 1


@pytest.mark.parametrize("epsilon", [-0.1, 1.5])
def test_exploration_rate_must_be_a_probability(epsilon):
    with pytest.raises(ValueError):
        qmix.epsilon_greedy([0.0, 1.0], epsilon, rng=np.random.default_rng(0))


def test_greedy_joint_action_is_the_per_agent_argmax():
    learner = _learner()
    joint_obs = np.random.default_rng(10).normal(size=(N_AGENTS, OBS_DIM))
    actions = qmix.greedy_actions(learner, joint_obs)
    expected = [
        int(np.argmax(np.asarray(qmix.individual_q(learner.agents, i, joint_obs[i]))))
        for i in range(N_AGENTS)
    ]
    np.testing.assert_array_equal(actions, expected)
    np.testing.assert_array_equal(
        qmix.act(learner, joint_obs, epsilon=0.0, rng=np.random.default_rng(0)),
        expected,
    )


def test_individual_q_rejects_wrong_width():
    with pytest.raises(StructuralError, match="qmix.individual_q"):
        qmix.individual_q(_learner().agents, 0, np.zeros(OBS_DIM + 1))


def test_action_distribution_rows_sum_to_one():
    learner = _learner()
    observations = np.random.default_rng(11).normal(size=(20, N_AGENTS, OBS_DIM))
    distribution = qmix.action_distribution(learner, observations)
    assert distribution.shape == (N_AGENTS, N_ACTIONS)
    np.testing.assert_allclose(distribution.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        qmix.action_distribution(learner, observations[:0])


# Updates


def test_without_intrinsic_weight_the_combined_step_is_plain_qmix():
    learner = _learner()
    batch = _batch(np.random.default_rng(12))
    combined, loss, values = qmix.combined_agent_gradient(learner, batch, alpha=0.0)
    plain, plain_loss = qmix.td_update_qtot(learner, batch)
    assert values == ()
    assert loss == plain_loss
    assert _leaves_equal(combined.agents.online, plain.agents.online)
    assert _leaves_equal(combined.mixer.online, plain.mixer.online)


def test_intrinsic_gradient_ascends_the_intrinsic_value():
    learner = _learner(learning_rate=1e-5)
    batch = _batch(np.random.default_rng(13))
    before, _ = qmix.intrinsic_value_and_grads(
        learner.agents.online, learner.ivf.online, batch.obs
    )
    stepped, _, _ = qmix.combined_agent_gradient(
        learner, batch, alpha=1.0, td_scale=0.0
    )
    after, _ = qmix.intrinsic_value_and_grads(
        stepped.agents.online, learner.ivf.online, batch.obs
    )
    assert all(b < a for b, a in zip(before, after))
    assert stepped.mixer is learner.mixer


def test_updates_touch_only_their_own_networks():
    learner = _learner()
    rng = np.random.default_rng(14)
    batch = _batch(rng)
    intrinsic = rng.uniform(size=(len(batch), N_AGENTS))

    fitted, losses = qmix.ivf_update(learner, batch, intrinsic)
    assert len(losses) == N_AGENTS
    assert fitted.agents is learner.agents
    assert fitted.mixer is learner.mixer
    assert not _leaves_equal(fitted.ivf.online, learner.ivf.online)

    stepped, _, _ = qmix.combined_agent_gradient(learner, batch, alpha=0.5)
    assert stepped.ivf is learner.ivf
    assert not _leaves_equal(stepped.agents.online, learner.agents.online)


def test_positive_intrinsic_weight_needs_intrinsic_rewards():
    learner = _learner()
    batch = _batch(np.random.default_rng(15))
    with pytest.raises(StructuralError, match="qmix.update"):
        qmix.update(learner, batch, alpha=0.2)
    with pytest.raises(ValueError):
        qmix.combined_agent_gradient(learner, batch, alpha=-0.1)


def test_update_syncs_targets_on_schedule():
    learner = _learner(target_interval=2)
    rng = np.random.default_rng(16)
    batch = _batch(rng)
    intrinsic = rng.uniform(size=(len(batch), N_AGENTS))

    learner, losses = qmix.update(learner, batch, alpha=0.2, intrinsic=intrinsic)
    assert learner.update_count == 1
    assert len(losses.ivf) == N_AGENTS
    assert len(losses.intrinsic_value) == N_AGENTS
    assert not _leaves_equal(learner.agents.target, learner.agents.online)

    learner, _ = qmix.update(learner, batch, alpha=0.2, intrinsic=intrinsic)
    assert learner.agents.target is learner.agents.online
    assert learner.mixer.target is learner.mixer.online
    assert learner.ivf.target is learner.ivf.online


def test_sync_targets_copies_every_network():
    learner = _learner()
    learner, _ = qmix.td_update_qtot(learner, _batch(np.random.default_rng(17)))
    synced = qmix.sync_targets(learner)
    assert _leaves_equal(synced.agents.target, learner.agents.online)
    assert _leaves_equal(synced.mixer.target, learner.mixer.online)
    assert _leaves_equal(synced.ivf.target, learner.ivf.online)


def test_shared_initialisation():
    shared = _learner(shared_init=True)
    assert _leaves_equal(shared.agents.online[0], shared.agents.online[1])
    separate = _learner(shared_init=False)
    assert not _leaves_equal(separate.agents.online[0], separate.agents.online[1])


def test_target_interval_must_be_positive():
    with pytest.raises(ValueError):
        _learner(target_interval=0)


def test_tensors_restore_every_network():
    learner = _learner(seed=0)
    learner, _ = qmix.td_update_qtot(learner, _batch(np.random.default_rng(18)))
    restored = qmix.from_tensors(qmix.to_tensors(learner), _learner(seed=1))
    assert _leaves_equal(restored.agents.online, learner.agents.online)
    assert _leaves_equal(restored.agents.target, learner.agents.target)
    assert _leaves_equal(restored.mixer.online, learner.mixer.online)
    assert _leaves_equal(restored.ivf.target, learner.ivf.target)
    assert restored.agents.opt[0].step_count == 0
