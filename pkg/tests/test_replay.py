"""Tests for the replay buffer."""

import numpy as np
import pytest

from eoilab import replay
from eoilab.errors import StructuralError


def _transition(k, *, n_agents=2, obs_dim=3):
    obs = np.full((n_agents, obs_dim), float(k))
    return replay.Transition(
        obs=obs,
        actions=np.full(n_agents, k % 5),
        reward=float(k),
        next_obs=obs + 0.5,
        done=k % 2 == 1,
        positive_obs=obs - 0.5,
        positive_valid=np.full(n_agents, k > 0),
    )


def _filled(capacity, count):
    buffer = replay.ReplayBuffer(capacity, 2, 3)
    for k in range(count):
        buffer.add(_transition(k))
    return buffer


def test_buffer_grows_until_full():
    buffer = _filled(4, 3)
    assert len(buffer) == 3
    buffer.add(_transition(3))
    buffer.add(_transition(4))
    assert len(buffer) == 4


def test_oldest_transition_is_evicted_first():
    buffer = _filled(3, 5)
    stored = sorted(buffer.get(np.arange(3)).reward)
    assert stored == [2.0, 3.0, 4.0]


def test_get_returns_copies():
    buffer = _filled(3, 3)
    batch = buffer.get([0])
    batch.obs[...] = -1.0
    batch.actions[...] = -1
    np.testing.assert_array_equal(buffer.get([0]).obs, 0.0)
    np.testing.assert_array_equal(buffer.get([0]).actions, 0)


def test_sample_has_the_requested_size_without_repeats():
    buffer = _filled(10, 10)
    batch = buffer.sample(6, rng=np.random.default_rng(0))
    assert len(batch) == 6
    assert batch.obs.shape == (6, 2, 3)
    assert len(set(batch.reward)) == 6


def test_sample_is_deterministic_per_generator():
    buffer = _filled(10, 10)
    first = buffer.sample(4, rng=np.random.default_rng(1))
    second = buffer.sample(4, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(first.reward, second.reward)


def test_sampling_more_than_stored_fails():
    buffer = _filled(10, 3)
    with pytest.raises(StructuralError, match="replay.sample"):
        buffer.sample(4, rng=np.random.default_rng(0))


def test_wrong_observation_shape_is_rejected():
    buffer = replay.ReplayBuffer(4, 3, 3)
    with pytest.raises(StructuralError, match="replay.add"):
        buffer.add(_transition(0))


def test_capacity_must_be_positive():
    with pytest.raises(ValueError):
        replay.ReplayBuffer(0, 2, 3)


def test_agent_samples_carry_the_agent_label():
    buffer = _filled(5, 5)
    samples = buffer.agent_samples(1, [0, 2])
    np.testing.assert_array_equal(samples.label, [1, 1])
    np.testing.assert_array_equal(samples.anchor_obs[:, 0], [0.0, 2.0])
    np.testing.assert_array_equal(samples.positive_obs[:, 0], [-0.5, 1.5])
    np.testing.assert_array_equal(samples.positive_valid, [False, True])


def test_all_samples_is_balanced():
    samples = _filled(6, 4).all_samples()
    assert samples.anchor_obs.shape == (8, 3)
    np.testing.assert_array_equal(np.bincount(samples.label), [4, 4])


def test_stack_transitions():
    batch = replay.stack_transitions([_transition(k) for k in range(3)])
    assert batch.obs.shape == (3, 2, 3)
    np.testing.assert_array_equal(batch.done, [False, True, False])
    with pytest.raises(StructuralError):
        replay.stack_transitions([])


def test_tensors_keep_the_most_recent_transitions_in_order():
    buffer = _filled(4, 6)
    tensors = buffer.to_tensors(limit=3)
    np.testing.assert_array_equal(tensors["replay/reward"], [3.0, 4.0, 5.0])

    restored = replay.ReplayBuffer.from_tensors(tensors, capacity=10)
    assert len(restored) == 3
    assert restored.capacity == 10
    original = buffer.to_tensors(limit=3)
    again = restored.to_tensors()
    for name, value in original.items():
        np.testing.assert_array_equal(again[name], value)


def test_tensors_of_an_empty_buffer():
    buffer = replay.ReplayBuffer(4, 2, 3)
    restored = replay.ReplayBuffer.from_tensors(buffer.to_tensors())
    assert len(restored) == 0
