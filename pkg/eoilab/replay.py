"""Replay storage shared by the learners and the training loop."""

from typing import Any, NamedTuple

import numpy as np

from eoilab.classifier import ClassifierSample
from eoilab.errors import StructuralError


class Transition(NamedTuple):
    """One joint step.

    The reward is the environmental reward only; intrinsic rewards are
    recomputed whenever the transition is sampled. Each agent's positive
    (drawn when the step was recorded) travels along for the classifier.
    """

    obs: Any  # (n_agents, obs_dim)
    actions: Any  # (n_agents,)
    reward: float
    next_obs: Any  # (n_agents, obs_dim)
    done: bool
    positive_obs: Any  # (n_agents, obs_dim)
    positive_valid: Any  # (n_agents,)


class TransitionBatch(NamedTuple):
    """A batch of transitions, stacked along a leading axis."""

    obs: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    positive_obs: np.ndarray
    positive_valid: np.ndarray

    def __len__(self):
        return self.reward.shape[0]


def stack_transitions(transitions, /) -> TransitionBatch:
    """Stack a sequence of transitions into a batch."""
    if not transitions:
        raise StructuralError("replay.stack_transitions", "empty batch")
    return TransitionBatch(
        obs=np.stack([np.asarray(t.obs, dtype=np.float64) for t in transitions]),
        actions=np.stack([np.asarray(t.actions, dtype=np.int64) for t in transitions]),
        reward=np.asarray([t.reward for t in transitions], dtype=np.float64),
        next_obs=np.stack(
            [np.asarray(t.next_obs, dtype=np.float64) for t in transitions]
        ),
        done=np.asarray([t.done for t in transitions], dtype=bool),
        positive_obs=np.stack(
            [np.asarray(t.positive_obs, dtype=np.float64) for t in transitions]
        ),
        positive_valid=np.stack(
            [np.asarray(t.positive_valid, dtype=bool) for t in transitions]
        ),
    )


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling.

    The oldest transition is overwritten first. Sampled batches are copies;
    nothing stored is ever modified after insertion.
    """

    def __init__(self, capacity, n_agents, obs_dim):
        if capacity < 1:
            raise ValueError("The replay capacity must be positive.")
        self.capacity = int(capacity)
        self.n_agents = int(n_agents)
        self.obs_dim = int(obs_dim)
        self._obs = np.zeros((capacity, n_agents, obs_dim), dtype=np.float32)
        self._next_obs = np.zeros_like(self._obs)
        self._positive_obs = np.zeros_like(self._obs)
        self._actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self._positive_valid = np.zeros((capacity, n_agents), dtype=bool)
        self._reward = np.zeros((capacity,), dtype=np.float64)
        self._done = np.zeros((capacity,), dtype=bool)
        self._position = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, transition: Transition) -> None:
        """Store a transition, evicting the oldest one when full."""
        obs = np.asarray(transition.obs)
        if obs.shape != (self.n_agents, self.obs_dim):
            raise StructuralError(
                "replay.add",
                f"joint observation of shape {obs.shape}, "
                f"expected {(self.n_agents, self.obs_dim)}",
            )
        k = self._position
        self._obs[k] = obs
        self._next_obs[k] = transition.next_obs
        self._positive_obs[k] = transition.positive_obs
        self._actions[k] = transition.actions
        self._positive_valid[k] = transition.positive_valid
        self._reward[k] = transition.reward
        self._done[k] = transition.done
        self._position = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def get(self, indices) -> TransitionBatch:
        """Copy the transitions at the given indices."""
        indices = np.asarray(indices, dtype=np.int64)
        return TransitionBatch(
            obs=self._obs[indices].astype(np.float64),
            actions=self._actions[indices].copy(),
            reward=self._reward[indices].copy(),
            next_obs=self._next_obs[indices].astype(np.float64),
            done=self._done[indices].copy(),
            positive_obs=self._positive_obs[indices].astype(np.float64),
            positive_valid=self._positive_valid[indices].copy(),
        )

    def sample(self, batch_size, /, *, rng) -> TransitionBatch:
        """Draw a batch uniformly without replacement."""
        if self._size < batch_size:
            raise StructuralError(
                "replay.sample", f"{self._size} stored, {batch_size} requested"
            )
        return self.get(rng.choice(self._size, size=batch_size, replace=False))

    def agent_samples(self, agent, indices, /) -> ClassifierSample:
        """Classifier samples of one agent at the given indices."""
        indices = np.asarray(indices, dtype=np.int64)
        return ClassifierSample(
            anchor_obs=self._obs[indices, agent].astype(np.float64),
            label=np.full(indices.shape, agent, dtype=np.int64),
            positive_obs=self._positive_obs[indices, agent].astype(np.float64),
            positive_valid=self._positive_valid[indices, agent].copy(),
        )

    def all_samples(self) -> ClassifierSample:
        """Every stored classifier sample, agent by agent."""
        indices = np.arange(self._size)
        parts = [self.agent_samples(i, indices) for i in range(self.n_agents)]
        return ClassifierSample(*(np.concatenate(field) for field in zip(*parts)))

    def to_tensors(self, prefix="replay", /, *, limit=None):
        """Named tensors of the stored transitions (oldest first).

        With ``limit``, only the most recent ``limit`` transitions are kept.
        """
        size = self._size if limit is None else min(self._size, int(limit))
        order = (np.arange(size) + self._position - size) % self.capacity
        batch = self.get(order)
        return {f"{prefix}/{name}": value for name, value in batch._asdict().items()}

    @classmethod
    def from_tensors(cls, tensors, /, *, capacity=None, prefix="replay"):
        """Rebuild a buffer from :meth:`to_tensors` output."""
        obs = tensors[f"{prefix}/obs"]
        size, n_agents, obs_dim = obs.shape
        buffer = cls(capacity or max(size, 1), n_agents, obs_dim)
        fields = {
            name: tensors[f"{prefix}/{name}"] for name in TransitionBatch._fields
        }
        for k in range(size):
            buffer.add(
                Transition(
                    obs=fields["obs"][k],
                    actions=fields["actions"][k].astype(np.int64),
                    reward=float(fields["reward"][k]),
                    next_obs=fields["next_obs"][k],
                    done=bool(fields["done"][k]),
                    positive_obs=fields["positive_obs"][k],
                    positive_valid=fields["positive_valid"][k].astype(bool),
                )
            )
        return buffer
