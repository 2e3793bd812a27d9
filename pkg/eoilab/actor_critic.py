r"""Actor-critic with centralised critics and a shaped reward.

Every agent :math:`i` acts with its own softmax policy :math:`\pi_i(\cdot|o_i)`
and learns its own critic :math:`Q_i(o_1, \dots, o_n, a_{-i}, \cdot)`,
which sees all observations and the other agents' actions.
The critic of agent :math:`i` regresses onto

.. math:: r + \alpha p_i + \gamma (1 - d)
    \mathbb{E}_{a'_i \sim \pi_i}[\bar{Q}_i(o', a'_{-i}, a'_i)],

where :math:`p_i` is the agent's intrinsic reward and :math:`a'_{-i}` are drawn
from the other agents' current policies.
The policies follow the counterfactual advantage
:math:`Q_i(a_i) - \sum_a \pi_i(a|o_i) Q_i(a)` with an entropy bonus.
Stored actions are reused without importance correction.
"""

import logging
from typing import NamedTuple, Tuple

import numpy as np

from eoilab import backend, nnkit
from eoilab.errors import StructuralError
from eoilab.replay import TransitionBatch

logger = logging.getLogger(__name__)


class PolicyNet(NamedTuple):
    """Per-agent policy networks and their optimizers."""

    params: Tuple[nnkit.MlpParams, ...]
    opt: Tuple[nnkit.AdamState, ...]


class CentralCriticNet(NamedTuple):
    """Per-agent centralised critics, their targets and optimizers."""

    online: Tuple[nnkit.MlpParams, ...]
    target: Tuple[nnkit.MlpParams, ...]
    opt: Tuple[nnkit.AdamState, ...]


class ActorCriticLearner(NamedTuple):
    """Everything one actor-critic learner owns."""

    policy: PolicyNet
    critic: CentralCriticNet
    gamma: float = 0.98
    entropy_coef: float = 0.01
    target_interval: int = 200
    update_count: int = 0

    @property
    def n_agents(self) -> int:
        """Number of agents."""
        return len(self.policy.params)

    @property
    def n_actions(self) -> int:
        """Number of individual actions."""
        return self.policy.params[0].out_dim


class ActorCriticLosses(NamedTuple):
    """Per-agent critic and policy losses of one update."""

    critic: Tuple[float, ...]
    policy: Tuple[float, ...]


def critic_input_dim(n_agents, obs_dim, n_actions, /) -> int:
    """Width of a critic input: all observations and the others' one-hot actions."""
    return n_agents * obs_dim + (n_agents - 1) * n_actions


def init_actor_critic(
    n_agents,
    obs_dim,
    n_actions,
    /,
    *,
    seed=0,
    shared_init=False,
    hidden=nnkit.HIDDEN,
    actor_learning_rate=1e-3,
    critic_learning_rate=1e-4,
    gamma=0.98,
    entropy_coef=0.01,
    target_interval=200,
) -> ActorCriticLearner:
    """Initialise policies and critics; targets start as copies.

    The per-agent centralised critics follow the actor-critic family of
    Iqbal and Sha (2019), without their attention module.

    .. collapse:: BibTex for Iqbal and Sha (2019)

        .. code-block:: tex

            @inproceedings{iqbal2019actor,
                title={Actor-Attention-Critic for Multi-Agent Reinforcement Learning},
                author={Iqbal, Shariq and Sha, Fei},
                booktitle={International Conference on Machine Learning},
                pages={2961--2970},
                year={2019}
            }

    """
    if target_interval < 1:
        raise ValueError("The target interval must be at least one update.")
    seeds = nnkit.split_seed(seed, 2 * n_agents)
    policy_seeds = [seeds[0] if shared_init else seeds[i] for i in range(n_agents)]
    policies = tuple(
        nnkit.init_mlp(obs_dim, n_actions, hidden=hidden, seed=s) for s in policy_seeds
    )
    in_dim = critic_input_dim(n_agents, obs_dim, n_actions)
    critics = tuple(
        nnkit.init_mlp(in_dim, n_actions, hidden=hidden, seed=seeds[n_agents + i])
        for i in range(n_agents)
    )
    return ActorCriticLearner(
        policy=PolicyNet(
            params=policies,
            opt=tuple(
                nnkit.init_adam(p, learning_rate=actor_learning_rate) for p in policies
            ),
        ),
        critic=CentralCriticNet(
            online=critics,
            target=critics,
            opt=tuple(
                nnkit.init_adam(p, learning_rate=critic_learning_rate) for p in critics
            ),
        ),
        gamma=gamma,
        entropy_coef=entropy_coef,
        target_interval=target_interval,
    )


# Acting


def policy_probs(params: nnkit.MlpParams, obs, /):
    """Action distribution for one observation or a batch."""
    obs = backend.numpy.asarray(obs)
    if obs.ndim == 1:
        return nnkit.softmax(nnkit.mlp_apply(params, obs[None, :]))[0]
    return nnkit.softmax(nnkit.mlp_apply(params, obs))


def sample_action(params: nnkit.MlpParams, obs, /, *, rng, greedy=False):
    """Draw actions and their log-probabilities from a policy.

    Works on one observation (returns an ``int`` and a ``float``) or on a
    batch (returns two arrays). With ``greedy``, the mode is returned instead.
    """
    single = np.ndim(obs) == 1
    obs = np.atleast_2d(np.asarray(obs))
    logits = nnkit.mlp_apply(params, obs)
    log_probs = np.asarray(nnkit.log_softmax(logits))
    if greedy:
        actions = np.argmax(log_probs, axis=-1)
    else:
        cdf = np.cumsum(np.exp(log_probs), axis=-1)
        u = rng.random(obs.shape[0])
        actions = np.minimum(np.sum(u[:, None] >= cdf, axis=-1), cdf.shape[1] - 1)
    chosen = log_probs[np.arange(obs.shape[0]), actions]
    if single:
        return int(actions[0]), float(chosen[0])
    return actions.astype(np.int64), chosen


def act(learner: ActorCriticLearner, joint_obs, /, *, rng, greedy=False) -> np.ndarray:
    """Joint action for one joint observation."""
    return np.asarray(
        [
            sample_action(params, obs, rng=rng, greedy=greedy)[0]
            for params, obs in zip(learner.policy.params, joint_obs)
        ],
        dtype=np.int64,
    )


def greedy_actions(learner: ActorCriticLearner, joint_obs, /) -> np.ndarray:
    """Mode of every policy for one joint observation."""
    return act(learner, joint_obs, rng=None, greedy=True)


# Critics


def critic_inputs(joint_obs, actions, agent, n_actions, /):
    """Critic inputs of one agent.

    All observations, then the one-hot actions of the other agents.
    """
    np_ = backend.numpy
    joint_obs = np_.asarray(joint_obs)
    actions = np.asarray(actions, dtype=np.int64)
    batch, n_agents, _ = joint_obs.shape
    others = [j for j in range(n_agents) if j != agent]
    onehots = np_.eye(n_actions)[actions[:, others]].reshape(batch, -1)
    return np_.concatenate([joint_obs.reshape(batch, -1), onehots], axis=1)


def sample_next_actions(policy: PolicyNet, next_obs, /, *, rng) -> np.ndarray:
    """Draw every agent's next action from its current policy."""
    next_obs = np.asarray(next_obs)
    columns = [
        sample_action(params, next_obs[:, i], rng=rng)[0]
        for i, params in enumerate(policy.params)
    ]
    return np.stack(columns, axis=1)


def critic_loss_and_grads(
    params,
    target,
    policy_params,
    batch,
    next_actions,
    shaped_reward,
    agent,
    /,
    *,
    gamma,
):
    """Squared TD error of one critic on the taken action, and its gradient."""
    np_ = backend.numpy
    size = len(batch)
    if size == 0:
        raise StructuralError("actor_critic.critic_update", "empty batch")
    n_actions = params.out_dim

    inputs = critic_inputs(batch.obs, batch.actions, agent, n_actions)
    q, tape = nnkit.mlp_forward(params, inputs)
    mask = np_.eye(n_actions)[np.asarray(batch.actions)[:, agent]]
    chosen = np_.sum(q * mask, axis=1)

    next_inputs = critic_inputs(batch.next_obs, next_actions, agent, n_actions)
    next_q = nnkit.mlp_apply(target, next_inputs)
    next_probs = policy_probs(policy_params, np_.asarray(batch.next_obs)[:, agent])
    expected = np_.sum(next_probs * next_q, axis=1)
    not_done = 1.0 - np_.asarray(batch.done, dtype=np_.float64)
    targets = np_.asarray(shaped_reward) + gamma * not_done * expected

    errors = chosen - targets
    grads, _ = nnkit.mlp_backward(params, tape, mask * (2 * errors / size)[:, None])
    return float(np_.mean(errors**2)), grads


def shaped_rewards(batch: TransitionBatch, intrinsic, /, *, alpha):
    """Per-agent rewards ``r + alpha * p_i`` of shape ``(batch, n_agents)``.

    With ``alpha = 0``, ``intrinsic`` is ignored and may be ``None``.
    """
    np_ = backend.numpy
    reward = np_.asarray(batch.reward)[:, None]
    n_agents = np.shape(batch.actions)[1]
    if not alpha:
        return np_.repeat(reward, n_agents, axis=1)
    if intrinsic is None:
        raise StructuralError(
            "actor_critic.critic_update",
            "a positive intrinsic weight needs intrinsic rewards",
        )
    return reward + alpha * np_.asarray(intrinsic)


def critic_update(
    learner: ActorCriticLearner, batch: TransitionBatch, /, *, alpha, intrinsic, rng
):
    """One Adam step on every critic.

    Returns the updated learner and the per-agent losses before the step.
    """
    if alpha < 0:
        raise ValueError("The intrinsic weight must be non-negative.")
    critic = learner.critic
    rewards = shaped_rewards(batch, intrinsic, alpha=alpha)
    next_actions = sample_next_actions(learner.policy, batch.next_obs, rng=rng)

    losses, online, opt = [], [], []
    for i, (params, target, state) in enumerate(
        zip(critic.online, critic.target, critic.opt)
    ):
        loss, grads = critic_loss_and_grads(
            params,
            target,
            learner.policy.params[i],
            batch,
            next_actions,
            rewards[:, i],
            i,
            gamma=learner.gamma,
        )
        new_params, new_state = nnkit.adam_step(params, grads, state)
        losses.append(loss)
        online.append(new_params)
        opt.append(new_state)
    critic = critic._replace(online=tuple(online), opt=tuple(opt))
    return learner._replace(critic=critic), tuple(losses)


# Policies


def policy_loss_and_grads(params, q_values, obs, actions, /, *, entropy_coef):
    r"""Counterfactual policy-gradient loss of one agent and its gradient.

    ``q_values`` holds the critic's values of every own action, shape
    ``(batch, n_actions)``, and is treated as a constant. The loss is
    :math:`-\mathrm{mean}(\log \pi(a|o) A(a)) - c\, \mathrm{mean}(H(\pi))`.
    """
    np_ = backend.numpy
    q_values = np_.asarray(q_values)
    size = q_values.shape[0]
    n_actions = params.out_dim

    logits, tape = nnkit.mlp_forward(params, obs)
    probs = nnkit.softmax(logits)
    log_probs = nnkit.log_softmax(logits)
    mask = np_.eye(n_actions)[np.asarray(actions, dtype=np.int64)]

    baseline = np_.sum(probs * q_values, axis=1)
    advantage = np_.sum(mask * q_values, axis=1) - baseline
    chosen_log_probs = np_.sum(mask * log_probs, axis=1)
    pred_entropy, entropy_grads = nnkit.entropy(probs)
    loss = -np_.mean(chosen_log_probs * advantage) - entropy_coef * np_.mean(
        pred_entropy
    )

    logit_grads = -advantage[:, None] * (mask - probs) - entropy_coef * entropy_grads
    grads, _ = nnkit.mlp_backward(params, tape, logit_grads / size)
    return float(loss), grads


def policy_update(learner: ActorCriticLearner, batch: TransitionBatch, /):
    """One Adam step on every policy against the current critics."""
    policy, critic = learner.policy, learner.critic
    losses, params_out, opt_out = [], [], []
    for i, (params, state) in enumerate(zip(policy.params, policy.opt)):
        inputs = critic_inputs(batch.obs, batch.actions, i, learner.n_actions)
        q_values = nnkit.mlp_apply(critic.online[i], inputs)
        loss, grads = policy_loss_and_grads(
            params,
            q_values,
            np.asarray(batch.obs)[:, i],
            np.asarray(batch.actions)[:, i],
            entropy_coef=learner.entropy_coef,
        )
        new_params, new_state = nnkit.adam_step(params, grads, state)
        losses.append(loss)
        params_out.append(new_params)
        opt_out.append(new_state)
    policy = policy._replace(params=tuple(params_out), opt=tuple(opt_out))
    return learner._replace(policy=policy), tuple(losses)


def sync_targets(learner: ActorCriticLearner, /) -> ActorCriticLearner:
    """Copy the online critics into their targets."""
    critic = learner.critic
    return learner._replace(critic=critic._replace(target=critic.online))


def update(
    learner: ActorCriticLearner, batch: TransitionBatch, /, *, alpha, intrinsic, rng
):
    """Critic step, then policy step, then target sync on schedule."""
    learner, critic_losses = critic_update(
        learner, batch, alpha=alpha, intrinsic=intrinsic, rng=rng
    )
    learner, policy_losses = policy_update(learner, batch)
    learner = learner._replace(update_count=learner.update_count + 1)
    if learner.update_count % learner.target_interval == 0:
        logger.debug("Syncing critic targets after %d updates.", learner.update_count)
        learner = sync_targets(learner)
    return learner, ActorCriticLosses(critic=critic_losses, policy=policy_losses)


# Checkpoints


def to_tensors(learner: ActorCriticLearner, /):
    """Named tensors of the policies and critics."""
    tensors = nnkit.tree_to_tensors("actor_critic/policy", learner.policy.params)
    tensors.update(
        nnkit.tree_to_tensors("actor_critic/critic/online", learner.critic.online)
    )
    tensors.update(
        nnkit.tree_to_tensors("actor_critic/critic/target", learner.critic.target)
    )
    return tensors


def from_tensors(tensors, like: ActorCriticLearner, /) -> ActorCriticLearner:
    """Restore networks saved by :func:`to_tensors`; optimizers restart from zero."""
    policies = nnkit.tree_from_tensors(
        "actor_critic/policy", tensors, like.policy.params
    )
    online = nnkit.tree_from_tensors(
        "actor_critic/critic/online", tensors, like.critic.online
    )
    target = nnkit.tree_from_tensors(
        "actor_critic/critic/target", tensors, like.critic.target
    )
    policy = PolicyNet(
        params=policies,
        opt=tuple(
            nnkit.init_adam(p, learning_rate=s.learning_rate)
            for p, s in zip(policies, like.policy.opt)
        ),
    )
    critic = CentralCriticNet(
        online=online,
        target=target,
        opt=tuple(
            nnkit.init_adam(p, learning_rate=s.learning_rate)
            for p, s in zip(online, like.critic.opt)
        ),
    )
    return like._replace(policy=policy, critic=critic)
