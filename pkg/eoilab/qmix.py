r"""Value factorisation with an intrinsic value function.

Every agent :math:`i` owns an action-value network :math:`Q^a_i(o_i, \cdot)`.
A mixing network combines the chosen values monotonically,

.. math:: Q_{tot} = w_2(s)^\top \mathrm{elu}(W_1(s) q + b_1(s)) + b_2(s),

with :math:`W_1, w_2 \geq 0` generated from the global state :math:`s`
(the concatenated observations) by hypernetworks.
Next to it, each agent learns an intrinsic value function
:math:`Q^p_i(o_i, Q^a_i(o_i))` on its intrinsic reward.
The agent networks follow

.. math:: \nabla_{\theta_i} = \partial \delta_{tot} / \partial \theta_i
    - \alpha\, \partial Q^p_i(o_i, Q^a_i(o_i; \theta_i)) / \partial \theta_i,

where the second term flows through the inputs of the (frozen) intrinsic
value function, like a deterministic policy gradient.
With :math:`\alpha = 0`, this is plain QMIX.
"""

import logging
from typing import Any, NamedTuple, Optional, Tuple

import numpy as np

from eoilab import backend, nnkit
from eoilab.errors import StructuralError
from eoilab.replay import Transition, TransitionBatch  # noqa: F401

logger = logging.getLogger(__name__)

EMBED = 32
"""Width of the mixing layer."""


class AgentQNet(NamedTuple):
    """Per-agent action-value networks, their targets and optimizers."""

    online: Tuple[nnkit.MlpParams, ...]
    target: Tuple[nnkit.MlpParams, ...]
    opt: Tuple[nnkit.AdamState, ...]


class MixerParams(NamedTuple):
    """Hypernetworks that generate the mixing weights from the global state.

    ``hyper_w1`` emits ``n_agents * embed`` first-layer weights,
    ``hyper_b1`` the first-layer bias, ``hyper_w2`` the ``embed``
    second-layer weights and ``hyper_b2`` (one hidden layer) the scalar bias.
    Weights pass through an absolute value before use.
    """

    hyper_w1: nnkit.MlpParams
    hyper_b1: nnkit.MlpParams
    hyper_w2: nnkit.MlpParams
    hyper_b2: nnkit.MlpParams

    @property
    def embed(self) -> int:
        """Width of the mixing layer."""
        return self.hyper_b1.out_dim


class MixingNet(NamedTuple):
    """The mixer, its target copy and its optimizer."""

    online: MixerParams
    target: MixerParams
    opt: nnkit.AdamState


class IvfNet(NamedTuple):
    """Per-agent intrinsic value functions over ``(obs, q-vector)``."""

    online: Tuple[nnkit.MlpParams, ...]
    target: Tuple[nnkit.MlpParams, ...]
    opt: Tuple[nnkit.AdamState, ...]


class QmixLearner(NamedTuple):
    """Everything one QMIX learner owns."""

    agents: AgentQNet
    mixer: MixingNet
    ivf: IvfNet
    gamma: float = 0.98
    target_interval: int = 200
    update_count: int = 0

    @property
    def n_agents(self) -> int:
        """Number of agents."""
        return len(self.agents.online)

    @property
    def n_actions(self) -> int:
        """Number of individual actions."""
        return self.agents.online[0].out_dim

    @property
    def obs_dim(self) -> int:
        """Width of one observation."""
        return self.agents.online[0].in_dim


class QmixLosses(NamedTuple):
    """Diagnostics of one learner update."""

    td: float
    ivf: Optional[Tuple[float, ...]]
    intrinsic_value: Tuple[float, ...]


def init_qmix(
    n_agents,
    obs_dim,
    n_actions,
    /,
    *,
    seed=0,
    shared_init=False,
    hidden=nnkit.HIDDEN,
    embed=EMBED,
    learning_rate=1e-4,
    ivf_learning_rate=1e-4,
    gamma=0.98,
    target_interval=200,
) -> QmixLearner:
    """Initialise a learner; targets start as copies of the online networks.

    With ``shared_init``, all agent networks start from identical weights.
    The mixing network and its hypernetworks follow Rashid et al. (2018).

    .. collapse:: BibTex for Rashid et al. (2018)

        .. code-block:: tex

            @inproceedings{rashid2018qmix,
                title={{QMIX}: Monotonic Value Function Factorisation for
                       Deep Multi-Agent Reinforcement Learning},
                author={Rashid, Tabish and Samvelyan, Mikayel and
                        Schroeder de Witt, Christian and Farquhar, Gregory and
                        Foerster, Jakob and Whiteson, Shimon},
                booktitle={International Conference on Machine Learning},
                pages={4295--4304},
                year={2018}
            }

    """
    if target_interval < 1:
        raise ValueError("The target interval must be at least one update.")
    seeds = nnkit.split_seed(seed, 2 * n_agents + 4)
    agent_seeds = [seeds[0] if shared_init else seeds[i] for i in range(n_agents)]
    agent_nets = tuple(
        nnkit.init_mlp(obs_dim, n_actions, hidden=hidden, seed=s) for s in agent_seeds
    )
    agents = AgentQNet(
        online=agent_nets,
        target=agent_nets,
        opt=tuple(nnkit.init_adam(p, learning_rate=learning_rate) for p in agent_nets),
    )

    state_dim = n_agents * obs_dim
    s1, s2, s3, s4 = seeds[2 * n_agents :]
    mixer_params = MixerParams(
        hyper_w1=nnkit.init_mlp(state_dim, n_agents * embed, hidden=(), seed=s1),
        hyper_b1=nnkit.init_mlp(state_dim, embed, hidden=(), seed=s2),
        hyper_w2=nnkit.init_mlp(state_dim, embed, hidden=(), seed=s3),
        hyper_b2=nnkit.init_mlp(state_dim, 1, hidden=(embed,), seed=s4),
    )
    mixer = MixingNet(
        online=mixer_params,
        target=mixer_params,
        opt=nnkit.init_adam(mixer_params, learning_rate=learning_rate),
    )

    ivf_nets = tuple(
        nnkit.init_mlp(obs_dim + n_actions, 1, hidden=hidden, seed=seeds[n_agents + i])
        for i in range(n_agents)
    )
    ivf = IvfNet(
        online=ivf_nets,
        target=ivf_nets,
        opt=tuple(
            nnkit.init_adam(p, learning_rate=ivf_learning_rate) for p in ivf_nets
        ),
    )
    return QmixLearner(
        agents=agents,
        mixer=mixer,
        ivf=ivf,
        gamma=gamma,
        target_interval=target_interval,
    )


# Acting


def individual_q(agents: AgentQNet, agent, obs, /):
    """Action values of one agent for one observation or a batch."""
    params = agents.online[agent]
    obs = backend.numpy.asarray(obs)
    if obs.shape[-1] != params.in_dim:
        raise StructuralError(
            "qmix.individual_q",
            f"observation width {obs.shape[-1]} does not match {params.in_dim}",
        )
    if obs.ndim == 1:
        return nnkit.mlp_apply(params, obs[None, :])[0]
    return nnkit.mlp_apply(params, obs)


def epsilon_greedy(q_vector, epsilon, /, *, rng) -> int:
    """With probability ``epsilon`` a uniform action, else the argmax.

    Ties go to the lowest index.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"Exploration rate {epsilon} is not in [0, 1].")
    q_vector = np.asarray(q_vector)
    if rng.random() < epsilon:
        return int(rng.integers(q_vector.shape[0]))
    return int(np.argmax(q_vector))


def act(learner: QmixLearner, joint_obs, /, *, epsilon, rng) -> np.ndarray:
    """Epsilon-greedy joint action for one joint observation."""
    return np.asarray(
        [
            epsilon_greedy(individual_q(learner.agents, i, obs), epsilon, rng=rng)
            for i, obs in enumerate(joint_obs)
        ],
        dtype=np.int64,
    )


def greedy_actions(learner: QmixLearner, joint_obs, /) -> np.ndarray:
    """Greedy joint action for one joint observation."""
    return np.asarray(
        [
            int(np.argmax(np.asarray(individual_q(learner.agents, i, obs))))
            for i, obs in enumerate(joint_obs)
        ],
        dtype=np.int64,
    )


def action_distribution(learner: QmixLearner, observations, /) -> np.ndarray:
    """Histogram of every agent's greedy actions over joint observations.

    ``observations`` has shape ``(count, n_agents, obs_dim)``;
    the result has shape ``(n_agents, n_actions)`` and rows summing to one.
    """
    observations = np.asarray(observations)
    if observations.shape[0] == 0:
        raise ValueError("The action distribution needs at least one observation.")
    rows = []
    for i in range(learner.n_agents):
        q = np.asarray(individual_q(learner.agents, i, observations[:, i]))
        counts = np.bincount(np.argmax(q, axis=-1), minlength=learner.n_actions)
        rows.append(counts / observations.shape[0])
    return np.stack(rows)


# Mixing


def global_state(joint_obs, /):
    """Concatenate the observations of all agents (batched)."""
    joint_obs = backend.numpy.asarray(joint_obs)
    return joint_obs.reshape(joint_obs.shape[0], -1)


class MixTape(NamedTuple):
    """Intermediate values of one batched mixing pass."""

    chosen_q: Any
    raw_w1: Any
    raw_w2: Any
    hidden_pre: Any
    hidden: Any
    tapes: Tuple[nnkit.ForwardTape, ...]


def _elu(x):
    np_ = backend.numpy
    return np_.where(x > 0, x, np_.expm1(np_.minimum(x, 0.0)))


def _elu_derivative(x):
    np_ = backend.numpy
    return np_.where(x > 0, 1.0, np_.exp(np_.minimum(x, 0.0)))


def mix_forward(params: MixerParams, chosen_q, states, /):
    """Mix a batch of chosen action values into joint values.

    ``chosen_q`` has shape ``(batch, n_agents)``, ``states`` shape
    ``(batch, state_dim)``. Returns ``(batch,)`` joint values and a tape.
    """
    np_ = backend.numpy
    chosen_q, states = np_.asarray(chosen_q), np_.asarray(states)
    batch, n_agents = chosen_q.shape
    embed = params.embed
    if params.hyper_w1.out_dim != n_agents * embed:
        raise StructuralError(
            "qmix.mix",
            f"mixer built for {params.hyper_w1.out_dim // embed} agents, "
            f"received {n_agents}",
        )

    raw_w1, tape_w1 = nnkit.mlp_forward(params.hyper_w1, states)
    b1, tape_b1 = nnkit.mlp_forward(params.hyper_b1, states)
    raw_w2, tape_w2 = nnkit.mlp_forward(params.hyper_w2, states)
    b2, tape_b2 = nnkit.mlp_forward(params.hyper_b2, states)

    w1 = np_.abs(raw_w1).reshape(batch, n_agents, embed)
    hidden_pre = np_.einsum("bn,bne->be", chosen_q, w1) + b1
    hidden = _elu(hidden_pre)
    q_tot = np_.sum(hidden * np_.abs(raw_w2), axis=1) + b2[:, 0]
    tape = MixTape(
        chosen_q=chosen_q,
        raw_w1=raw_w1,
        raw_w2=raw_w2,
        hidden_pre=hidden_pre,
        hidden=hidden,
        tapes=(tape_w1, tape_b1, tape_w2, tape_b2),
    )
    return q_tot, tape


def mix_backward(params: MixerParams, tape: MixTape, q_tot_grads, /):
    """Backpropagate joint-value gradients through the mixer.

    Returns hypernetwork gradients (a :class:`MixerParams`) and the
    gradients with respect to the chosen action values.
    """
    np_ = backend.numpy
    g = np_.asarray(q_tot_grads)[:, None]
    batch, n_agents = tape.chosen_q.shape
    embed = params.embed
    tape_w1, tape_b1, tape_w2, tape_b2 = tape.tapes

    grads_b2, _ = nnkit.mlp_backward(params.hyper_b2, tape_b2, g)
    grads_w2, _ = nnkit.mlp_backward(
        params.hyper_w2, tape_w2, g * tape.hidden * np_.sign(tape.raw_w2)
    )

    hidden_pre_grads = g * np_.abs(tape.raw_w2) * _elu_derivative(tape.hidden_pre)
    grads_b1, _ = nnkit.mlp_backward(params.hyper_b1, tape_b1, hidden_pre_grads)

    w1_grads = tape.chosen_q[:, :, None] * hidden_pre_grads[:, None, :]
    raw_w1_grads = w1_grads.reshape(batch, n_agents * embed) * np_.sign(tape.raw_w1)
    grads_w1, _ = nnkit.mlp_backward(params.hyper_w1, tape_w1, raw_w1_grads)

    w1 = np_.abs(tape.raw_w1).reshape(batch, n_agents, embed)
    chosen_q_grads = np_.einsum("be,bne->bn", hidden_pre_grads, w1)
    grads = MixerParams(
        hyper_w1=grads_w1, hyper_b1=grads_b1, hyper_w2=grads_w2, hyper_b2=grads_b2
    )
    return grads, chosen_q_grads


def mix(params: MixerParams, chosen_q, states, /):
    """Joint value for one ``(chosen_q, state)`` pair or a batch of them."""
    np_ = backend.numpy
    chosen_q, states = np_.asarray(chosen_q), np_.asarray(states)
    if chosen_q.ndim == 1:
        q_tot, _ = mix_forward(params, chosen_q[None, :], states[None, :])
        return q_tot[0]
    q_tot, _ = mix_forward(params, chosen_q, states)
    return q_tot


# Losses


def _check_batch(batch, component):
    if len(batch) == 0:
        raise StructuralError(component, "empty batch")


def _onehot(indices, depth):
    return backend.numpy.eye(depth)[np.asarray(indices, dtype=np.int64)]


def td_loss_and_grads(
    agent_params, mixer_params, agent_targets, mixer_target, batch, /, *, gamma
):
    r"""Squared TD error of the joint value and its gradients.

    The target is :math:`r + \gamma (1 - d) \bar{Q}_{tot}(s', \max_a \bar{Q}^a(o', a))`
    on the stored environmental reward.
    Returns the loss, the per-agent gradients and the mixer gradients.
    """
    np_ = backend.numpy
    _check_batch(batch, "qmix.td_update_qtot")
    size = len(batch)
    obs, next_obs = np_.asarray(batch.obs), np_.asarray(batch.next_obs)
    n_actions = agent_params[0].out_dim

    chosen, tapes, masks = [], [], []
    for i, params in enumerate(agent_params):
        q, tape = nnkit.mlp_forward(params, obs[:, i])
        mask = _onehot(batch.actions[:, i], n_actions)
        chosen.append(np_.sum(q * mask, axis=1))
        tapes.append(tape)
        masks.append(mask)
    chosen = np_.stack(chosen, axis=1)
    q_tot, mix_tape = mix_forward(mixer_params, chosen, global_state(obs))

    next_max = np_.stack(
        [
            np_.max(nnkit.mlp_apply(target, next_obs[:, i]), axis=1)
            for i, target in enumerate(agent_targets)
        ],
        axis=1,
    )
    next_q_tot = mix(mixer_target, next_max, global_state(next_obs))
    not_done = 1.0 - np_.asarray(batch.done, dtype=np_.float64)
    targets = np_.asarray(batch.reward) + gamma * not_done * next_q_tot

    errors = q_tot - targets
    loss = np_.mean(errors**2)
    mixer_grads, chosen_grads = mix_backward(mixer_params, mix_tape, 2 * errors / size)
    agent_grads = tuple(
        nnkit.mlp_backward(params, tape, mask * chosen_grads[:, i : i + 1])[0]
        for i, (params, tape, mask) in enumerate(zip(agent_params, tapes, masks))
    )
    return float(loss), agent_grads, mixer_grads


def ivf_loss_and_grads(
    ivf_params, agent_params, ivf_targets, agent_targets, batch, intrinsic, /, *, gamma
):
    r"""Squared TD errors of the intrinsic value functions and their gradients.

    Agent :math:`i` regresses :math:`Q^p_i(o_i, Q^a_i(o_i))` onto
    :math:`p_i + \gamma (1 - d) \bar{Q}^p_i(o'_i, \bar{Q}^a_i(o'_i))`,
    where ``intrinsic[:, i]`` holds the freshly computed :math:`p_i`.
    Only the intrinsic value functions receive gradients.
    """
    np_ = backend.numpy
    _check_batch(batch, "qmix.ivf_update")
    size = len(batch)
    obs, next_obs = np_.asarray(batch.obs), np_.asarray(batch.next_obs)
    intrinsic = np_.asarray(intrinsic)
    if tuple(intrinsic.shape) != (size, len(ivf_params)):
        raise StructuralError(
            "qmix.ivf_update",
            f"intrinsic rewards of shape {tuple(intrinsic.shape)}, "
            f"expected {(size, len(ivf_params))}",
        )
    not_done = 1.0 - np_.asarray(batch.done, dtype=np_.float64)

    losses, grads = [], []
    for i, params in enumerate(ivf_params):
        q = nnkit.mlp_apply(agent_params[i], obs[:, i])
        values, tape = nnkit.mlp_forward(params, np_.concatenate([obs[:, i], q], 1))

        next_q = nnkit.mlp_apply(agent_targets[i], next_obs[:, i])
        next_inputs = np_.concatenate([next_obs[:, i], next_q], axis=1)
        next_values = nnkit.mlp_apply(ivf_targets[i], next_inputs)[:, 0]
        targets = intrinsic[:, i] + gamma * not_done * next_values

        errors = values[:, 0] - targets
        losses.append(float(np_.mean(errors**2)))
        grads.append(nnkit.mlp_backward(params, tape, 2 * errors[:, None] / size)[0])
    return tuple(losses), tuple(grads)


def intrinsic_value_and_grads(agent_params, ivf_params, obs, /):
    r"""Batch-mean intrinsic values and their gradients in the agent parameters.

    Computes :math:`Q^p_i(o_i, Q^a_i(o_i; \theta_i))` for every agent.

    The intrinsic value functions are held fixed; the gradient passes
    through their q-vector input.
    """
    np_ = backend.numpy
    obs = np_.asarray(obs)
    size = obs.shape[0]
    values, grads = [], []
    for i, (params, ivf) in enumerate(zip(agent_params, ivf_params)):
        q, tape = nnkit.mlp_forward(params, obs[:, i])
        v, ivf_tape = nnkit.mlp_forward(ivf, np_.concatenate([obs[:, i], q], axis=1))
        values.append(float(np_.mean(v)))
        _, input_grads = nnkit.mlp_backward(ivf, ivf_tape, np_.ones((size, 1)) / size)
        q_grads = input_grads[:, obs.shape[2] :]
        grads.append(nnkit.mlp_backward(params, tape, q_grads)[0])
    return tuple(values), tuple(grads)


# Updates


def ivf_update(learner: QmixLearner, batch: TransitionBatch, intrinsic, /):
    """One Adam step on every intrinsic value function.

    Returns the updated learner and the per-agent losses before the step.
    """
    ivf = learner.ivf
    losses, grads = ivf_loss_and_grads(
        ivf.online,
        learner.agents.online,
        ivf.target,
        learner.agents.target,
        batch,
        intrinsic,
        gamma=learner.gamma,
    )
    stepped = [
        nnkit.adam_step(p, g, s) for p, g, s in zip(ivf.online, grads, ivf.opt)
    ]
    online, opt = (tuple(x) for x in zip(*stepped))
    return learner._replace(ivf=ivf._replace(online=online, opt=opt)), losses


def combined_agent_gradient(
    learner: QmixLearner, batch: TransitionBatch, /, *, alpha, td_scale=1.0
):
    """One Adam step on the agent networks and the mixer.

    The agent networks follow ``td_scale`` times the TD gradient minus
    ``alpha`` times the intrinsic-value gradient; the mixer follows the
    TD gradient alone. The intrinsic value functions are not changed.
    Returns the updated learner, the TD loss and the batch-mean intrinsic
    values before the step.
    """
    if alpha < 0:
        raise ValueError("The intrinsic weight must be non-negative.")
    agents, mixer = learner.agents, learner.mixer
    loss, td_grads, mixer_grads = td_loss_and_grads(
        agents.online,
        mixer.online,
        agents.target,
        mixer.target,
        batch,
        gamma=learner.gamma,
    )
    agent_grads = tuple(nnkit.tree_scale(g, td_scale) for g in td_grads)

    values = ()
    if alpha:
        values, aux_grads = intrinsic_value_and_grads(
            agents.online, learner.ivf.online, batch.obs
        )
        agent_grads = tuple(
            nnkit.tree_add(g, nnkit.tree_scale(a, -alpha))
            for g, a in zip(agent_grads, aux_grads)
        )

    stepped = [
        nnkit.adam_step(p, g, s)
        for p, g, s in zip(agents.online, agent_grads, agents.opt)
    ]
    online, opt = (tuple(x) for x in zip(*stepped))
    agents = agents._replace(online=online, opt=opt)
    if td_scale:
        mixer_params, mixer_opt = nnkit.adam_step(
            mixer.online, nnkit.tree_scale(mixer_grads, td_scale), mixer.opt
        )
        mixer = mixer._replace(online=mixer_params, opt=mixer_opt)
    return learner._replace(agents=agents, mixer=mixer), loss, values


def td_update_qtot(learner: QmixLearner, batch: TransitionBatch, /):
    """Plain QMIX step: the TD gradient into the agent networks and the mixer."""
    learner, loss, _ = combined_agent_gradient(learner, batch, alpha=0.0)
    return learner, loss


def sync_targets(learner: QmixLearner, /) -> QmixLearner:
    """Copy all online networks into their targets."""
    return learner._replace(
        agents=learner.agents._replace(target=learner.agents.online),
        mixer=learner.mixer._replace(target=learner.mixer.online),
        ivf=learner.ivf._replace(target=learner.ivf.online),
    )


def update(learner: QmixLearner, batch: TransitionBatch, /, *, alpha, intrinsic=None):
    """One full learner iteration.

    Fits the intrinsic value functions (if ``intrinsic`` is given),
    then takes the combined agent step, then syncs the targets on schedule.
    """
    ivf_losses = None
    if intrinsic is not None:
        learner, ivf_losses = ivf_update(learner, batch, intrinsic)
    elif alpha:
        raise StructuralError(
            "qmix.update", "a positive intrinsic weight needs intrinsic rewards"
        )
    learner, td_loss, values = combined_agent_gradient(learner, batch, alpha=alpha)

    learner = learner._replace(update_count=learner.update_count + 1)
    if learner.update_count % learner.target_interval == 0:
        logger.debug("Syncing targets after %d updates.", learner.update_count)
        learner = sync_targets(learner)
    return learner, QmixLosses(td=td_loss, ivf=ivf_losses, intrinsic_value=values)


# Checkpoints

_GROUPS = (
    ("agents/online", lambda lr: lr.agents.online),
    ("agents/target", lambda lr: lr.agents.target),
    ("mixer/online", lambda lr: lr.mixer.online),
    ("mixer/target", lambda lr: lr.mixer.target),
    ("ivf/online", lambda lr: lr.ivf.online),
    ("ivf/target", lambda lr: lr.ivf.target),
)


def to_tensors(learner: QmixLearner, /):
    """Named tensors of every online and target network."""
    tensors = {}
    for prefix, get in _GROUPS:
        tensors.update(nnkit.tree_to_tensors(f"qmix/{prefix}", get(learner)))
    return tensors


def from_tensors(tensors, like: QmixLearner, /) -> QmixLearner:
    """Restore networks saved by :func:`to_tensors` into a learner of the same shape.

    Optimizer states restart from zero.
    """
    loaded = {
        prefix: nnkit.tree_from_tensors(f"qmix/{prefix}", tensors, get(like))
        for prefix, get in _GROUPS
    }
    agents = AgentQNet(
        online=loaded["agents/online"],
        target=loaded["agents/target"],
        opt=tuple(
            nnkit.init_adam(p, learning_rate=s.learning_rate)
            for p, s in zip(loaded["agents/online"], like.agents.opt)
        ),
    )
    mixer = MixingNet(
        online=loaded["mixer/online"],
        target=loaded["mixer/target"],
        opt=nnkit.init_adam(
            loaded["mixer/online"], learning_rate=like.mixer.opt.learning_rate
        ),
    )
    ivf = IvfNet(
        online=loaded["ivf/online"],
        target=loaded["ivf/target"],
        opt=tuple(
            nnkit.init_adam(p, learning_rate=s.learning_rate)
            for p, s in zip(loaded["ivf/online"], like.ivf.opt)
        ),
    )
    return like._replace(agents=agents, mixer=mixer, ivf=ivf)
