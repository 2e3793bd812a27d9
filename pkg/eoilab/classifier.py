r"""The probabilistic classifier :math:`P_\phi(I|O)`.

The classifier predicts which agent produced an observation.
Its prediction :math:`p_\phi(i|o_i)` is the intrinsic reward of agent :math:`i`.
It is trained by minimising

.. math::

    \mathrm{CE}(p_\phi(\cdot|o), \mathrm{onehot}(i))
    + \beta_1 \mathrm{CE}(p_\phi(\cdot|o), p(\cdot|o'))
    + \beta_2 \mathrm{CE}(p_\phi(\cdot|o), p_\phi(\cdot|o)),

where :math:`o'` is a *positive*: an earlier observation of the same agent,
drawn from a window of :math:`\Delta t` steps.
The second term (positive distance) pulls predictions along a trajectory together;
its target is the network's own prediction on the positive, held constant.
The third term is the prediction entropy; with label-balanced batches
the label entropy is constant, so minimising it maximises the mutual
information between agent index and observation.
"""

from typing import Any, NamedTuple, Sequence

import numpy as np

from eoilab import backend, nnkit
from eoilab.errors import StructuralError

INTRINSIC_MODES = ("eoi", "diayn")


class ClassifierSample(NamedTuple):
    """One training record: an anchor, its agent label and a positive.

    ``positive_valid`` is false only when the anchor was the first step
    of its episode. Stacked batches use the same type with array fields.
    """

    anchor_obs: Any
    label: Any
    positive_obs: Any
    positive_valid: Any


class ClassifierNet(NamedTuple):
    """Classifier parameters and their optimizer state."""

    net: nnkit.MlpParams
    opt: nnkit.AdamState

    @property
    def n_agents(self) -> int:
        """Number of agent labels."""
        return self.net.out_dim


class ClassifierLosses(NamedTuple):
    """Total loss and its three components (batch means)."""

    total: float
    supervised: float
    positive_distance: float
    mutual_information: float


class DiscriminabilityReport(NamedTuple):
    """How well the classifier tells agents apart on a set of samples."""

    mean_correct_prob: float
    mean_entropy: float
    confusion: np.ndarray  # rows: true label, columns: argmax prediction


def init_classifier(
    obs_dim, n_agents, /, *, hidden=nnkit.HIDDEN, learning_rate=1e-3, seed=0
) -> ClassifierNet:
    """Initialise a classifier with an ``obs_dim -> ... -> n_agents`` network."""
    net = nnkit.init_mlp(obs_dim, n_agents, hidden=hidden, seed=seed)
    return ClassifierNet(net=net, opt=nnkit.init_adam(net, learning_rate=learning_rate))


def predict(net: ClassifierNet, obs, /):
    """Probability distribution over agents for one observation or a batch."""
    np_ = backend.numpy
    obs = np_.asarray(obs)
    if obs.shape[-1] != net.net.in_dim:
        raise StructuralError(
            "classifier.predict",
            f"observation width {obs.shape[-1]} does not match {net.net.in_dim}",
        )
    if obs.ndim == 1:
        return nnkit.softmax(nnkit.mlp_apply(net.net, obs[None, :]))[0]
    return nnkit.softmax(nnkit.mlp_apply(net.net, obs))


def reward_from_probability(prob, /, *, mode, n_agents):
    r"""Turn :math:`p(i|o)` into an intrinsic reward.

    ``"eoi"`` returns the probability itself,
    ``"diayn"`` returns :math:`\log(p + \epsilon) - \log(1/n)`,
    the skill-discrimination reward of Eysenbach et al. (2019).

    .. collapse:: BibTex for Eysenbach et al. (2019)

        .. code-block:: tex

            @inproceedings{eysenbach2019diversity,
                title={Diversity is All You Need: Learning Skills without a
                       Reward Function},
                author={Eysenbach, Benjamin and Gupta, Abhishek and
                        Ibarz, Julian and Levine, Sergey},
                booktitle={International Conference on Learning Representations},
                year={2019}
            }

    """
    if mode == "eoi":
        return prob
    if mode == "diayn":
        return backend.numpy.log(prob + nnkit.EPS_NUM) - np.log(1.0 / n_agents)
    raise ValueError(f"Intrinsic reward mode {mode!r} not known.")


def intrinsic_reward(net: ClassifierNet, agent, obs, /, *, mode="eoi", n_agents=None):
    """Intrinsic reward of a single agent for a single observation."""
    n = net.n_agents if n_agents is None else n_agents
    if not 0 <= agent < n:
        raise StructuralError("classifier.intrinsic_reward", f"agent {agent} >= {n}")
    prob = float(predict(net, obs)[agent])
    return float(reward_from_probability(prob, mode=mode, n_agents=n))


def intrinsic_rewards(net: ClassifierNet, joint_obs, /, *, mode="eoi"):
    """Intrinsic rewards of every agent for a batch of joint observations.

    ``joint_obs`` has shape ``(batch, n_agents, obs_dim)``;
    the result has shape ``(batch, n_agents)``.
    """
    np_ = backend.numpy
    joint_obs = np_.asarray(joint_obs)
    batch, n_agents, obs_dim = joint_obs.shape
    probs = predict(net, joint_obs.reshape(batch * n_agents, obs_dim))
    probs = probs.reshape(batch, n_agents, n_agents)
    own = np_.diagonal(probs, axis1=1, axis2=2)
    return reward_from_probability(own, mode=mode, n_agents=n_agents)


def sample_positive(episode_so_far: Sequence, t, /, *, window=4, rng):
    """Draw a positive for the observation at step ``t``.

    The positive is drawn uniformly from steps
    ``max(0, t - window), ..., t - 1`` of the same episode.
    At ``t = 0`` there is no history: the anchor itself is returned
    and flagged invalid.
    """
    if window < 1:
        raise ValueError("The positive window must be at least one step.")
    if t == 0:
        return episode_so_far[0], False
    k = int(rng.integers(max(0, t - window), t))
    return episode_so_far[k], True


def stack_samples(samples: Sequence[ClassifierSample], /) -> ClassifierSample:
    """Stack a sequence of samples into one sample of arrays."""
    return ClassifierSample(
        anchor_obs=np.stack([np.asarray(s.anchor_obs) for s in samples]),
        label=np.asarray([int(s.label) for s in samples], dtype=np.int64),
        positive_obs=np.stack([np.asarray(s.positive_obs) for s in samples]),
        positive_valid=np.asarray([bool(s.positive_valid) for s in samples]),
    )


def _as_stacked(batch):
    if isinstance(batch, ClassifierSample):
        return batch
    return stack_samples(batch)


def classifier_loss_and_grads(
    params: nnkit.MlpParams, batch: ClassifierSample, /, *, beta1, beta2, ce_weight=1.0
):
    """Evaluate the classifier objective and its parameter gradient.

    ``ce_weight`` scales the supervised term; it is 1 in training.
    """
    np_ = backend.numpy
    n_agents = params.out_dim
    labels = np.asarray(batch.label, dtype=np.int64)
    size = labels.shape[0]
    if size == 0:
        raise StructuralError("classifier.train_batch", "empty batch")

    logits, tape = nnkit.mlp_forward(params, batch.anchor_obs)
    probs = nnkit.softmax(logits)

    onehot = np_.eye(n_agents)[labels]
    supervised, logit_grads = nnkit.cross_entropy(probs, onehot)
    logit_grads = ce_weight * logit_grads
    total = ce_weight * np_.mean(supervised)

    positive_distance = np_.zeros(())
    if beta1:
        mask = np_.asarray(np.asarray(batch.positive_valid, dtype=np.float64))
        positive_probs = nnkit.softmax(nnkit.mlp_apply(params, batch.positive_obs))
        distance, distance_grads = nnkit.cross_entropy(probs, positive_probs)
        positive_distance = np_.sum(mask * distance) / size
        total = total + beta1 * positive_distance
        logit_grads = logit_grads + beta1 * mask[:, None] * distance_grads

    mutual_information = np_.zeros(())
    if beta2:
        pred_entropy, entropy_grads = nnkit.entropy(probs)
        mutual_information = np_.mean(pred_entropy)
        total = total + beta2 * mutual_information
        logit_grads = logit_grads + beta2 * entropy_grads

    grads, _ = nnkit.mlp_backward(params, tape, logit_grads / size)
    losses = ClassifierLosses(
        total=float(total),
        supervised=float(np_.mean(supervised)),
        positive_distance=float(positive_distance),
        mutual_information=float(mutual_information),
    )
    return losses, grads


def train_batch(net: ClassifierNet, batch, /, *, beta1, beta2, ce_weight=1.0):
    """Take one Adam step on a label-balanced batch.

    Returns the updated classifier and the losses before the step.
    """
    batch = _as_stacked(batch)
    if beta1 < 0 or beta2 < 0:
        raise ValueError("Regularizer weights must be non-negative.")
    counts = np.bincount(np.asarray(batch.label), minlength=net.n_agents)
    if counts.min() != counts.max():
        raise StructuralError(
            "classifier.train_batch", f"unbalanced label counts {counts.tolist()}"
        )
    losses, grads = classifier_loss_and_grads(
        net.net, batch, beta1=beta1, beta2=beta2, ce_weight=ce_weight
    )
    params, opt = nnkit.adam_step(net.net, grads, net.opt)
    return ClassifierNet(net=params, opt=opt), losses


def discriminability_report(net: ClassifierNet, samples, /) -> DiscriminabilityReport:
    """Mean correct-class probability, mean entropy and confusion matrix."""
    samples = _as_stacked(samples)
    labels = np.asarray(samples.label, dtype=np.int64)
    if labels.shape[0] == 0:
        raise ValueError("The discriminability report needs at least one sample.")

    probs = np.asarray(predict(net, samples.anchor_obs))
    correct = probs[np.arange(labels.shape[0]), labels]
    pred_entropy = -np.sum(probs * np.log(probs + nnkit.EPS_NUM), axis=-1)

    n = net.n_agents
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (labels, np.argmax(probs, axis=-1)), 1)
    return DiscriminabilityReport(
        mean_correct_prob=float(np.mean(correct)),
        mean_entropy=float(np.mean(pred_entropy)),
        confusion=confusion,
    )
