r"""Dense networks with hand-written backpropagation.

Every trainable object in :mod:`eoilab` is a :class:`MlpParams`:
a ReLU multi-layer perceptron

.. math::

    f(x) = W_3^\top \mathrm{relu}(W_2^\top \mathrm{relu}(W_1^\top x + b_1) + b_2) + b_3

with hidden widths :code:`(128, 128)` by default.
Forward passes return a :class:`ForwardTape` that :func:`mlp_backward` consumes,
losses return their gradient with respect to the logits,
and :func:`adam_step` turns gradients into updated parameters.

All functions are pure. They read their array implementation from
:attr:`eoilab.backend.numpy` and never write into arrays in place,
so they behave identically under the numpy and the jax backend.
Parameter containers are (nested) tuples of arrays, which
:func:`tree_map` traverses.
"""

import struct
from typing import Any, Callable, Dict, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from eoilab import backend
from eoilab.errors import StructuralError

HIDDEN = (128, 128)
"""Hidden widths of every network."""

EPS_NUM = 1e-8
"""Numerical floor inside every logarithm."""

CHECKPOINT_MAGIC = b"EOI1"


class MlpParams(NamedTuple):
    """Weights and biases of a ReLU multi-layer perceptron.

    ``weights[k]`` has shape ``(fan_in, fan_out)`` and ``biases[k]`` shape
    ``(fan_out,)``. A ReLU sits between consecutive layers; the last layer
    is linear.
    """

    weights: Tuple[Any, ...]
    biases: Tuple[Any, ...]

    @property
    def in_dim(self) -> int:
        """Input width."""
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        """Output width."""
        return self.weights[-1].shape[1]

    @property
    def hidden(self) -> Tuple[int, ...]:
        """Hidden widths."""
        return tuple(w.shape[1] for w in self.weights[:-1])


class ForwardTape(NamedTuple):
    """Intermediate values of one batched forward pass."""

    inputs: Any
    pre_activations: Tuple[Any, ...]
    activations: Tuple[Any, ...]


class AdamState(NamedTuple):
    """Moment estimates and hyperparameters of the Adam optimizer.

    The moments mirror the structure of the parameters they belong to.
    ``weight_decay`` and ``clip_norm`` are off by default.
    """

    first_moment: Any
    second_moment: Any
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: Optional[float] = None


# Trees


def tree_map(fn: Callable, tree, /, *rest):
    """Apply a function leaf-wise to one or more identically structured trees.

    Tuples (including named tuples) are nodes; everything else is a leaf.
    """
    if isinstance(tree, tuple):
        children = [tree_map(fn, *nodes) for nodes in zip(tree, *rest)]
        if hasattr(tree, "_fields"):
            return type(tree)(*children)
        return tuple(children)
    return fn(tree, *rest)


def tree_leaves(tree, /) -> list:
    """Flatten a tree into a list of leaves (depth first)."""
    if isinstance(tree, tuple):
        return [leaf for node in tree for leaf in tree_leaves(node)]
    return [tree]


def tree_zeros_like(tree, /):
    """A tree of zeros with the same structure and shapes."""
    return tree_map(backend.numpy.zeros_like, tree)


def tree_add(tree, other, /):
    """Leaf-wise sum of two trees."""
    return tree_map(lambda a, b: a + b, tree, other)


def tree_scale(tree, factor, /):
    """Multiply every leaf by a scalar."""
    return tree_map(lambda a: a * factor, tree)


def global_norm(tree, /) -> float:
    """Euclidean norm of all leaves taken together."""
    squares = [backend.numpy.sum(leaf**2) for leaf in tree_leaves(tree)]
    return float(backend.numpy.sqrt(sum(squares)))


# Networks


def init_mlp(in_dim, out_dim, /, *, hidden=HIDDEN, seed=0) -> MlpParams:
    """Initialise a multi-layer perceptron.

    Every layer draws weights and biases from
    :math:`\\mathcal{U}(-1/\\sqrt{\\text{fan\\_in}}, 1/\\sqrt{\\text{fan\\_in}})`.
    Identical seeds give identical parameters.
    """
    sizes = (int(in_dim), *(int(h) for h in hidden), int(out_dim))
    if backend.name == "jax":  # pylint: disable=comparison-with-callable
        layers = _init_uniform_jax(sizes=sizes, seed=seed)
    elif backend.name == "numpy":  # pylint: disable=comparison-with-callable
        layers = _init_uniform_numpy(sizes=sizes, seed=seed)
    else:
        msg1 = f"Network initialisation is not implemented for backend {backend.name}. "
        msg2 = "Please select `jax` or `numpy`."
        raise ValueError(msg1 + msg2)
    weights, biases = zip(*layers)
    return MlpParams(weights=tuple(weights), biases=tuple(biases))


def _init_uniform_numpy(*, sizes, seed):
    rng = backend.random.default_rng(seed)
    layers = []
    for m, n in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(m)
        w = rng.uniform(-bound, bound, size=(m, n))
        b = rng.uniform(-bound, bound, size=(n,))
        layers.append((w, b))
    return layers


def _init_uniform_jax(*, sizes, seed):
    key = backend.random.PRNGKey(seed)
    layers = []
    for m, n in zip(sizes[:-1], sizes[1:]):
        key, key_w, key_b = backend.random.split(key, 3)
        bound = 1.0 / np.sqrt(m)
        w = backend.random.uniform(key_w, (m, n), minval=-bound, maxval=bound)
        b = backend.random.uniform(key_b, (n,), minval=-bound, maxval=bound)
        layers.append((w, b))
    return layers


def zeros_mlp(in_dim, out_dim, /, *, hidden=HIDDEN) -> MlpParams:
    """A multi-layer perceptron whose weights and biases are all zero."""
    sizes = (int(in_dim), *(int(h) for h in hidden), int(out_dim))
    weights = tuple(
        backend.numpy.zeros((m, n)) for m, n in zip(sizes[:-1], sizes[1:])
    )
    biases = tuple(backend.numpy.zeros((n,)) for n in sizes[1:])
    return MlpParams(weights=weights, biases=biases)


def split_seed(seed, count, /) -> Tuple[int, ...]:
    """Derive ``count`` independent integer seeds from one seed."""
    state = np.random.SeedSequence(seed).generate_state(count)
    return tuple(int(s) for s in state)


def mlp_forward(params: MlpParams, inputs, /):
    """Evaluate a multi-layer perceptron on a batch of row vectors.

    Returns the outputs and a tape for :func:`mlp_backward`.
    """
    np_ = backend.numpy
    inputs = np_.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != params.in_dim:
        raise StructuralError(
            "nnkit.mlp_forward",
            f"expected inputs of shape (batch, {params.in_dim}), "
            f"received {tuple(inputs.shape)}",
        )

    pre_activations, activations = [], []
    h = inputs
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ w + b
        h = np_.maximum(z, 0.0)
        pre_activations.append(z)
        activations.append(h)
    outputs = h @ params.weights[-1] + params.biases[-1]
    tape = ForwardTape(inputs, tuple(pre_activations), tuple(activations))
    return outputs, tape


def mlp_apply(params: MlpParams, inputs, /):
    """Evaluate a multi-layer perceptron and discard the tape."""
    outputs, _ = mlp_forward(params, inputs)
    return outputs


def mlp_backward(params: MlpParams, tape: ForwardTape, output_grads, /):
    """Backpropagate output gradients through a multi-layer perceptron.

    Returns the parameter gradients (an :class:`MlpParams`)
    and the gradients with respect to the inputs.
    """
    np_ = backend.numpy
    output_grads = np_.asarray(output_grads)
    _check_tape(params, tape, output_grads)

    layer_inputs = (tape.inputs, *tape.activations)
    grad_weights, grad_biases = [], []
    g = output_grads
    for k in reversed(range(len(params.weights))):
        grad_weights.append(layer_inputs[k].T @ g)
        grad_biases.append(np_.sum(g, axis=0))
        g = g @ params.weights[k].T
        if k > 0:
            g = g * (tape.pre_activations[k - 1] > 0)
    grads = MlpParams(
        weights=tuple(reversed(grad_weights)), biases=tuple(reversed(grad_biases))
    )
    return grads, g


def _check_tape(params, tape, output_grads):
    batch = tape.inputs.shape[0]
    expected = (batch, params.out_dim)
    if tuple(output_grads.shape) != expected:
        raise StructuralError(
            "nnkit.mlp_backward",
            f"output gradients have shape {tuple(output_grads.shape)}, "
            f"expected {expected}",
        )
    if len(tape.activations) != len(params.weights) - 1:
        raise StructuralError(
            "nnkit.mlp_backward", "tape depth does not match the network depth"
        )
    widths = (tape.inputs.shape[1], *(a.shape[1] for a in tape.activations))
    fan_ins = tuple(w.shape[0] for w in params.weights)
    if widths != fan_ins:
        raise StructuralError(
            "nnkit.mlp_backward", f"tape widths {widths} do not match {fan_ins}"
        )


# Probabilities and losses


def softmax(logits, /):
    """Softmax over the last axis, computed with max-subtraction."""
    np_ = backend.numpy
    logits = np_.asarray(logits)
    if bool(np_.any(np_.isnan(logits))):
        raise StructuralError("nnkit.softmax", "logits contain NaN")
    shifted = logits - np_.max(logits, axis=-1, keepdims=True)
    exps = np_.exp(shifted)
    return exps / np_.sum(exps, axis=-1, keepdims=True)


def log_softmax(logits, /):
    """Logarithm of :func:`softmax`, without forming the probabilities."""
    np_ = backend.numpy
    logits = np_.asarray(logits)
    shifted = logits - np_.max(logits, axis=-1, keepdims=True)
    return shifted - np_.log(np_.sum(np_.exp(shifted), axis=-1, keepdims=True))


def softmax_backward(probs, prob_grads, /):
    """Pull a gradient with respect to softmax outputs back to the logits."""
    inner = backend.numpy.sum(probs * prob_grads, axis=-1, keepdims=True)
    return probs * (prob_grads - inner)


def cross_entropy(pred, target, /):
    r"""Cross-entropy of a softmax prediction against a fixed target.

    Computes :math:`-\sum_k t_k \log(p_k + \epsilon)` over the last axis,
    together with its gradient with respect to the logits that produced ``pred``.
    The target is treated as a constant; up to the numerical floor,
    the logit gradient equals ``pred - target``.
    """
    np_ = backend.numpy
    pred, target = np_.asarray(pred), np_.asarray(target)
    loss = -np_.sum(target * np_.log(pred + EPS_NUM), axis=-1)
    prob_grads = -target / (pred + EPS_NUM)
    return loss, softmax_backward(pred, prob_grads)


def entropy(pred, /):
    r"""Entropy of a softmax prediction and its gradient with respect to the logits.

    This is the cross-entropy of a prediction with itself,
    :math:`-\sum_k p_k \log(p_k + \epsilon)`, differentiated through both slots.
    """
    np_ = backend.numpy
    pred = np_.asarray(pred)
    logs = np_.log(pred + EPS_NUM)
    value = -np_.sum(pred * logs, axis=-1)
    prob_grads = -logs - pred / (pred + EPS_NUM)
    return value, softmax_backward(pred, prob_grads)


# Optimizer


def init_adam(params, /, *, learning_rate, **kwargs) -> AdamState:
    """Zero moments for a parameter tree."""
    return AdamState(
        first_moment=tree_zeros_like(params),
        second_moment=tree_zeros_like(params),
        step_count=0,
        learning_rate=learning_rate,
        **kwargs,
    )


def adam_step(params, grads, state: AdamState, /):
    """Apply one bias-corrected Adam update.

    Returns the updated parameters and optimizer state.
    Non-finite gradients abort with a :class:`StructuralError`.
    """
    np_ = backend.numpy
    param_leaves, grad_leaves = tree_leaves(params), tree_leaves(grads)
    shapes = [tuple(np_.shape(p)) for p in param_leaves]
    if shapes != [tuple(np_.shape(g)) for g in grad_leaves]:
        raise StructuralError(
            "nnkit.adam_step", "gradient shapes do not mirror the parameters"
        )
    if not all(bool(np_.all(np_.isfinite(g))) for g in grad_leaves):
        raise StructuralError("nnkit.adam_step", "non-finite gradient entries")

    if state.clip_norm is not None:
        norm = global_norm(grads)
        if norm > state.clip_norm:
            grads = tree_scale(grads, state.clip_norm / norm)
    if state.weight_decay:
        grads = tree_map(lambda g, p: g + state.weight_decay * p, grads, params)

    b1, b2 = state.beta1, state.beta2
    step_count = state.step_count + 1
    first = tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.first_moment, grads)
    second = tree_map(
        lambda v, g: b2 * v + (1 - b2) * g**2, state.second_moment, grads
    )
    correction1 = 1 - b1**step_count
    correction2 = 1 - b2**step_count

    def update(p, m, v):
        m_hat = m / correction1
        v_hat = v / correction2
        return p - state.learning_rate * m_hat / (np_.sqrt(v_hat) + state.epsilon)

    new_params = tree_map(update, params, first, second)
    new_state = state._replace(
        first_moment=first, second_moment=second, step_count=step_count
    )
    return new_params, new_state


# Checkpoints


def tree_to_tensors(prefix, tree, /) -> Dict[str, np.ndarray]:
    """Name every leaf of a tree by its path below ``prefix``."""
    if isinstance(tree, tuple):
        names = getattr(tree, "_fields", None) or [str(i) for i in range(len(tree))]
        tensors = {}
        for name, node in zip(names, tree):
            tensors.update(tree_to_tensors(f"{prefix}/{name}", node))
        return tensors
    return {prefix: np.asarray(tree)}


def tree_from_tensors(prefix, tensors: Mapping[str, Any], like, /):
    """Rebuild a tree from named tensors, validating every shape against ``like``."""
    if isinstance(like, tuple):
        names = getattr(like, "_fields", None) or [str(i) for i in range(len(like))]
        children = [
            tree_from_tensors(f"{prefix}/{name}", tensors, node)
            for name, node in zip(names, like)
        ]
        if hasattr(like, "_fields"):
            return type(like)(*children)
        return tuple(children)

    if prefix not in tensors:
        raise StructuralError("nnkit.checkpoint", f"missing tensor {prefix!r}")
    value = tensors[prefix]
    expected = tuple(np.shape(like))
    if tuple(value.shape) != expected:
        raise StructuralError(
            "nnkit.checkpoint",
            f"tensor {prefix!r} has dims {tuple(value.shape)}, expected {expected}",
        )
    if np.ndim(like) == 0 and not hasattr(like, "dtype"):
        return type(like)(value)
    return backend.numpy.asarray(value, dtype=backend.numpy.float64)


def save_checkpoint(path, tensors: Mapping[str, Any], /) -> None:
    """Write named tensors as little-endian float32 in the ``EOI1`` format.

    Layout: the magic bytes, then for each tensor its name length (uint32),
    its UTF-8 name, its rank (uint32), its dims (uint32 each)
    and its row-major values.
    """
    with open(path, "wb") as file:
        file.write(CHECKPOINT_MAGIC)
        for name, value in tensors.items():
            array = np.asarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            file.write(struct.pack("<I", len(encoded)))
            file.write(encoded)
            file.write(struct.pack("<I", array.ndim))
            file.write(struct.pack(f"<{array.ndim}I", *array.shape))
            file.write(array.tobytes(order="C"))


def load_checkpoint(path, /) -> Dict[str, np.ndarray]:
    """Read named tensors written by :func:`save_checkpoint`."""
    with open(path, "rb") as file:
        data = file.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise StructuralError("nnkit.checkpoint", f"{path} is not an EOI1 checkpoint")

    tensors = {}
    offset = len(CHECKPOINT_MAGIC)
    try:
        while offset < len(data):
            (name_length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_length].decode("utf-8")
            offset += name_length
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            tensors[name] = values.reshape(dims).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        raise StructuralError("nnkit.checkpoint", f"{path} is truncated") from err
    return tensors
