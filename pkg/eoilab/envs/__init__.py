r"""Grid-world tasks.

This module provides the cooperative grid worlds on which
individuality is studied. Each task is a decentralised, partially
observable game: :math:`n` agents act simultaneously, each sees a
:math:`5 \times 5` window around itself, and all of them receive a single
global reward at the final timestep :math:`T`.

The functions in this module construct tasks. They follow the rule

.. code:: python

    task = constructor()
    state, joint_obs = reset(task, seed=0)
    state, joint_obs, reward, done = step(task, state, actions, rng=rng)

where the constructor is, e.g., :code:`pacmen()` or :code:`firefighters()`.
Tasks and states are immutable; :func:`step` returns a new state.
All randomness (dot placement, wind) comes from the seed or generator
passed in, so equal seeds replay equal episodes.

Action indices are ``0 up, 1 down, 2 left, 3 right`` followed by
``4 eat`` (dot tasks) or ``4 spray, 5 pump`` (Firefighters).
"""

from eoilab.envs._grid import (
    CHANNELS,
    VIEW,
    EnvState,
    GridMap,
    GridTask,
    initial_state,
    move_agents,
    observe,
    observe_all,
    occupancy_heatmap,
    parse_map,
    render,
    reset,
    step,
)
from eoilab.envs._tasks import firefighters, pacmen, sparse_pacmen, windy_maze
from eoilab.errors import ConfigError

KINDS = {
    "pacmen": pacmen,
    "sparse_pacmen": sparse_pacmen,
    "windy_maze": windy_maze,
    "firefighters": firefighters,
}


def make(kind, /, **kwargs) -> GridTask:
    """Construct a task by name."""
    try:
        constructor = KINDS[kind]
    except KeyError:
        raise ConfigError(
            f"Unknown env kind {kind!r}; choose from {sorted(KINDS)}."
        ) from None
    return constructor(**kwargs)
