"""Task constructors."""

from eoilab import rewards, transform
from eoilab.envs import _grid, _maps

_DOT_ACTIONS = (*_grid.MOVE_NAMES, "eat")
_FIRE_ACTIONS = (*_grid.MOVE_NAMES, "spray", "pump")


def pacmen(*, n_agents=4, horizon=30, dots_per_room=3, include_position=True):
    r"""Construct the Pac-Men task.

    Four agents start in a central chamber. Four rooms (north, east,
    south, west) hang off the chamber, each reached through a one-cell
    corridor, and every episode scatters ``dots_per_room`` dots uniformly
    over the floor of each room. Agents move to a neighbouring cell or eat
    the dot on their own cell.
    The global reward, paid at the final step, is the number of eaten dots.

    A room holds more dots than one agent needs to be busy for a whole
    episode, so the best joint behaviour sends every agent to its own room.
    """
    return _grid.GridTask(
        kind="pacmen",
        grid=_grid.parse_map(_maps.PACMEN),
        n_agents=n_agents,
        action_names=_DOT_ACTIONS,
        horizon=horizon,
        final_reward=rewards.total_eaten,
        dots_per_room=dots_per_room,
        include_position=include_position,
    )


def windy_maze(*, n_agents=2, horizon=15, wind_probability=0.4, include_position=True):
    r"""Construct the Windy Maze task.

    Two agents start at the bottom of a T-shaped maze; the two ends of the
    top bar hold one dot each. Right of the corridor junction a wind blows:
    there, with probability ``wind_probability``, whatever the agent does,
    it moves one cell to the right instead.
    The global reward, paid at the final step, is the number of eaten dots.

    The left dot is easy to collect. Collecting both needs the agents
    to split up, which shared-reward learners rarely discover.
    """
    grid = _grid.parse_map(_maps.WINDY_MAZE)
    return _grid.GridTask(
        kind="windy_maze",
        grid=grid,
        n_agents=n_agents,
        action_names=_DOT_ACTIONS,
        horizon=horizon,
        final_reward=rewards.total_eaten,
        fixed_dots=_bar_ends(grid),
        wind_probability=wind_probability,
        include_position=include_position,
    )


def _bar_ends(grid):
    # The top bar is the first row with open cells.
    top = min(y for _, y in _open_cells(grid))
    xs = sorted(x for x, y in _open_cells(grid) if y == top)
    return ((xs[0], top), (xs[-1], top))


def _open_cells(grid):
    return [
        (x, y)
        for y in range(grid.height)
        for x in range(grid.width)
        if not grid.is_wall(x, y)
    ]


def firefighters(*, n_agents=4, horizon=20, initial_water=4, include_position=True):
    r"""Construct the Firefighters task.

    Four firefighters start next to a burning area; a second burning area
    lies in the opposite corner and two short rivers run through the middle.
    The agents share a water tank holding ``initial_water`` units.
    Spraying on a burning cell puts the fire out and uses one unit;
    pumping on or next to a river adds one unit.
    The global reward, paid at the final step, is the number of extinguished cells.

    Putting out the nearby fire until the tank runs dry earns the
    initial water's worth of reward. Doing better takes a division of labor:
    some agents pump while others fight the fire, near and far.
    """
    return _grid.GridTask(
        kind="firefighters",
        grid=_grid.parse_map(_maps.FIREFIGHTERS),
        n_agents=n_agents,
        action_names=_FIRE_ACTIONS,
        horizon=horizon,
        final_reward=rewards.extinguished,
        initial_water=initial_water,
        include_position=include_position,
    )


sparse_pacmen = transform.replace_final_reward(
    pacmen,
    final_reward=rewards.min_room_eaten,
    kind="sparse_pacmen",
    short_summary="Construct the sparse-reward Pac-Men task "
    "(reward: fewest dots eaten in any room).",
)
