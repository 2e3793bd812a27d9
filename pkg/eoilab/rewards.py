"""Final-step rewards of the grid-world tasks.

Every task pays a single global reward at its final timestep.
The functions below compute it from the final environment state.
Keeping them apart from the task constructors lets several tasks share one
(Pac-Men and Windy Maze both count eaten dots).
"""


def total_eaten(state, /):
    """Number of dots eaten during the episode."""
    return float(state.eaten_count)


def min_room_eaten(state, /):
    """Smallest number of dots eaten in any single room."""
    if not state.per_room_eaten:
        raise ValueError("The minimum over rooms needs a layout with rooms.")
    return float(min(state.per_room_eaten))


def extinguished(state, /):
    """Number of burning cells put out during the episode."""
    return float(state.extinguished_count)
