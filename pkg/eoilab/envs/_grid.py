"""Grid maps, environment state and the shared grid-world dynamics."""

import collections
from typing import Callable, FrozenSet, NamedTuple, Sequence, Tuple

import numpy as np

from eoilab.errors import StructuralError

WALL, FLOOR, RIVER, FIRE, SPAWN, WINDY = range(6)

_GLYPHS = {
    "#": WALL,
    ".": FLOOR,
    "~": RIVER,
    "F": FIRE,
    "S": SPAWN,
    ">": WINDY,
}
_ROOM_GLYPHS = "0123"

UP, DOWN, LEFT, RIGHT = range(4)
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}
MOVE_NAMES = ("up", "down", "left", "right")

VIEW = 5
"""Side length of the local observation window."""

CHANNELS = 4
"""Observation channels: wall, dot-or-fire, river, other agent."""


class GridMap(NamedTuple):
    """A parsed ASCII layout.

    ``cells`` holds one terrain tag per cell (row-major, ``cells[y, x]``),
    ``rooms`` the room index of every cell (``-1`` outside rooms).
    """

    width: int
    height: int
    cells: np.ndarray
    rooms: np.ndarray

    @property
    def n_rooms(self) -> int:
        """Number of rooms in the layout."""
        return int(self.rooms.max()) + 1

    def is_wall(self, x, y, /) -> bool:
        """Whether a cell is a wall or lies outside the map."""
        if not (0 <= x < self.width and 0 <= y < self.height):
            return True
        return self.cells[y, x] == WALL

    def cells_with(self, tag, /) -> Tuple[Tuple[int, int], ...]:
        """All ``(x, y)`` cells carrying a terrain tag, in row-major order."""
        ys, xs = np.nonzero(self.cells == tag)
        return tuple((int(x), int(y)) for y, x in zip(ys, xs))

    def room_cells(self, room, /) -> Tuple[Tuple[int, int], ...]:
        """All ``(x, y)`` cells of a room, in row-major order."""
        ys, xs = np.nonzero(self.rooms == room)
        return tuple((int(x), int(y)) for y, x in zip(ys, xs))


class EnvState(NamedTuple):
    """Complete state of a grid-world episode."""

    positions: Tuple[Tuple[int, int], ...]
    dots: FrozenSet[Tuple[int, int]]
    fires: FrozenSet[Tuple[int, int]]
    water_tank: int
    step_count: int
    per_room_eaten: Tuple[int, ...]
    extinguished_count: int
    eaten_count: int


class GridTask(NamedTuple):
    """A grid-world task: layout, agents, actions, horizon and final reward."""

    kind: str
    grid: GridMap
    n_agents: int
    action_names: Tuple[str, ...]
    horizon: int
    final_reward: Callable[[EnvState], float]
    dots_per_room: int = 0
    fixed_dots: Tuple[Tuple[int, int], ...] = ()
    initial_water: int = 0
    wind_probability: float = 0.0
    include_position: bool = True

    @property
    def n_actions(self) -> int:
        """Size of the per-agent action space."""
        return len(self.action_names)

    @property
    def obs_dim(self) -> int:
        """Width of an observation vector."""
        return VIEW * VIEW * CHANNELS + (2 if self.include_position else 0)


def parse_map(layout, /) -> GridMap:
    """Parse an ASCII layout and validate it.

    Border cells must be walls and every open cell must be reachable
    from a spawn cell.
    """
    rows = [line for line in layout.strip("\n").splitlines() if line.strip()]
    width = len(rows[0])
    if any(len(row) != width for row in rows):
        raise ValueError("The layout is not rectangular.")
    height = len(rows)

    cells = np.full((height, width), WALL, dtype=np.int64)
    rooms = np.full((height, width), -1, dtype=np.int64)
    for y, row in enumerate(rows):
        for x, glyph in enumerate(row):
            if glyph in _ROOM_GLYPHS:
                cells[y, x] = FLOOR
                rooms[y, x] = _ROOM_GLYPHS.index(glyph)
            elif glyph in _GLYPHS:
                cells[y, x] = _GLYPHS[glyph]
            else:
                raise ValueError(f"Unknown glyph {glyph!r} at ({x}, {y}).")

    border = np.concatenate([cells[0], cells[-1], cells[:, 0], cells[:, -1]])
    if np.any(border != WALL):
        raise ValueError("Border cells must be walls.")

    grid = GridMap(width=width, height=height, cells=cells, rooms=rooms)
    spawns = grid.cells_with(SPAWN)
    if not spawns:
        raise ValueError("The layout has no spawn cell.")
    reachable = _flood_fill(grid, spawns)
    open_cells = set(zip(*np.nonzero(cells.T != WALL)))
    if {(int(x), int(y)) for x, y in open_cells} - reachable:
        raise ValueError("Some open cells cannot be reached from a spawn cell.")
    return grid


def _flood_fill(grid, starts):
    seen = set(starts)
    queue = collections.deque(starts)
    while queue:
        x, y = queue.popleft()
        for dx, dy in _MOVES.values():
            nxt = (x + dx, y + dy)
            if nxt not in seen and not grid.is_wall(*nxt):
                seen.add(nxt)
                queue.append(nxt)
    return seen


# Dynamics


def initial_state(task: GridTask, /, *, seed) -> EnvState:
    """Place agents on the spawn cells and dots or fires on the map.

    ``seed`` is an integer or a :class:`numpy.random.Generator`.
    """
    rng = np.random.default_rng(seed)
    grid = task.grid
    spawns = grid.cells_with(SPAWN)
    positions = tuple(spawns[i % len(spawns)] for i in range(task.n_agents))

    dots = set(task.fixed_dots)
    n_rooms = grid.n_rooms
    if task.dots_per_room:
        for room in range(n_rooms):
            cells = grid.room_cells(room)
            picks = rng.choice(len(cells), size=task.dots_per_room, replace=False)
            dots.update(cells[int(k)] for k in sorted(picks))

    return EnvState(
        positions=positions,
        dots=frozenset(dots),
        fires=frozenset(grid.cells_with(FIRE)),
        water_tank=task.initial_water,
        step_count=0,
        per_room_eaten=(0,) * n_rooms,
        extinguished_count=0,
        eaten_count=0,
    )


def reset(task: GridTask, /, *, seed):
    """Start an episode; returns the state and the joint observation."""
    state = initial_state(task, seed=seed)
    return state, observe_all(task, state)


def move_agents(task: GridTask, positions: Sequence, actions: Sequence, /, *, rng):
    """Resolve the movement part of a joint action.

    Inside the wind region, with probability ``task.wind_probability``
    an agent's action is replaced by a right-move, whatever it was.
    Moves into walls leave the agent in place.
    Returns the new positions and, per agent, whether the wind took over.
    """
    grid = task.grid
    new_positions, blown = [], []
    for (x, y), action in zip(positions, actions):
        move = action if action in _MOVES else None
        gust = False
        if task.wind_probability and grid.cells[y, x] == WINDY:
            gust = bool(rng.random() < task.wind_probability)
            if gust:
                move = RIGHT
        if move is not None:
            dx, dy = _MOVES[move]
            if not grid.is_wall(x + dx, y + dy):
                x, y = x + dx, y + dy
        new_positions.append((x, y))
        blown.append(gust)
    return tuple(new_positions), tuple(blown)


def step(task: GridTask, state: EnvState, actions: Sequence, /, *, rng):
    """Advance an episode by one joint action.

    Returns the next state, the joint observation, the global reward
    and whether the episode is over. The reward is zero except at the
    final step, where it is ``task.final_reward`` of the final state.
    Interactions resolve in ascending agent order.
    """
    actions = [int(a) for a in actions]
    if len(actions) != task.n_agents or not all(
        0 <= a < task.n_actions for a in actions
    ):
        raise StructuralError(
            "envs.step", f"invalid joint action {actions} for {task.kind}"
        )
    if state.step_count >= task.horizon:
        raise StructuralError("envs.step", "the episode is already over")

    positions, blown = move_agents(task, state.positions, actions, rng=rng)

    grid = task.grid
    dots, fires = set(state.dots), set(state.fires)
    water_tank = state.water_tank
    per_room_eaten = list(state.per_room_eaten)
    eaten_count, extinguished_count = state.eaten_count, state.extinguished_count
    for agent, (action, pos) in enumerate(zip(actions, positions)):
        if blown[agent] or action < len(MOVE_NAMES):
            continue
        name = task.action_names[action]
        if name == "eat" and pos in dots:
            dots.remove(pos)
            eaten_count += 1
            room = grid.rooms[pos[1], pos[0]]
            if room >= 0:
                per_room_eaten[room] += 1
        elif name == "spray" and pos in fires and water_tank > 0:
            fires.remove(pos)
            water_tank -= 1
            extinguished_count += 1
        elif name == "pump" and _near_river(grid, pos):
            water_tank += 1

    next_state = EnvState(
        positions=positions,
        dots=frozenset(dots),
        fires=frozenset(fires),
        water_tank=water_tank,
        step_count=state.step_count + 1,
        per_room_eaten=tuple(per_room_eaten),
        extinguished_count=extinguished_count,
        eaten_count=eaten_count,
    )
    done = next_state.step_count == task.horizon
    reward = task.final_reward(next_state) if done else 0.0
    return next_state, observe_all(task, next_state), reward, done


def _near_river(grid, pos):
    x, y = pos
    neighbours = [(x, y)] + [(x + dx, y + dy) for dx, dy in _MOVES.values()]
    return any(
        not grid.is_wall(*cell) and grid.cells[cell[1], cell[0]] == RIVER
        for cell in neighbours
    )


# Observations


def observe(task: GridTask, state: EnvState, agent, /) -> np.ndarray:
    """Local observation of one agent.

    A 5x5 window centred on the agent with one-hot channels
    (wall, dot-or-fire, river, other agent), flattened row-major with the
    channels last, followed by the normalised coordinates ``x / width``
    and ``y / height`` if the task includes positions.
    Cells outside the map read as walls. The vector carries no agent identity.
    """
    if not 0 <= agent < task.n_agents:
        raise StructuralError("envs.observe", f"agent {agent} >= {task.n_agents}")
    return _observation(task, _padded_layers(task, state), state, agent)


def observe_all(task: GridTask, state: EnvState, /) -> np.ndarray:
    """Observations of all agents, shape ``(n_agents, obs_dim)``."""
    layers = _padded_layers(task, state)
    return np.stack(
        [_observation(task, layers, state, i) for i in range(task.n_agents)]
    )


def _padded_layers(task, state):
    grid = task.grid
    pad = VIEW // 2
    layers = np.zeros((CHANNELS, grid.height + 2 * pad, grid.width + 2 * pad))
    layers[0] = 1.0
    layers[0, pad:-pad, pad:-pad] = grid.cells == WALL
    layers[2, pad:-pad, pad:-pad] = grid.cells == RIVER
    for x, y in state.dots | state.fires:
        layers[1, y + pad, x + pad] = 1.0
    for x, y in state.positions:
        layers[3, y + pad, x + pad] += 1.0
    return layers


def _observation(task, layers, state, agent):
    grid = task.grid
    x, y = state.positions[agent]
    window = layers[:, y : y + VIEW, x : x + VIEW].copy()
    # The agent does not see itself.
    window[3, VIEW // 2, VIEW // 2] -= 1.0
    window[3] = np.minimum(window[3], 1.0)
    features = window.transpose(1, 2, 0).ravel()
    if task.include_position:
        features = np.concatenate([features, [x / grid.width, y / grid.height]])
    return features


# Diagnostics


def occupancy_heatmap(task: GridTask, position_logs: Sequence, /) -> np.ndarray:
    """Count cell visits per agent.

    ``position_logs`` holds one sequence of joint positions per episode
    (the pre-action positions of every step).
    Returns an array of shape ``(n_agents, height, width)``.
    """
    if not position_logs:
        raise ValueError("The occupancy heatmap needs at least one episode.")
    grid = task.grid
    counts = np.zeros((task.n_agents, grid.height, grid.width), dtype=np.int64)
    for episode in position_logs:
        for joint_positions in episode:
            for agent, (x, y) in enumerate(joint_positions):
                counts[agent, y, x] += 1
    return counts


def render(task: GridTask, state: EnvState, /) -> str:
    """Print the current state as ASCII art.

    Agents show as their index (``@`` when several share a cell),
    dots as ``*``, burning cells as ``F``.
    """
    grid = task.grid
    inverse = {tag: glyph for glyph, tag in _GLYPHS.items()}
    canvas = [[inverse[int(tag)] for tag in row] for row in grid.cells]
    for y, row in enumerate(canvas):
        for x, glyph in enumerate(row):
            if glyph in "FS":
                row[x] = "."
            if grid.rooms[y, x] >= 0:
                row[x] = "."
    for x, y in state.fires:
        canvas[y][x] = "F"
    for x, y in state.dots:
        canvas[y][x] = "*"
    for agent, (x, y) in enumerate(state.positions):
        occupied = canvas[y][x].isdigit() or canvas[y][x] == "@"
        canvas[y][x] = "@" if occupied else str(agent % 10)
    lines = ["".join(row) for row in canvas]
    status = f"step {state.step_count}/{task.horizon}"
    status += f"  eaten {state.eaten_count}"
    if task.initial_water or "pump" in task.action_names:
        status += f"  tank {state.water_tank}  extinguished {state.extinguished_count}"
    return "\n".join(lines + [status])
