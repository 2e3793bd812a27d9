"""Authored grid layouts.

Legend: ``#`` wall, ``.`` floor, ``~`` river, ``F`` fire, ``S`` spawn,
``>`` floor inside the wind region, ``0``-``3`` floor of room 0-3.
"""

# Four rooms (0 north, 1 east, 2 south, 3 west) around a central
# spawn chamber, each joined to it by a one-cell corridor.
PACMEN = """
###############
#####00000#####
#####00000#####
#####00000#####
#######.#######
#333###.###111#
#333##...##111#
#333...S...111#
#333##...##111#
#333###.###111#
#######.#######
#####22222#####
#####22222#####
#####22222#####
###############
"""

# A T-shaped maze. The wind blows right of the corridor junction.
WINDY_MAZE = """
###########
#.....>>>>#
#####.#####
#####.#####
#####.#####
#####.#####
#####S#####
###########
"""

# Burning area A next to the spawn, burning area B in the opposite
# corner, two river segments in between.
FIREFIGHTERS = """
############
#FFF.......#
#FFF.......#
#.S........#
#..........#
#...~~~....#
#..........#
#.....~~~..#
#..........#
#.......FFF#
#.......FFF#
############
"""
