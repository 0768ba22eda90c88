"""4-connected grid world, BFS geometry, and scalar field superposition.

The field law is linear decay over BFS distance on free cells:
an emitter of amplitude A contributes max(0, A - d) at distance d, attraction
positive, repulsion negative, superposition additive.  Unreachable cells get
no contribution.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from ..errors import EmitterOnBlockedCell

Cell = tuple[int, int]


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    blocked: frozenset = frozenset()

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.blocked

    def cells(self):
        for y in range(self.height):
            for x in range(self.width):
                yield (x, y)

    def free_cells(self):
        return [c for c in self.cells() if c not in self.blocked]

    def neighbors4(self, cell: Cell) -> list[Cell]:
        x, y = cell
        candidates = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
        return sorted(c for c in candidates if self.is_free(c))


def bfs_distances(grid: GridMap, start: Cell, obstacles=frozenset()) -> dict[Cell, int]:
    """BFS distance map over free cells, treating `obstacles` as extra walls.
    The start cell itself is never treated as an obstacle."""
    if not grid.is_free(start):
        return {}
    dist = {start: 0}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for nxt in grid.neighbors4(cell):
            if nxt in dist or nxt in obstacles:
                continue
            dist[nxt] = dist[cell] + 1
            queue.append(nxt)
    return dist


def bfs_path(grid: GridMap, start: Cell, goal: Cell, obstacles=frozenset()):
    """Lexicographically smallest shortest path start->goal, or None.

    Determinism matters: neighbors are explored in sorted order and the first
    parent assignment wins, so equal-length paths always resolve the same way.
    """
    if not grid.is_free(start) or not grid.is_free(goal) or goal in obstacles:
        return None
    if start == goal:
        return [start]
    parent = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for nxt in grid.neighbors4(cell):
            if nxt in parent or nxt in obstacles:
                continue
            parent[nxt] = cell
            if nxt == goal:
                path = [nxt]
                while parent[path[-1]] is not None:
                    path.append(parent[path[-1]])
                return list(reversed(path))
            queue.append(nxt)
    return None


def compute_fields(grid: GridMap, attractors, repulsors) -> dict[Cell, float]:
    """Net potential per free cell.

    attractors / repulsors: iterables of (cell, amplitude).  Raises
    EmitterOnBlockedCell for any emitter outside the free cell set.
    """
    field = {cell: 0.0 for cell in grid.free_cells()}
    for sign, emitters in ((1.0, attractors), (-1.0, repulsors)):
        for cell, amplitude in emitters:
            if not grid.is_free(cell):
                raise EmitterOnBlockedCell(f"emitter at {cell} is blocked or out of bounds")
            for reached, d in bfs_distances(grid, cell).items():
                contribution = amplitude - d
                if contribution > 0:
                    field[reached] += sign * contribution
    return field
