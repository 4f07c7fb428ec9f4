"""Deterministic 2-D gridworld shared by HarvestPatch and Cleanup.

All agents act simultaneously. A step resolves, in order: movement and
rotation (randomized priority order drawn from the world's generator, losers
stay put), beams (fired from post-movement poses), then the environment's
resource dynamics. Observations are axis-aligned 15x15 windows centered on
the observing avatar; cells beyond the map edge read as ``PAD``.

Subclasses hook into ``_on_enter`` (avatar moved onto a cell), ``_on_clean``
(clean beam fired), ``_tick`` (per-step dynamics) and ``_reset_resources``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from svo_marl.maps import OPEN, ORCHARD, RIVER, WALL, MapLayout

VIEW_RADIUS = 7
VIEW_SIZE = 2 * VIEW_RADIUS + 1

PUNISH_REWARD = -50
PUNISH_COST = -1
APPLE_REWARD = 1


class ConfigError(ValueError):
    """Illegal action, mismatched joint action or inconsistent world setup."""


class Action(IntEnum):
    FORWARD = 0
    BACKWARD = 1
    STRAFE_LEFT = 2
    STRAFE_RIGHT = 3
    ROTATE_LEFT = 4
    ROTATE_RIGHT = 5
    NOOP = 6
    PUNISH = 7
    CLEAN = 8


class Orientation(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


# (drow, dcol) per orientation
DIRECTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))
# absolute heading offset for each movement action, relative to facing
_MOVE_OFFSET = (0, 2, 3, 1)


class Cell(IntEnum):
    """Observation categories. Avatar ``i`` renders as ``AGENT + i``."""

    PAD = 0
    OPEN = 1
    WALL = 2
    APPLE = 3
    RIVER = 4
    POLLUTION = 5
    AGENT = 6


MAX_AGENTS = 10

# fixed RGB palette; row index = Cell code
PALETTE = np.array(
    [
        (0, 0, 0),        # PAD
        (180, 180, 180),  # OPEN
        (95, 95, 95),     # WALL
        (0, 220, 40),     # APPLE
        (60, 120, 255),   # RIVER
        (120, 90, 40),    # POLLUTION
        (255, 0, 0),
        (255, 160, 0),
        (255, 255, 0),
        (0, 255, 255),
        (255, 0, 255),
        (140, 0, 255),
        (255, 255, 255),
        (255, 120, 160),
        (0, 120, 60),
        (160, 255, 160),
    ],
    dtype=np.uint8,
)
PALETTE_UNIT = PALETTE.astype(np.float64) / 255.0

_TERRAIN_CELL = {OPEN: Cell.OPEN, WALL: Cell.WALL, ORCHARD: Cell.OPEN, RIVER: Cell.RIVER}


@dataclass(slots=True)
class AgentAvatar:
    agent_id: int
    position: tuple[int, int]
    orientation: int
    last_action: int = Action.NOOP


@dataclass(frozen=True, slots=True)
class Observation:
    """Egocentric window of cell categories plus the avatar's heading."""

    window: np.ndarray
    orientation: int

    @property
    def rgb(self) -> np.ndarray:
        """(15, 15, 3) float colors in [0, 1]."""
        return PALETTE_UNIT[self.window]


@dataclass(frozen=True, slots=True)
class BeamResult:
    origin: int
    kind: str
    hit_cells: tuple[tuple[int, int], ...]
    hit_agents: tuple[int, ...]


@dataclass
class EventLog:
    """Per-episode behavioral events consumed by the metrics module."""

    punishments: list[tuple[int, int, int]] = field(default_factory=list)  # (t, shooter, target)
    punish_fires: list[tuple[int, int]] = field(default_factory=list)
    endangered_eaten: list[tuple[int, int, int]] = field(default_factory=list)  # (t, agent, patch)
    cleans: list[tuple[int, int, int]] = field(default_factory=list)  # (t, agent, cells_cleaned)
    transitions: list[tuple[int, int, int]] = field(default_factory=list)  # (t, agent, apples in view)


class GridWorld:
    """Gridworld substrate. Use a subclass (HarvestPatch, Cleanup) to play."""

    env_id = "grid"
    n_actions = 8

    def __init__(
        self,
        layout: MapLayout,
        n_agents: int,
        seed: int = 0,
        *,
        punish_length: int = 10,
        clean_length: int = 3,
        punish_timeout: int = 0,
    ):
        if not 1 <= n_agents <= MAX_AGENTS:
            raise ConfigError(f"n_agents must be in [1, {MAX_AGENTS}], got {n_agents}")
        if n_agents > len(layout.spawn_points):
            raise ConfigError(
                f"map has {len(layout.spawn_points)} spawn points, need {n_agents}"
            )
        if punish_length < 0 or clean_length < 0 or punish_timeout < 0:
            raise ConfigError("beam lengths and punish_timeout must be non-negative")
        self.layout = layout
        self.n_agents = n_agents
        self.height, self.width = layout.terrain.shape
        self.cells = layout.terrain
        self.punish_length = punish_length
        self.clean_length = clean_length
        self.punish_timeout = punish_timeout
        self._passable = [
            [layout.terrain[r, c] != WALL for c in range(self.width)]
            for r in range(self.height)
        ]
        self.reset(seed)

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int) -> None:
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self.step_index = 0
        pad = VIEW_RADIUS
        base = np.full((self.height + 2 * pad, self.width + 2 * pad), Cell.PAD, dtype=np.int8)
        for code, cell in _TERRAIN_CELL.items():
            base[pad:-pad, pad:-pad][self.cells == code] = cell
        self._base = base
        self.canvas = base.copy()
        self._occupant: dict[tuple[int, int], int] = {}
        self._reset_resources()

        spawns = self.layout.spawn_points
        picks = self.rng.permutation(len(spawns))[: self.n_agents]
        orients = self.rng.integers(0, 4, size=self.n_agents)
        self.avatars = [
            AgentAvatar(i, spawns[int(k)], int(o)) for i, (k, o) in enumerate(zip(picks, orients))
        ]
        for av in self.avatars:
            self._occupant[av.position] = av.agent_id
            r, c = av.position
            self.canvas[r + pad, c + pad] = Cell.AGENT + av.agent_id
        self._frozen_until = [0] * self.n_agents
        self.returns = [0] * self.n_agents
        self.events = EventLog()
        self.action_log = bytearray()
        self._after_reset()

    def _reset_resources(self) -> None:
        pass

    def _after_reset(self) -> None:
        pass

    # -- resource rendering helpers ----------------------------------------

    def _set_base(self, pos: tuple[int, int], cell: int) -> None:
        r, c = pos[0] + VIEW_RADIUS, pos[1] + VIEW_RADIUS
        self._base[r, c] = cell
        if pos not in self._occupant:
            self.canvas[r, c] = cell

    @property
    def resources(self) -> np.ndarray:
        """(H, W) Cell codes for the resource layer (APPLE / POLLUTION / other)."""
        p = VIEW_RADIUS
        return self._base[p:-p, p:-p].copy()

    def is_passable(self, pos: tuple[int, int]) -> bool:
        r, c = pos
        return 0 <= r < self.height and 0 <= c < self.width and self._passable[r][c]

    def occupant(self, pos: tuple[int, int]) -> int | None:
        return self._occupant.get(pos)

    def place_avatar(self, agent_id: int, pos: tuple[int, int], orientation: int | None = None) -> None:
        """Teleport an avatar (scenario construction and tests). No rewards are given."""
        pos = (int(pos[0]), int(pos[1]))
        if not self.is_passable(pos):
            raise ConfigError(f"cannot place avatar on impassable cell {pos}")
        other = self._occupant.get(pos)
        if other is not None and other != agent_id:
            raise ConfigError(f"cell {pos} is occupied by avatar {other}")
        av = self.avatars[agent_id]
        p = VIEW_RADIUS
        r, c = av.position
        del self._occupant[(r, c)]
        self.canvas[r + p, c + p] = self._base[r + p, c + p]
        av.position = pos
        self._occupant[pos] = agent_id
        self.canvas[pos[0] + p, pos[1] + p] = Cell.AGENT + agent_id
        if orientation is not None:
            av.orientation = int(orientation) & 3

    def resource_at(self, pos: tuple[int, int]) -> int:
        """Cell code of the terrain/resource layer at ``pos`` (avatars not drawn)."""
        return int(self._base[pos[0] + VIEW_RADIUS, pos[1] + VIEW_RADIUS])

    # -- stepping ----------------------------------------------------------

    def _check_actions(self, joint_action) -> list[int]:
        if len(joint_action) != self.n_agents:
            raise ConfigError(
                f"joint action has {len(joint_action)} entries, world has {self.n_agents} avatars"
            )
        acts = [int(a) for a in joint_action]
        for i, a in enumerate(acts):
            if not 0 <= a < self.n_actions:
                raise ConfigError(
                    f"action {a} for agent {i} out of range for {self.env_id} "
                    f"({self.n_actions} actions)"
                )
        return acts

    def step(self, joint_action) -> tuple[list[int], list[Observation]]:
        """Advance one step. Returns per-agent extrinsic rewards and observations."""
        acts = self._check_actions(joint_action)
        self.action_log += bytes(acts)
        n = self.n_agents
        t = self.step_index
        if self.punish_timeout:
            acts = [Action.NOOP if self._frozen_until[i] > t else a for i, a in enumerate(acts)]
        rewards = [0] * n
        pad = VIEW_RADIUS
        occ = self._occupant
        canvas = self.canvas
        base = self._base

        for i in self.rng.permutation(n).tolist():
            a = acts[i]
            av = self.avatars[i]
            av.last_action = a
            if a < 4:
                dr, dc = DIRECTIONS[(av.orientation + _MOVE_OFFSET[a]) & 3]
                r, c = av.position
                tr, tc = r + dr, c + dc
                if (
                    0 <= tr < self.height
                    and 0 <= tc < self.width
                    and self._passable[tr][tc]
                    and (tr, tc) not in occ
                ):
                    del occ[(r, c)]
                    canvas[r + pad, c + pad] = base[r + pad, c + pad]
                    av.position = (tr, tc)
                    occ[(tr, tc)] = i
                    canvas[tr + pad, tc + pad] = Cell.AGENT + i
                    rewards[i] += self._on_enter(i, (tr, tc))
            elif a == Action.ROTATE_LEFT:
                av.orientation = (av.orientation + 3) & 3
            elif a == Action.ROTATE_RIGHT:
                av.orientation = (av.orientation + 1) & 3

        for i, a in enumerate(acts):
            if a == Action.PUNISH:
                beam = self.resolve_beam(i, "punish")
                rewards[i] += PUNISH_COST
                self.events.punish_fires.append((t, i))
                for j in beam.hit_agents:
                    rewards[j] += PUNISH_REWARD
                    self.events.punishments.append((t, i, j))
                    if self.punish_timeout:
                        self._frozen_until[j] = t + 1 + self.punish_timeout
            elif a == Action.CLEAN:
                self._on_clean(i, self.resolve_beam(i, "clean"))

        self._tick()
        self.step_index = t + 1
        ret = self.returns
        for i in range(n):
            ret[i] += rewards[i]
        return rewards, [self.observe(i) for i in range(n)]

    def _on_enter(self, agent: int, pos: tuple[int, int]) -> int:
        return 0

    def _on_clean(self, agent: int, beam: BeamResult) -> None:
        pass

    def _tick(self) -> None:
        pass

    # -- beams and observations --------------------------------------------

    def resolve_beam(self, origin: int, kind: str) -> BeamResult:
        """Trace a single-cell-wide ray from the cell in front of ``origin``.

        Punish beams stop at walls and at the first avatar (which is hit);
        clean beams stop only at walls.
        """
        if kind == "punish":
            length = self.punish_length
        elif kind == "clean":
            length = self.clean_length
        else:
            raise ConfigError(f"unknown beam kind {kind!r}")
        av = self.avatars[origin]
        dr, dc = DIRECTIONS[av.orientation]
        r, c = av.position
        cells = []
        hits = []
        for _ in range(length):
            r += dr
            c += dc
            if not (0 <= r < self.height and 0 <= c < self.width and self._passable[r][c]):
                break
            cells.append((r, c))
            if kind == "punish":
                j = self._occupant.get((r, c))
                if j is not None:
                    hits.append(j)
                    break
        return BeamResult(origin, kind, tuple(cells), tuple(hits))

    def observe(self, agent_id: int) -> Observation:
        if not 0 <= agent_id < self.n_agents:
            raise ConfigError(f"invalid agent_id {agent_id}")
        av = self.avatars[agent_id]
        r, c = av.position
        return Observation(self.canvas[r : r + VIEW_SIZE, c : c + VIEW_SIZE].copy(), av.orientation)

    def observe_all(self) -> list[Observation]:
        return [self.observe(i) for i in range(self.n_agents)]

    def count_in_view(self, agent_id: int, cell: int) -> int:
        r, c = self.avatars[agent_id].position
        return int(np.count_nonzero(self._base[r : r + VIEW_SIZE, c : c + VIEW_SIZE] == cell))

    # -- identity ----------------------------------------------------------

    def state_hash(self) -> str:
        """SHA-256 over everything that determines future evolution."""
        h = hashlib.sha256()
        h.update(self.env_id.encode())
        h.update(np.int64(self.step_index).tobytes())
        for av in self.avatars:
            h.update(np.array([*av.position, av.orientation], dtype=np.int64).tobytes())
        h.update(self._base.tobytes())
        h.update(np.array(self._frozen_until + self.returns, dtype=np.int64).tobytes())
        h.update(json.dumps(self.rng.bit_generator.state, sort_keys=True).encode())
        self._hash_extra(h)
        return h.hexdigest()

    def _hash_extra(self, h) -> None:
        pass

    def summary(self) -> dict:
        """Compact JSON-able state description used by replay dumps."""
        return {
            "t": self.step_index,
            "positions": [list(av.position) for av in self.avatars],
            "orientations": [av.orientation for av in self.avatars],
            "returns": list(self.returns),
        }
