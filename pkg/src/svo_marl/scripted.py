"""Rule-based policies used as test oracles and throughput drivers.

Scripted policies share the neural policy's acting interface but read the
world directly (``begin_episode`` hands them the live GridWorld). They never
learn; ``log_prob`` is the log-probability of the chosen action under the
rule (0 for deterministic choices) and ``value`` is always 0.

Kinds:

    random                 uniform over the environment's actions
    greedy-harvester       walks a shortest path to the nearest apple
    sustainable-harvester  like greedy, but never eats an apple that could
                           leave its patch with ``reserve`` or fewer apples
    dedicated-cleaner      (Cleanup only) walks to pollution and cleans it
"""

from __future__ import annotations

import math
import weakref
from collections import deque

import numpy as np

from svo_marl.grid import DIRECTIONS, VIEW_RADIUS, Action, Cell, ConfigError, GridWorld, Observation

SCRIPTED_KINDS = ("random", "greedy-harvester", "sustainable-harvester", "dedicated-cleaner")

UNREACHABLE = np.iinfo(np.int32).max

# relative heading (absolute - facing) % 4 -> movement action
_REL_MOVE = (Action.FORWARD, Action.STRAFE_RIGHT, Action.BACKWARD, Action.STRAFE_LEFT)


def move_action(direction: int, orientation: int) -> int:
    """Movement action that displaces an avatar facing ``orientation`` along ``direction``."""
    return int(_REL_MOVE[(direction - orientation) % 4])


def distance_field(world: GridWorld, targets, blocked=frozenset()) -> np.ndarray:
    """Multi-source BFS step distances from every cell to the nearest target.

    Walls and ``blocked`` cells are impassable; avatars are ignored (they
    move). Unreachable cells hold ``UNREACHABLE``.
    """
    H, W = world.height, world.width
    dist = np.full((H, W), UNREACHABLE, dtype=np.int32)
    q = deque()
    for pos in targets:
        if pos not in blocked:
            dist[pos] = 0
            q.append(pos)
    passable = world._passable
    while q:
        r, c = q.popleft()
        d = dist[r, c] + 1
        for dr, dc in DIRECTIONS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < H and 0 <= nc < W and passable[nr][nc] and dist[nr, nc] == UNREACHABLE:
                if (nr, nc) in blocked:
                    continue
                dist[nr, nc] = d
                q.append((nr, nc))
    return dist


# per-world cache so all scripted agents in an arena share one BFS per step
_FIELD_CACHE: "weakref.WeakKeyDictionary[GridWorld, dict]" = weakref.WeakKeyDictionary()


def _cached(world: GridWorld, key: str, build):
    slot = _FIELD_CACHE.get(world)
    # world.events is replaced on every reset, so it identifies the episode
    if slot is None or slot["t"] != world.step_index or slot["episode"] is not world.events:
        slot = {"t": world.step_index, "episode": world.events}
        _FIELD_CACHE[world] = slot
    if key not in slot:
        slot[key] = build()
    return slot[key]


def apple_positions(world: GridWorld) -> list[tuple[int, int]]:
    p = VIEW_RADIUS
    rows, cols = np.nonzero(world._base[p:-p, p:-p] == Cell.APPLE)
    return list(zip(rows.tolist(), cols.tolist()))


def pollution_positions(world: GridWorld) -> list[tuple[int, int]]:
    p = VIEW_RADIUS
    rows, cols = np.nonzero(world._base[p:-p, p:-p] == Cell.POLLUTION)
    return list(zip(rows.tolist(), cols.tolist()))


class ScriptedPolicy:
    kind = "scripted"

    def __init__(self, n_actions: int):
        self.n_actions = n_actions
        self.world: GridWorld | None = None
        self.agent = 0

    def initial_state(self):
        return None

    def begin_episode(self, world: GridWorld, agent_index: int) -> None:
        if world.n_actions != self.n_actions:
            raise ConfigError(
                f"{self.kind} policy built for {self.n_actions} actions, world has {world.n_actions}"
            )
        self.world = world
        self.agent = agent_index

    def act(self, obs: Observation, state, rng: np.random.Generator, greedy: bool = False):
        a, logp = self._choose(rng)
        return int(a), logp, 0.0, state

    def _choose(self, rng):
        raise NotImplementedError

    # shared helpers ------------------------------------------------------

    def _descend(self, dist: np.ndarray, rng, avoid=frozenset()):
        """Step to a free neighbor that lowers the distance field, else None."""
        w = self.world
        av = w.avatars[self.agent]
        r, c = av.position
        here = dist[r, c]
        best, best_d = [], here
        for d, (dr, dc) in enumerate(DIRECTIONS):
            pos = (r + dr, c + dc)
            if not w.is_passable(pos) or pos in avoid:
                continue
            occ = w.occupant(pos)
            if occ is not None and occ != self.agent:
                continue
            nd = dist[pos]
            if nd < best_d:
                best, best_d = [d], nd
            elif nd == best_d and best and nd < here:
                best.append(d)
        if not best:
            return None
        d = best[0] if len(best) == 1 else best[int(rng.integers(len(best)))]
        return move_action(d, av.orientation)

    def _wander(self, rng, avoid=frozenset()):
        """Random step into a free, non-avoided neighbor; NOOP if boxed in."""
        w = self.world
        av = w.avatars[self.agent]
        r, c = av.position
        options = []
        for d, (dr, dc) in enumerate(DIRECTIONS):
            pos = (r + dr, c + dc)
            if w.is_passable(pos) and pos not in avoid and w.occupant(pos) is None:
                options.append(d)
        if not options:
            return Action.NOOP
        return move_action(options[int(rng.integers(len(options)))], av.orientation)


class RandomPolicy(ScriptedPolicy):
    kind = "random"

    def _choose(self, rng):
        return int(rng.integers(self.n_actions)), -math.log(self.n_actions)


class GreedyHarvester(ScriptedPolicy):
    kind = "greedy-harvester"

    def _choose(self, rng):
        w = self.world
        dist = _cached(w, "apples", lambda: distance_field(w, apple_positions(w)))
        a = self._descend(dist, rng)
        return (a if a is not None else self._wander(rng)), 0.0


class SustainableHarvester(ScriptedPolicy):
    """Harvests only apples whose patch stays above ``reserve`` live apples.

    An apple is eligible when ``live - threat > reserve``, where ``threat``
    counts avatars standing next to any live apple of the same patch (each
    can eat at most one apple per step). With ``reserve >= 1`` this agent
    never eats the last apple of a patch, even when several agents move in
    the same step. Ineligible apples are treated as obstacles.
    """

    kind = "sustainable-harvester"

    def __init__(self, n_actions: int, reserve: int = 2):
        super().__init__(n_actions)
        if reserve < 1:
            raise ConfigError("sustainable-harvester reserve must be >= 1")
        self.reserve = reserve

    def begin_episode(self, world, agent_index):
        if not hasattr(world, "patch_map"):
            raise ConfigError("sustainable-harvester needs a HarvestPatch world")
        super().begin_episode(world, agent_index)

    def _split(self):
        w = self.world
        pm = w.patch_map
        threat = np.zeros(pm.n_patches, dtype=np.int64)
        for av in w.avatars:
            r, c = av.position
            near = set()
            for dr, dc in DIRECTIONS:
                s = pm.site_index.get((r + dr, c + dc))
                if s is not None and pm.live[s]:
                    near.add(int(pm.patch_of[s]))
            for k in near:
                threat[k] += 1
        ok = pm.patch_live - threat > self.reserve
        eligible, forbidden = [], set()
        for s in np.flatnonzero(pm.live).tolist():
            if ok[pm.patch_of[s]]:
                eligible.append(pm.sites[s])
            else:
                forbidden.add(pm.sites[s])
        return eligible, frozenset(forbidden)

    def _choose(self, rng):
        w = self.world
        key = f"sustainable:{self.reserve}"

        def build():
            eligible, forbidden = self._split()
            return distance_field(w, eligible, forbidden), forbidden

        dist, forbidden = _cached(w, key, build)
        a = self._descend(dist, rng, forbidden)
        return (a if a is not None else self._wander(rng, forbidden)), 0.0


class DedicatedCleaner(ScriptedPolicy):
    """Cleans whenever its beam would remove pollution, else heads for the river."""

    kind = "dedicated-cleaner"

    def begin_episode(self, world, agent_index):
        if not hasattr(world, "river"):
            raise ConfigError("dedicated-cleaner requires the Cleanup environment")
        super().begin_episode(world, agent_index)

    def _beam_hits_pollution(self, pos, heading) -> bool:
        w = self.world
        dr, dc = DIRECTIONS[heading]
        r, c = pos
        for _ in range(w.clean_length):
            r += dr
            c += dc
            if not w.is_passable((r, c)):
                return False
            if w.resource_at((r, c)) == Cell.POLLUTION:
                return True
        return False

    def _choose(self, rng):
        w = self.world
        av = w.avatars[self.agent]
        if self._beam_hits_pollution(av.position, av.orientation):
            return Action.CLEAN, 0.0
        for turn, action in ((1, Action.ROTATE_RIGHT), (3, Action.ROTATE_LEFT), (2, Action.ROTATE_RIGHT)):
            if self._beam_hits_pollution(av.position, (av.orientation + turn) % 4):
                return action, 0.0
        targets = pollution_positions(w)
        if not targets:
            return Action.NOOP, 0.0
        dist = _cached(w, "pollution", lambda: distance_field(w, targets))
        a = self._descend(dist, rng)
        return (a if a is not None else self._wander(rng)), 0.0


def scripted_policy(kind: str, env_id: str, n_actions: int | None = None, **kwargs) -> ScriptedPolicy:
    """Build a scripted actor; ``n_actions`` defaults to the environment's count."""
    from svo_marl.envs import ENVIRONMENTS

    if env_id not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {env_id!r}")
    n = n_actions if n_actions is not None else ENVIRONMENTS[env_id][0].n_actions
    if kind == "random":
        return RandomPolicy(n)
    if kind == "greedy-harvester":
        return GreedyHarvester(n)
    if kind == "sustainable-harvester":
        if env_id != "harvestpatch":
            raise ConfigError("sustainable-harvester is defined for HarvestPatch only")
        return SustainableHarvester(n, **kwargs)
    if kind == "dedicated-cleaner":
        if env_id != "cleanup":
            raise ConfigError(f"dedicated-cleaner is not available in {env_id}; it needs a river to clean")
        return DedicatedCleaner(n)
    raise ConfigError(f"unknown scripted policy kind {kind!r}; expected one of {SCRIPTED_KINDS}")
