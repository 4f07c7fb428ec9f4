"""Cleanup: a public-goods game where river pollution gates orchard growth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svo_marl.grid import APPLE_REWARD, BeamResult, Cell, ConfigError, GridWorld
from svo_marl.maps import ORCHARD, RIVER, MapError, MapLayout


@dataclass(frozen=True)
class CleanupParams:
    pollution_spawn_prob: float = 0.5
    depletion_threshold: float = 0.4
    max_spawn_prob: float = 0.05
    growth_mode: str = "linear"
    start_polluted: bool = True
    initial_apple_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.pollution_spawn_prob <= 1.0:
            raise ConfigError("pollution_spawn_prob must be in [0, 1]")
        if not 0.0 < self.depletion_threshold <= 1.0:
            raise ConfigError("depletion_threshold must be in (0, 1]")
        if not 0.0 <= self.max_spawn_prob <= 1.0:
            raise ConfigError("max_spawn_prob must be in [0, 1]")
        if self.growth_mode not in ("linear", "step"):
            raise ConfigError(f"growth_mode must be 'linear' or 'step', got {self.growth_mode!r}")
        if not 0.0 <= self.initial_apple_prob <= 1.0:
            raise ConfigError("initial_apple_prob must be in [0, 1]")


class RiverState:
    def __init__(self, river_cells, pollution_spawn_prob: float = 0.5):
        self.river_cells = [tuple(p) for p in river_cells]
        self.index = {p: k for k, p in enumerate(self.river_cells)}
        self.polluted = np.zeros(len(self.river_cells), dtype=bool)
        self.pollution_spawn_prob = pollution_spawn_prob

    @property
    def pollution_fraction(self) -> float:
        if not self.river_cells:
            return 0.0
        return float(self.polluted.sum()) / len(self.river_cells)

    def pollute(self, rng: np.random.Generator) -> int | None:
        """Maybe pollute one uniformly chosen clean cell. Returns its index or None."""
        if rng.random() >= self.pollution_spawn_prob:
            return None
        clean = np.flatnonzero(~self.polluted)
        if len(clean) == 0:
            return None
        k = int(clean[rng.integers(len(clean))])
        self.polluted[k] = True
        return k

    def clean(self, beam: BeamResult) -> list[int]:
        """Clear pollution under the beam. Returns indices of cells cleaned."""
        if beam.kind != "clean":
            raise ConfigError(f"clean() needs a clean beam, got {beam.kind!r}")
        out = []
        for pos in beam.hit_cells:
            k = self.index.get(pos)
            if k is not None and self.polluted[k]:
                self.polluted[k] = False
                out.append(k)
        return out


class OrchardState:
    def __init__(self, orchard_cells, depletion_threshold=0.4, max_spawn_prob=0.05, growth_mode="linear"):
        self.orchard_cells = [tuple(p) for p in orchard_cells]
        self.index = {p: k for k, p in enumerate(self.orchard_cells)}
        self.apples = np.zeros(len(self.orchard_cells), dtype=bool)
        self.depletion_threshold = depletion_threshold
        self.max_spawn_prob = max_spawn_prob
        self.growth_mode = growth_mode

    def growth_rate(self, river: RiverState) -> float:
        return orchard_growth_rate(
            river.pollution_fraction, self.depletion_threshold, self.max_spawn_prob, self.growth_mode
        )

    def grow(self, rate: float, rng: np.random.Generator, blocked: np.ndarray | None = None) -> np.ndarray:
        """Each empty, unblocked cell gains an apple with probability ``rate``."""
        draws = rng.random(len(self.orchard_cells))
        cand = ~self.apples
        if blocked is not None:
            cand &= ~blocked
        new = np.flatnonzero(cand & (draws < rate))
        self.apples[new] = True
        return new

    def harvest(self, pos) -> int:
        k = self.index.get(pos)
        if k is None or not self.apples[k]:
            return 0
        self.apples[k] = False
        return APPLE_REWARD


def orchard_growth_rate(
    pollution_fraction: float,
    depletion_threshold: float = 0.4,
    max_spawn_prob: float = 0.05,
    mode: str = "linear",
) -> float:
    """Per-cell apple spawn probability for a given river pollution level.

    Linear mode falls from ``max_spawn_prob`` on a clean river to exactly 0
    at ``depletion_threshold``; step mode is ``max_spawn_prob`` below the
    threshold and 0 at or above it.
    """
    if pollution_fraction >= depletion_threshold:
        return 0.0
    if mode == "step":
        return max_spawn_prob
    return max_spawn_prob * max(0.0, 1.0 - pollution_fraction / depletion_threshold)


class Cleanup(GridWorld):
    env_id = "cleanup"
    n_actions = 9

    def __init__(self, layout: MapLayout, n_agents: int, seed: int = 0, params: CleanupParams | None = None, **kw):
        if not layout.river_cells or not layout.orchard_cells:
            raise MapError("Cleanup map needs both river ('R') and orchard ('O') cells")
        self.params = params or CleanupParams()
        p = self.params
        self.river = RiverState(layout.river_cells, p.pollution_spawn_prob)
        self.orchard = OrchardState(layout.orchard_cells, p.depletion_threshold, p.max_spawn_prob, p.growth_mode)
        self._orchard_blocked = np.zeros(len(self.orchard.orchard_cells), dtype=bool)
        super().__init__(layout, n_agents, seed, **kw)

    def _reset_resources(self) -> None:
        self.river.polluted[:] = self.params.start_polluted
        for k, pos in enumerate(self.river.river_cells):
            self._set_base(pos, Cell.POLLUTION if self.river.polluted[k] else Cell.RIVER)
        self.orchard.apples[:] = self.rng.random(len(self.orchard.orchard_cells)) < self.params.initial_apple_prob
        for k, pos in enumerate(self.orchard.orchard_cells):
            if self.orchard.apples[k]:
                self._set_base(pos, Cell.APPLE)

    def _after_reset(self) -> None:
        # "visited the orchard since the last river visit" flags for preparedness
        self._been_in_orchard = [bool(self.cells[av.position] == ORCHARD) for av in self.avatars]
        self._pending_transitions: list[int] = []

    def _on_enter(self, agent: int, pos: tuple[int, int]) -> int:
        terrain = self.cells[pos]
        if terrain == ORCHARD:
            self._been_in_orchard[agent] = True
            reward = self.orchard.harvest(pos)
            if reward:
                self._set_base(pos, Cell.OPEN)
            return reward
        if terrain == RIVER and self._been_in_orchard[agent]:
            self._been_in_orchard[agent] = False
            self._pending_transitions.append(agent)
        return 0

    def _on_clean(self, agent: int, beam: BeamResult) -> None:
        cleaned = self.river.clean(beam)
        for k in cleaned:
            self._set_base(self.river.river_cells[k], Cell.RIVER)
        self.events.cleans.append((self.step_index, agent, len(cleaned)))

    def _tick(self) -> None:
        k = self.river.pollute(self.rng)
        if k is not None:
            self._set_base(self.river.river_cells[k], Cell.POLLUTION)
        blocked = self._orchard_blocked
        blocked[:] = False
        idx = self.orchard.index
        for pos in self._occupant:
            j = idx.get(pos)
            if j is not None:
                blocked[j] = True
        rate = self.orchard.growth_rate(self.river)
        for j in self.orchard.grow(rate, self.rng, blocked).tolist():
            self._set_base(self.orchard.orchard_cells[j], Cell.APPLE)
        if self._pending_transitions:
            for a in self._pending_transitions:
                self.events.transitions.append((self.step_index, a, self.count_in_view(a, Cell.APPLE)))
            self._pending_transitions.clear()

    def set_apples(self, positions) -> None:
        """Replace the orchard's apples with exactly ``positions`` (scenario construction)."""
        want = {tuple(p) for p in positions}
        bad = want - set(self.orchard.index)
        if bad:
            raise ConfigError(f"not orchard cells: {sorted(bad)}")
        for k, pos in enumerate(self.orchard.orchard_cells):
            self.orchard.apples[k] = pos in want
            self._set_base(pos, Cell.APPLE if pos in want else Cell.OPEN)

    def _hash_extra(self, h) -> None:
        h.update(self.river.polluted.tobytes())
        h.update(self.orchard.apples.tobytes())
        h.update(bytes(self._been_in_orchard))

    @property
    def apple_count(self) -> int:
        return int(self.orchard.apples.sum())
