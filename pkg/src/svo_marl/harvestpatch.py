"""HarvestPatch: patch-structured apple regrowth with irreversible depletion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svo_marl.grid import APPLE_REWARD, Cell, ConfigError, GridWorld
from svo_marl.maps import MapError, MapLayout

# index k -> respawn probability with k live neighbors; last entry covers k >= len-1
DEFAULT_REGROWTH = (0.0, 0.01, 0.01, 0.05, 0.05, 0.05, 0.10)


@dataclass(frozen=True)
class HarvestPatchParams:
    regrowth_radius: float = 3.0
    distance: str = "euclidean"
    regrowth_probabilities: tuple[float, ...] = DEFAULT_REGROWTH
    initial_apple_prob: float = 0.8


@dataclass(frozen=True)
class Patch:
    patch_id: int
    sites: tuple[tuple[int, int], ...]
    live_count: int
    depleted: bool


def _pairwise(points: np.ndarray, metric: str) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    if metric == "euclidean":
        return np.sqrt((diff**2).sum(-1))
    if metric == "l1":
        return np.abs(diff).sum(-1)
    raise ConfigError(f"unknown distance metric {metric!r}")


class PatchMap:
    """Apple sites grouped into patches, with live/depleted bookkeeping.

    Site state lives in flat arrays indexed by site number; ``patch_of[s]``
    gives the owning patch.
    """

    def __init__(
        self,
        patch_sites: dict[int, tuple[tuple[int, int], ...]],
        regrowth_radius: float = 3.0,
        regrowth_probabilities=DEFAULT_REGROWTH,
        distance: str = "euclidean",
    ):
        if not patch_sites:
            raise MapError("HarvestPatch map defines no apple patches")
        probs = np.asarray(regrowth_probabilities, dtype=np.float64)
        if probs.ndim != 1 or len(probs) < 1 or np.any((probs < 0) | (probs > 1)):
            raise ConfigError("regrowth_probabilities must be a non-empty list of values in [0, 1]")
        if probs[0] != 0.0:
            raise ConfigError("regrowth_probabilities[0] must be 0: no apples in radius, no regrowth")
        self.patch_ids = sorted(patch_sites)
        self.sites: list[tuple[int, int]] = []
        owner = []
        for k, pid in enumerate(self.patch_ids):
            for pos in patch_sites[pid]:
                self.sites.append(tuple(pos))
                owner.append(k)
        self.patch_of = np.array(owner, dtype=np.int64)
        self.site_index = {pos: s for s, pos in enumerate(self.sites)}
        self.regrowth_radius = float(regrowth_radius)
        self.regrowth_probabilities = probs
        self.distance = distance

        dist = _pairwise(np.array(self.sites, dtype=np.float64), distance)
        within = dist <= self.regrowth_radius + 1e-9
        same = self.patch_of[:, None] == self.patch_of[None, :]
        if np.any(same & ~within):
            s, t = np.argwhere(same & ~within)[0]
            raise MapError(
                f"sites {self.sites[s]} and {self.sites[t]} share a patch but are farther "
                f"apart than the regrowth radius {regrowth_radius}"
            )
        if np.any(~same & within):
            s, t = np.argwhere(~same & within)[0]
            raise MapError(
                f"sites {self.sites[s]} and {self.sites[t]} are in different patches but "
                f"within the regrowth radius {regrowth_radius}"
            )
        self.neighbors = (within & ~np.eye(len(self.sites), dtype=bool)).astype(np.int64)
        self.live = np.zeros(len(self.sites), dtype=bool)
        self.patch_live = np.zeros(len(self.patch_ids), dtype=np.int64)
        self.depleted = np.zeros(len(self.patch_ids), dtype=bool)

    @property
    def n_patches(self) -> int:
        return len(self.patch_ids)

    @property
    def patches(self) -> list[Patch]:
        out = []
        for k, pid in enumerate(self.patch_ids):
            sites = tuple(p for s, p in enumerate(self.sites) if self.patch_of[s] == k)
            out.append(Patch(pid, sites, int(self.patch_live[k]), bool(self.depleted[k])))
        return out

    def live_neighbor_counts(self) -> np.ndarray:
        return self.neighbors @ self.live

    def respawn_probabilities(self) -> np.ndarray:
        k = self.live_neighbor_counts()
        table = self.regrowth_probabilities
        return table[np.minimum(k, len(table) - 1)]

    def spawn_initial(self, rng: np.random.Generator, initial_prob: float = 0.8) -> None:
        """Fill each site with probability ``initial_prob``; redraw any patch left empty."""
        if not 0.0 < initial_prob <= 1.0:
            raise ConfigError("initial_apple_prob must be in (0, 1]")
        self.live[:] = rng.random(len(self.sites)) < initial_prob
        for k in range(self.n_patches):
            members = np.flatnonzero(self.patch_of == k)
            while not self.live[members].any():
                self.live[members] = rng.random(len(members)) < initial_prob
        self.patch_live[:] = np.bincount(self.patch_of, weights=self.live, minlength=self.n_patches)
        self.depleted[:] = False

    def harvest(self, pos: tuple[int, int]) -> tuple[int, bool]:
        """Remove the apple at ``pos``. Returns (reward, was_endangered)."""
        s = self.site_index.get(pos)
        if s is None or not self.live[s]:
            return 0, False
        k = self.patch_of[s]
        endangered = self.patch_live[k] == 1
        self.live[s] = False
        self.patch_live[k] -= 1
        if self.patch_live[k] == 0:
            self.depleted[k] = True
        return APPLE_REWARD, bool(endangered)

    def regrow(self, rng: np.random.Generator, blocked: np.ndarray | None = None) -> np.ndarray:
        """One regrowth draw for every site. Returns indices of sites that respawned.

        A site respawns iff it is empty, its patch is not depleted, it is not
        ``blocked`` and a uniform draw falls below the table entry for its live
        neighbor count.
        """
        draws = rng.random(len(self.sites))
        cand = ~self.live & ~self.depleted[self.patch_of]
        if blocked is not None:
            cand &= ~blocked
        new = np.flatnonzero(cand & (draws < self.respawn_probabilities()))
        if len(new):
            self.live[new] = True
            np.add.at(self.patch_live, self.patch_of[new], 1)
        return new

    def endangered_sites(self) -> list[tuple[int, int]]:
        """Positions of apples that are the only live apple in their patch."""
        lonely = self.live & (self.patch_live[self.patch_of] == 1)
        return [self.sites[s] for s in np.flatnonzero(lonely)]

    def copy_state(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.live.copy(), self.patch_live.copy(), self.depleted.copy()


class HarvestPatch(GridWorld):
    env_id = "harvestpatch"
    n_actions = 8

    def __init__(self, layout: MapLayout, n_agents: int, seed: int = 0, params: HarvestPatchParams | None = None, **kw):
        self.params = params or HarvestPatchParams()
        p = self.params
        self.patch_map = PatchMap(layout.patch_sites, p.regrowth_radius, p.regrowth_probabilities, p.distance)
        self._site_blocked = np.zeros(len(self.patch_map.sites), dtype=bool)
        super().__init__(layout, n_agents, seed, **kw)

    def _reset_resources(self) -> None:
        pm = self.patch_map
        pm.spawn_initial(self.rng, self.params.initial_apple_prob)
        for s, pos in enumerate(pm.sites):
            if pm.live[s]:
                self._set_base(pos, Cell.APPLE)

    def _on_enter(self, agent: int, pos: tuple[int, int]) -> int:
        reward, endangered = self.patch_map.harvest(pos)
        if reward:
            self._set_base(pos, Cell.OPEN)
            if endangered:
                s = self.patch_map.site_index[pos]
                self.events.endangered_eaten.append((self.step_index, agent, int(self.patch_map.patch_of[s])))
        return reward

    def _tick(self) -> None:
        pm = self.patch_map
        blocked = self._site_blocked
        blocked[:] = False
        idx = pm.site_index
        for pos in self._occupant:
            s = idx.get(pos)
            if s is not None:
                blocked[s] = True
        for s in pm.regrow(self.rng, blocked).tolist():
            self._set_base(pm.sites[s], Cell.APPLE)

    def _hash_extra(self, h) -> None:
        for arr in self.patch_map.copy_state():
            h.update(arr.tobytes())

    @property
    def apple_count(self) -> int:
        return int(self.patch_map.live.sum())
