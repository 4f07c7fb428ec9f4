"""Environment registry and replay re-simulation."""

from __future__ import annotations

from collections.abc import Iterator

from svo_marl import replay as replay_io
from svo_marl.cleanup import Cleanup, CleanupParams
from svo_marl.grid import ConfigError, GridWorld
from svo_marl.harvestpatch import HarvestPatch, HarvestPatchParams
from svo_marl.maps import MapLayout, parse_map

ENVIRONMENTS = {
    "harvestpatch": (HarvestPatch, HarvestPatchParams),
    "cleanup": (Cleanup, CleanupParams),
}

# weight w that gave the highest collective return per task
DEFAULT_WEIGHT = {"harvestpatch": 0.2, "cleanup": 0.1}


def make_env(env_id: str, layout: MapLayout, n_agents: int, seed: int, env_kwargs: dict | None = None) -> GridWorld:
    """Build an environment from a JSON-able kwargs dict.

    ``env_kwargs`` holds the grid-level knobs (``punish_length``,
    ``clean_length``, ``punish_timeout``) plus a ``params`` dict for the
    environment's dynamics dataclass.
    """
    try:
        cls, params_cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ConfigError(f"unknown environment {env_id!r}; expected one of {sorted(ENVIRONMENTS)}") from None
    kw = dict(env_kwargs or {})
    params = kw.pop("params", None) or {}
    if "regrowth_probabilities" in params:
        params = {**params, "regrowth_probabilities": tuple(params["regrowth_probabilities"])}
    return cls(layout, n_agents, seed, params=params_cls(**params), **kw)


def resimulate(rep: replay_io.Replay) -> Iterator[tuple[GridWorld, list[int] | None]]:
    """Yield the world after reset and after every logged step.

    Raises ReplayIntegrityError if the map hash or the final state hash
    does not match the header/trailer.
    """
    layout = parse_map(rep.map_text)
    if layout.sha256 != rep.map_sha256:
        raise replay_io.ReplayIntegrityError("embedded map does not match the header map hash")
    world = make_env(rep.env_id, layout, rep.n_agents, rep.seed, rep.env_kwargs)
    yield world, None
    for acts in rep.actions:
        rewards, _ = world.step(list(acts))
        yield world, rewards
    final = world.state_hash()
    if rep.final_hash is not None and final != rep.final_hash:
        raise replay_io.ReplayIntegrityError(
            f"final state hash mismatch after {world.step_index} steps: "
            f"recorded {rep.final_hash[:12]}..., re-simulated {final[:12]}..."
        )
