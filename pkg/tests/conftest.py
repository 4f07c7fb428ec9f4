import numpy as np
import pytest

from svo_marl.cleanup import Cleanup, CleanupParams
from svo_marl.grid import Action
from svo_marl.harvestpatch import HarvestPatch, HarvestPatchParams
from svo_marl.maps import bundled_map, parse_map


@pytest.fixture(scope="session")
def hp_layout():
    return bundled_map("harvestpatch")


@pytest.fixture(scope="session")
def hp_micro():
    return bundled_map("harvestpatch_micro")


@pytest.fixture(scope="session")
def cu_layout():
    return bundled_map("cleanup")


@pytest.fixture(scope="session")
def cu_micro():
    return bundled_map("cleanup_micro")


def noop(n):
    return [Action.NOOP] * n


def random_joint(rng, n, n_actions):
    return rng.integers(0, n_actions, size=n).tolist()


# 7x9 open room, one 5-site patch in the middle, two spawns
ROOM = """
#########
#P.....P#
#...0...#
#..000..#
#...0...#
#.......#
#########
"""


def room_world(n_agents=2, seed=0, **params):
    return HarvestPatch(parse_map(ROOM), n_agents, seed, params=HarvestPatchParams(**params))


# river and orchard within one window of each other
SHORE = """
##########
#RR..OOOO#
#RR.POOOO#
#RR..OOOO#
##########
"""


def shore_world(seed=0, **params):
    base = dict(pollution_spawn_prob=0.0, max_spawn_prob=0.0, start_polluted=False, initial_apple_prob=0.0)
    base.update(params)
    return Cleanup(parse_map(SHORE), 1, seed, params=CleanupParams(**base))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
