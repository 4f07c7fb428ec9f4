from collections import deque

import numpy as np
import pytest

from svo_marl.cleanup import Cleanup
from svo_marl.episode import run_episode
from svo_marl.grid import DIRECTIONS, Action, ConfigError, GridWorld, Orientation
from svo_marl.harvestpatch import HarvestPatch
from svo_marl.maps import parse_map
from svo_marl.metrics import abstention, pollution_cleaned
from svo_marl.scripted import SCRIPTED_KINDS, move_action, scripted_policy
from svo_marl.svo import SvoParams

MAZE = """
#########
#P..#...#
#.#.#.#.#
#.#...#0#
#.#####.#
#.......#
#########
"""


def bfs_length(layout, start, goal):
    """Shortest 4-connected path length, walls only."""
    seen = {start: 0}
    q = deque([start])
    while q:
        r, c = q.popleft()
        if (r, c) == goal:
            return seen[(r, c)]
        for dr, dc in DIRECTIONS:
            nxt = (r + dr, c + dc)
            if layout.terrain[nxt] != 1 and nxt not in seen:
                seen[nxt] = seen[(r, c)] + 1
                q.append(nxt)
    return None


def test_move_action_covers_all_headings():
    layout = parse_map("PPP\nPPP\nPPP")
    for orient in range(4):
        for d in range(4):
            w = GridWorld(layout, 1, 0)
            w.place_avatar(0, (1, 1), orient)
            w.step([move_action(d, orient)])
            dr, dc = DIRECTIONS[d]
            assert w.avatars[0].position == (1 + dr, 1 + dc)
            assert w.avatars[0].orientation == orient


def test_random_policy_histogram(hp_micro):
    w = HarvestPatch(hp_micro, 1, seed=0)
    pol = scripted_policy("random", "harvestpatch")
    pol.begin_episode(w, 0)
    rng = np.random.default_rng(0)
    counts = np.zeros(8)
    for _ in range(100_000):
        a, logp, v, _ = pol.act(None, None, rng)
        counts[a] += 1
    assert logp == pytest.approx(-np.log(8)) and v == 0.0
    # every action within 2% (relative) of its uniform share
    assert np.abs(counts / 100_000 * 8 - 1).max() < 0.02


@pytest.mark.parametrize("orientation", list(Orientation))
def test_greedy_walks_shortest_path(orientation):
    layout = parse_map(MAZE)
    goal = layout.patch_sites[0][0]
    w = HarvestPatch(layout, 1, seed=0)
    w.place_avatar(0, (1, 1), orientation)
    expected = bfs_length(layout, (1, 1), goal)
    pol = scripted_policy("greedy-harvester", "harvestpatch")
    pol.begin_episode(w, 0)
    rng = np.random.default_rng(1)
    for steps in range(1, 50):
        before = w.avatars[0].position
        r, _ = w.step([pol.act(None, None, rng)[0]])
        after = w.avatars[0].position
        assert abs(after[0] - before[0]) + abs(after[1] - before[1]) == 1
        if r[0]:
            break
    assert w.avatars[0].position == goal
    assert steps == expected == 12


def test_sustainable_harvester_abstains(hp_layout):
    w = HarvestPatch(hp_layout, 5, seed=2)
    pols = [scripted_policy("sustainable-harvester", "harvestpatch") for _ in range(5)]
    rec = run_episode(w, pols, [SvoParams(0.0)] * 5, 1000, np.random.default_rng(2), collect=False)
    assert rec.extrinsic_returns.sum() > 0
    assert rec.events.endangered_eaten == []
    assert all(abstention(rec, i) == 1.0 for i in range(5))


def test_greedy_harvester_eats_endangered(hp_layout):
    w = HarvestPatch(hp_layout, 5, seed=2)
    pols = [scripted_policy("greedy-harvester", "harvestpatch") for _ in range(5)]
    rec = run_episode(w, pols, [SvoParams(0.0)] * 5, 1000, np.random.default_rng(2), collect=False)
    assert rec.events.endangered_eaten
    assert min(abstention(rec, i) for i in range(5)) < 1.0


def test_cleaner_cleans_default_map(cu_layout):
    w = Cleanup(cu_layout, 2, seed=0)
    pols = [scripted_policy("dedicated-cleaner", "cleanup") for _ in range(2)]
    rec = run_episode(w, pols, [SvoParams(0.0)] * 2, 300, np.random.default_rng(0), collect=False)
    assert all(pollution_cleaned(rec, i) > 0 for i in range(2))


def test_cleaner_rejected_in_harvestpatch():
    with pytest.raises(ConfigError, match="dedicated-cleaner"):
        scripted_policy("dedicated-cleaner", "harvestpatch")


def test_sustainable_rejected_in_cleanup():
    with pytest.raises(ConfigError):
        scripted_policy("sustainable-harvester", "cleanup")


def test_unknown_kind_and_env():
    with pytest.raises(ConfigError):
        scripted_policy("psychic", "harvestpatch")
    with pytest.raises(ConfigError):
        scripted_policy("random", "chess")


def test_action_count_checked_on_begin(cu_micro):
    pol = scripted_policy("random", "harvestpatch")
    with pytest.raises(ConfigError):
        pol.begin_episode(Cleanup(cu_micro, 1, 0), 0)


def test_all_kinds_listed():
    assert set(SCRIPTED_KINDS) == {"random", "greedy-harvester", "sustainable-harvester", "dedicated-cleaner"}


def test_random_never_cleans_in_harvestpatch(hp_micro):
    pol = scripted_policy("random", "harvestpatch")
    pol.begin_episode(HarvestPatch(hp_micro, 1, 0), 0)
    rng = np.random.default_rng(0)
    assert max(pol.act(None, None, rng)[0] for _ in range(2000)) == Action.PUNISH
