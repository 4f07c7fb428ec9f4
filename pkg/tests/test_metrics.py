import csv
import math
from itertools import permutations
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svo_marl.episode import run_episode
from svo_marl.grid import Action, EventLog, GridWorld, Orientation
from svo_marl.harvestpatch import HarvestPatch
from svo_marl.maps import parse_map
from svo_marl.metrics import (
    METRIC_COLUMNS,
    EquilibriumWindow,
    abstention,
    episode_metrics,
    equality,
    gini,
    interagent_distance,
    median_return,
    nanmean,
    observed_reward_angle,
    plateau_start,
    pollution_cleaned,
    preparedness,
    summarize_runs,
    training_log_summary,
    write_metrics_csv,
)
from svo_marl.scripted import scripted_policy
from svo_marl.svo import SvoParams

from conftest import shore_world
from test_grid import arrange


def brute_gini(r):
    r = np.asarray(r, dtype=float)
    n = len(r)
    return sum(abs(a - b) for a in r for b in r) / (2 * n * n * r.mean())


def totals_record(totals):
    r = np.asarray(totals, dtype=float)
    return SimpleNamespace(extrinsic_returns=r)


def events_record(T=1000, P=12, eaten=(), cleans=(), transitions=()):
    ev = EventLog(endangered_eaten=list(eaten), cleans=list(cleans), transitions=list(transitions))
    return SimpleNamespace(length=T, n_patches=P, events=ev)


class Scripted:
    """Plays a fixed action list, then NOOP."""

    def __init__(self, actions):
        self.actions = list(actions)

    def initial_state(self):
        return 0

    def begin_episode(self, world, k):
        pass

    def act(self, obs, t, rng, greedy=False):
        a = self.actions[t] if t < len(self.actions) else Action.NOOP
        return int(a), 0.0, 0.0, t + 1


class TestEquality:
    def test_identical_rewards(self):
        assert equality([1, 1, 1, 1, 1]) == 1.0

    def test_single_earner(self):
        assert gini([5, 0, 0, 0, 0]) == pytest.approx(0.8, abs=1e-15)
        assert equality([5, 0, 0, 0, 0]) == 0.0

    def test_two_agents(self):
        assert gini([3, 1]) == pytest.approx(0.25, abs=1e-15)
        assert equality([3, 1]) == 0.5

    def test_all_zero_is_equal(self):
        assert equality([0, 0, 0]) == 1.0

    def test_negative_returns_shifted_and_flagged(self):
        score, shifted = equality([-50, 0, 0], with_flag=True)
        assert shifted
        assert score == pytest.approx(equality([0, 50, 50]))
        assert equality([1, 2], with_flag=True)[1] is False

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            equality([3])
        with pytest.raises(ValueError):
            equality([1, math.nan])

    def test_matches_brute_force_pairwise(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(10_000):
            n = int(rng.integers(2, 11))
            r = rng.exponential(5.0, n) * (rng.random(n) < 0.8)
            if r.sum() == 0:
                continue
            expected = min(1.0, max(0.0, 1 - n / (n - 1) * brute_gini(r)))
            worst = max(worst, abs(equality(r) - expected))
        assert worst < 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1e3), min_size=2, max_size=8), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, r, c):
        if sum(r) < 1e-6:
            return
        assert equality(np.array(r) * c) == pytest.approx(equality(r), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=5))
    def test_permutation_symmetric(self, r):
        base = equality(r)
        for p in permutations(r):
            assert equality(list(p)) == pytest.approx(base, abs=1e-12)
        assert 0.0 <= base <= 1.0


class TestEquilibrium:
    def test_trailing_tenth(self):
        assert EquilibriumWindow().select(np.arange(200)).tolist() == list(range(180, 200))
        assert EquilibriumWindow().select([1, 2, 3, 4, 5]).tolist() == [4]

    def test_plateau_finds_hand_marked_boundary(self):
        rng = np.random.default_rng(0)
        y = np.concatenate([np.arange(30, dtype=float), np.full(30, 30.0)]) + rng.normal(0, 1e-3, 60)
        window = EquilibriumWindow("plateau", plateau_rounds=10, slope_tolerance=0.01)
        sel = window.select(y)
        assert sel[0] == 30 and sel[-1] == 59

    def test_plateau_falls_back_to_trailing(self):
        y = np.arange(50, dtype=float)
        assert plateau_start(y, 10, 0.01) is None
        assert EquilibriumWindow("plateau").select(y).tolist() == list(range(45, 50))

    def test_invalid(self):
        with pytest.raises(ValueError):
            EquilibriumWindow("eventually")
        with pytest.raises(ValueError):
            EquilibriumWindow(fraction=0.0)
        with pytest.raises(ValueError):
            EquilibriumWindow().select([])


class TestMedianReturn:
    def test_constant(self):
        rounds = np.repeat(np.arange(20), 5)
        agents = np.tile(np.arange(5), 20)
        assert median_return(rounds, agents, np.full(100, 7.0)) == 7.0

    def test_median_of_five(self):
        per_agent = [0, 0, 0, 10, 10]
        rounds = np.repeat(np.arange(10), 5)
        agents = np.tile(np.arange(5), 10)
        rets = np.tile(per_agent, 10).astype(float)
        assert median_return(rounds, agents, rets) == 0.0

    def test_window_restricts_rounds(self):
        rounds = np.repeat(np.arange(10), 2)
        agents = np.tile([0, 1], 10)
        rets = np.where(rounds == 9, 4.0, -100.0)
        assert median_return(rounds, agents, rets) == 4.0

    def test_empty(self):
        with pytest.raises(ValueError):
            median_return([], [], [])


class TestObservedAngle:
    def test_equal_totals(self):
        assert observed_reward_angle(totals_record([4, 4, 4]), 1) == pytest.approx(math.pi / 4)

    def test_sole_earner(self):
        assert observed_reward_angle(totals_record([9, 0, 0]), 0) == 0.0

    def test_arctangent_oracle(self):
        angle = observed_reward_angle(totals_record([10, 20, 30, 0, 0]), 0)
        assert angle == pytest.approx(0.8960553845713439, abs=1e-12)

    def test_degenerate_is_missing(self):
        assert math.isnan(observed_reward_angle(totals_record([0, 0, 0]), 0))
        assert nanmean([math.nan, 1.0, 3.0]) == 2.0


class TestAbstention:
    def test_none_eaten(self):
        assert abstention(events_record(), 0) == 1.0

    def test_final_step_costs_nothing(self):
        rec = events_record(T=1000, eaten=[(999, 0, 3)])
        assert abstention(rec, 0) == 1.0

    def test_one_per_patch_at_first_step(self):
        rec = events_record(T=1000, P=12, eaten=[(0, 0, k) for k in range(12)])
        assert abstention(rec, 0) == 0.0

    def test_only_own_events_count(self):
        rec = events_record(T=1000, P=12, eaten=[(0, 1, k) for k in range(12)])
        assert abstention(rec, 0) == 1.0

    def test_midpoint(self):
        rec = events_record(T=101, P=4, eaten=[(50, 0, 0)])
        assert abstention(rec, 0) == pytest.approx(1 - 50 / (100 * 4))

    def test_zero_patches(self):
        with pytest.raises(ValueError):
            abstention(events_record(P=0), 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded_under_play(self, hp_micro, seed):
        w = HarvestPatch(hp_micro, 3, seed=seed)
        pols = [scripted_policy(k, "harvestpatch") for k in ("greedy-harvester", "random", "greedy-harvester")]
        rec = run_episode(w, pols, [SvoParams(0.0)] * 3, 400, np.random.default_rng(seed), collect=False)
        for i in range(3):
            assert 0.0 <= abstention(rec, i) <= 1.0


class TestDistance:
    def _record(self, positions):
        pos = np.asarray(positions)
        return SimpleNamespace(positions=pos)

    def test_stationary_five_apart(self):
        rec = self._record([[(0, 0), (3, 4)]] * 10)
        assert interagent_distance(rec, 0) == 5.0

    def test_adjacent(self):
        rec = self._record([[(2, 2), (2, 3), (9, 9)]] * 7)
        assert interagent_distance(rec, 0) == 1.0
        assert interagent_distance(rec, 0, "mean") == pytest.approx((1 + math.hypot(7, 7)) / 2)

    def test_single_agent_missing(self):
        assert math.isnan(interagent_distance(self._record([[(0, 0)]] * 3), 0))

    def test_scripted_walk_trace(self):
        layout = parse_map("\n".join(["P" * 8] * 8))
        w = GridWorld(layout, 3, seed=0)
        arrange(w, [(0, 0), (7, 7), (0, 7)], [Orientation.S, Orientation.N, Orientation.W])
        plans = [[Action.FORWARD] * 10, [Action.FORWARD] * 5 + [Action.STRAFE_LEFT] * 5, [Action.FORWARD] * 10]
        pols = [Scripted(p) for p in plans]
        rec = run_episode(w, pols, [SvoParams(0.0)] * 3, 10, np.random.default_rng(0), collect=False)
        # hand trace: agent 0 walks south along col 0; agent 1 north along col 7 then west along row 2;
        # agent 2 west along row 0 and stops at col 0 only if free
        trace0 = [(t + 1, 0) for t in range(7)] + [(7, 0)] * 3
        trace1 = [(6 - t, 7) for t in range(5)] + [(2, 6 - t) for t in range(5)]
        trace2 = [(0, 6 - t) for t in range(7)] + [(0, 0)] * 3
        np.testing.assert_array_equal(rec.positions[:, 0], trace0)
        np.testing.assert_array_equal(rec.positions[:, 1], trace1)
        np.testing.assert_array_equal(rec.positions[:, 2], trace2)
        expected = np.mean(
            [min(math.dist(trace0[t], trace1[t]), math.dist(trace0[t], trace2[t])) for t in range(10)]
        )
        assert interagent_distance(rec, 0) == pytest.approx(expected, abs=1e-12)


class TestCleanupMeasures:
    def test_never_cleans(self):
        assert pollution_cleaned(events_record(), 0) == 0

    def test_additive(self):
        rec = events_record(cleans=[(3, 0, 2), (8, 0, 1), (9, 1, 3)])
        assert pollution_cleaned(rec, 0) == 3

    def test_zero_apples_in_view(self):
        assert preparedness(events_record(transitions=[(5, 0, 0)]), 0) == (0.0, 1)

    def test_never_transitions(self):
        mean, count = preparedness(events_record(), 0)
        assert math.isnan(mean) and count == 0

    def test_constructed_transition_with_four_apples(self):
        w = shore_world()
        w.set_apples([(1, 7), (1, 8), (3, 7), (3, 8)])
        w.place_avatar(0, (2, 4), Orientation.E)
        # into the orchard, then back out and into the river
        for a in [Action.FORWARD, Action.BACKWARD, Action.BACKWARD, Action.BACKWARD, Action.BACKWARD]:
            w.step([a])
        assert w.avatars[0].position == (2, 1)
        assert preparedness(SimpleNamespace(events=w.events), 0) == (4.0, 1)

    def test_orchard_only_agent_missing(self):
        w = shore_world()
        w.place_avatar(0, (2, 5), Orientation.E)
        for a in [Action.FORWARD, Action.BACKWARD] * 5:
            w.step([a])
        assert math.isnan(preparedness(SimpleNamespace(events=w.events), 0)[0])


class TestExport:
    def _episode(self, hp_micro, seed=0):
        w = HarvestPatch(hp_micro, 3, seed=seed)
        pols = [scripted_policy("random", "harvestpatch") for _ in range(3)]
        svo = [SvoParams.from_degrees(d, 0.2) for d in (0, 45, 90)]
        return run_episode(w, pols, svo, 300, np.random.default_rng(seed), collect=False)

    def test_collective_return_is_exact_sum(self, hp_micro):
        for seed in range(5):
            rec = self._episode(hp_micro, seed)
            rows = episode_metrics(rec, seed, [0, 45, 90])
            assert rows[0].collective_return == sum(r.extrinsic_return for r in rows)
            assert rows[0].collective_return == sum(rec.returns)
            assert [r.punish_fires for r in rows] == rec.punish_counts().tolist()

    def test_csv_round_trip(self, tmp_path, hp_micro):
        rows = episode_metrics(self._episode(hp_micro), 0, [0, 45, 90])
        path = write_metrics_csv(rows, tmp_path / "m.csv")
        with open(path) as fh:
            back = list(csv.DictReader(fh))
        assert tuple(back[0]) == METRIC_COLUMNS
        assert [float(r["extrinsic_return"]) for r in back] == [r.extrinsic_return for r in rows]

    def test_empty_csv_has_header(self, tmp_path):
        path = write_metrics_csv([], tmp_path / "e.csv")
        assert path.read_text().strip().split(",") == list(METRIC_COLUMNS)

    def test_summarize_runs(self):
        runs = [
            {"collective_return": 10.0, "equality": 0.5, "median_return": 2.0},
            {"collective_return": 20.0, "equality": 0.7, "median_return": 4.0},
            {"failed": True},
        ]
        s = summarize_runs("cell", runs)
        assert s["runs"] == 2 and s["failed"] == 1
        assert s["collective_return_mean"] == 15.0
        assert s["collective_return_std"] == pytest.approx(math.sqrt(50.0))
        assert s["equality_mean"] == pytest.approx(0.6)

    def test_training_log_summary(self):
        rows = []
        for rnd in range(10):
            for arena in range(2):
                for agent in range(2):
                    rows.append(
                        {
                            "round": rnd,
                            "arena": arena,
                            "agent_id": agent + 2 * arena,
                            "extrinsic_return": float(rnd),
                            "collective_return": 2.0 * rnd,
                            "equality": 1.0,
                        }
                    )
        out = training_log_summary(rows)
        assert out == {"collective_return": 18.0, "equality": 1.0, "median_return": 9.0, "window_rounds": 1}
