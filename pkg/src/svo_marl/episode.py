"""Run one episode in one arena and collect everything metrics and learners need."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from svo_marl.grid import VIEW_SIZE, EventLog, GridWorld
from svo_marl.policy import Trajectory
from svo_marl.svo import GroupUtility, SvoParams


@dataclass
class EpisodeRecord:
    """Completed episode: per-step positions and rewards plus the world's event log."""

    env_id: str
    seed: int
    agent_ids: list[int]
    positions: np.ndarray  # (T, n, 2) after each step
    rewards: np.ndarray  # (T, n) extrinsic
    utilities: np.ndarray  # (T, n)
    events: EventLog
    returns: list[int]  # the world's own accumulators
    n_patches: int = 0
    trajectories: list[Trajectory] | None = None
    replay: object | None = None
    extras: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_agents(self) -> int:
        return self.rewards.shape[1]

    @property
    def extrinsic_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)

    @property
    def utility_returns(self) -> np.ndarray:
        return self.utilities.sum(axis=0)

    def punish_counts(self) -> np.ndarray:
        out = np.zeros(self.n_agents, dtype=np.int64)
        for _, i in self.events.punish_fires:
            out[i] += 1
        return out


def run_episode(
    world: GridWorld,
    policies: list,
    svo: list[SvoParams],
    length: int,
    rng: np.random.Generator,
    *,
    seed: int | None = None,
    lam: float = 0.975,
    agent_ids: list[int] | None = None,
    collect: bool = True,
    greedy: bool = False,
    record_replay: bool = False,
    env_kwargs: dict | None = None,
) -> EpisodeRecord:
    """Reset ``world`` (with ``seed`` if given) and play ``length`` steps.

    ``policies[k]`` controls avatar ``k`` and ``svo[k]`` shapes its utility.
    Actions are sampled from ``rng``. With ``collect`` the per-agent
    trajectories needed for a learning update are kept.
    """
    n = world.n_agents
    if len(policies) != n or len(svo) != n:
        raise ValueError(f"need {n} policies and SVO parameter sets, got {len(policies)} and {len(svo)}")
    if length < 0:
        raise ValueError("episode length must be non-negative")
    if seed is not None:
        world.reset(seed)
    elif world.step_index != 0:
        raise ValueError("world must be freshly reset (or pass a seed)")
    shaper = GroupUtility(svo, lam)
    for k, pol in enumerate(policies):
        pol.begin_episode(world, k)
    states = [pol.initial_state() for pol in policies]
    obs = world.observe_all()

    T = length
    positions = np.zeros((T, n, 2), dtype=np.int16)
    rewards = np.zeros((T, n), dtype=np.float64)
    utilities = np.zeros((T, n), dtype=np.float64)
    if collect:
        windows = np.zeros((T, n, VIEW_SIZE, VIEW_SIZE), dtype=np.int8)
        headings = np.zeros((T, n), dtype=np.int8)
        actions = np.zeros((T, n), dtype=np.int8)
        logps = np.zeros((T, n))
        values = np.zeros((T, n))

    joint = [0] * n
    for t in range(T):
        for k in range(n):
            a, lp, v, states[k] = policies[k].act(obs[k], states[k], rng, greedy)
            joint[k] = a
            if collect:
                windows[t, k] = obs[k].window
                headings[t, k] = obs[k].orientation
                actions[t, k] = a
                logps[t, k] = lp
                values[t, k] = v
        r, obs = world.step(joint)
        rewards[t] = r
        utilities[t] = shaper(r)
        for k, av in enumerate(world.avatars):
            positions[t, k] = av.position

    trajectories = None
    if collect:
        trajectories = [
            Trajectory(
                windows=windows[:, k],
                headings=headings[:, k],
                actions=actions[:, k],
                log_probs=logps[:, k],
                values=values[:, k],
                rewards=rewards[:, k],
                utilities=utilities[:, k],
            )
            for k in range(n)
        ]
    rep = None
    if record_replay:
        from svo_marl import replay as replay_io

        rep = replay_io.from_world(world, env_kwargs or {})
    pm = getattr(world, "patch_map", None)
    return EpisodeRecord(
        env_id=world.env_id,
        seed=world.seed,
        agent_ids=list(agent_ids) if agent_ids is not None else list(range(n)),
        positions=positions,
        rewards=rewards,
        utilities=utilities,
        events=world.events,
        returns=list(world.returns),
        n_patches=pm.n_patches if pm is not None else 0,
        trajectories=trajectories,
        replay=rep,
    )
