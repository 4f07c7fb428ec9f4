"""Agent population, group sampling and the synchronous training loop.

One training round samples a group for every arena, plays one episode per
arena against a frozen snapshot of the members' parameters, then applies
one update per agent on the trajectories that agent collected that round.

Output directory layout (all optional, written when ``out_dir`` is given)::

    training_log.csv                  one row per (round, arena, agent)
    checkpoints/round_000050/
        manifest.json                 round, SVO values, file hashes, sampler state
        agent_00.ckpt ...             NeuralPolicy checkpoints
    replays/round_000050_arena_00.svorpl (+ .jsonl)
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from svo_marl import replay as replay_io
from svo_marl.envs import make_env
from svo_marl.episode import EpisodeRecord, run_episode
from svo_marl.maps import MapLayout
from svo_marl.metrics import equality
from svo_marl.nn import ArchSpec
from svo_marl.policy import CheckpointError, LearnerConfig, NeuralPolicy, NonFiniteLossError
from svo_marl.svo import SvoParams

log = logging.getLogger(__name__)

HALF_PI = math.pi / 2


@dataclass(frozen=True)
class PopulationSpec:
    n_population: int = 30
    group_size: int = 5
    distribution: str = "homogeneous"
    theta_deg: float = 0.0  # homogeneous target
    mean_deg: float = 45.0  # normal
    std_deg: float = 0.0
    weight_w: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_population < 1 or self.group_size < 1:
            raise ValueError("population and group sizes must be positive")
        if self.group_size > self.n_population:
            raise ValueError(f"group_size {self.group_size} exceeds population size {self.n_population}")
        if self.distribution not in ("homogeneous", "normal"):
            raise ValueError(f"unknown SVO distribution {self.distribution!r}")
        if self.distribution == "homogeneous" and not 0.0 <= self.theta_deg <= 90.0:
            raise ValueError("homogeneous theta must lie in [0, 90] degrees")
        if self.distribution == "normal" and (self.std_deg < 0 or not math.isfinite(self.mean_deg)):
            raise ValueError("normal SVO distribution needs a finite mean and non-negative std")
        if self.weight_w < 0:
            raise ValueError("weight_w must be non-negative")


def sample_svo(spec: PopulationSpec) -> np.ndarray:
    """Target angles in radians. Normal draws outside [0, pi/2] are clipped to the bound."""
    if spec.distribution == "homogeneous":
        return np.full(spec.n_population, math.radians(spec.theta_deg))
    rng = np.random.default_rng(spec.seed)
    draws = rng.normal(spec.mean_deg, spec.std_deg, spec.n_population)
    return np.clip(np.radians(draws), 0.0, HALF_PI)


@dataclass
class AgentSlot:
    agent_id: int
    svo: SvoParams
    policy: NeuralPolicy
    episodes: int = 0
    cumulative_return: float = 0.0


@dataclass(frozen=True)
class ArenaAssignment:
    arena_id: int
    episode_seed: int
    members: tuple[int, ...]


@dataclass
class Population:
    spec: PopulationSpec
    slots: list[AgentSlot]
    rng: np.random.Generator  # group sampler

    @property
    def thetas(self) -> np.ndarray:
        return np.array([s.svo.theta_svo for s in self.slots])


def materialize_population(
    spec: PopulationSpec,
    arch: ArchSpec,
    learner: LearnerConfig | None = None,
) -> Population:
    """Draw SVO values and freshly initialize every agent's policy, all from ``spec.seed``."""
    thetas = sample_svo(spec)
    learner = learner or LearnerConfig()
    slots = []
    for i, th in enumerate(thetas):
        pol = NeuralPolicy(arch, rng=np.random.default_rng([spec.seed, 2, i]), learner=learner)
        slots.append(AgentSlot(i, SvoParams(float(th), spec.weight_w), pol))
    return Population(spec, slots, np.random.default_rng([spec.seed, 1]))


def sample_arena(pop: Population, rng: np.random.Generator, arena_id: int = 0) -> ArenaAssignment:
    """Draw ``group_size`` distinct members uniformly, plus a fresh episode seed."""
    N, n = pop.spec.n_population, pop.spec.group_size
    members = rng.choice(N, size=n, replace=False)
    seed = int(rng.integers(0, 2**31 - 1))
    return ArenaAssignment(arena_id, seed, tuple(int(m) for m in members))


# -- training ----------------------------------------------------------------


@dataclass
class TrainSettings:
    env_id: str
    layout: MapLayout
    env_kwargs: dict = field(default_factory=dict)
    arenas: int = 4
    rounds: int = 10
    episode_length: int = 1000
    smoothing_lambda: float = 0.975
    checkpoint_every: int = 0  # 0: only at the end
    replay_every: int = 0  # 0: never
    deterministic: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.arenas < 1 or self.rounds < 0 or self.episode_length < 1:
            raise ValueError("arenas and episode_length must be positive, rounds non-negative")


LOG_COLUMNS = (
    "round",
    "arena",
    "episode_seed",
    "agent_id",
    "theta_svo_deg",
    "theta_svo_rad",
    "weight_w",
    "extrinsic_return",
    "utility_return",
    "collective_return",
    "equality",
    "punish_count",
    "policy_loss",
    "value_loss",
    "entropy",
    "grad_norm",
    "update_status",
)


@dataclass
class ArenaJob:
    """Everything a worker process needs to play one arena episode."""

    assignment: ArenaAssignment
    env_id: str
    layout_text: str
    env_kwargs: dict
    episode_length: int
    lam: float
    arch: dict
    params: list[np.ndarray]
    svo: list[tuple[float, float]]
    record_replay: bool


def _play(job: ArenaJob, policies: list[NeuralPolicy] | None = None) -> EpisodeRecord:
    from svo_marl.maps import parse_map

    a = job.assignment
    if policies is None:
        spec = ArchSpec(**job.arch)
        policies = [NeuralPolicy(spec, p) for p in job.params]
    world = make_env(job.env_id, parse_map(job.layout_text), len(a.members), a.episode_seed, job.env_kwargs)
    return run_episode(
        world,
        policies,
        [SvoParams(th, w) for th, w in job.svo],
        job.episode_length,
        np.random.default_rng([a.episode_seed, 7]),
        lam=job.lam,
        agent_ids=list(a.members),
        record_replay=job.record_replay,
        env_kwargs=job.env_kwargs,
    )


class Trainer:
    """Drives ``rounds`` of training and owns the run directory."""

    def __init__(self, pop: Population, settings: TrainSettings, out_dir: str | Path | None = None):
        self.pop = pop
        self.settings = settings
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.start_round = 0
        self.rows: list[dict] = []
        self.quarantined: list[tuple[int, int, dict]] = []

    # -- persistence ---------------------------------------------------------

    @property
    def log_path(self) -> Path:
        return self.out_dir / "training_log.csv"

    def checkpoint(self, round_done: int) -> Path:
        """Save every agent plus a manifest for the state after ``round_done`` rounds."""
        d = self.out_dir / "checkpoints" / f"round_{round_done:06d}"
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for s in self.pop.slots:
            name = f"agent_{s.agent_id:02d}.ckpt"
            meta = {
                "agent_id": s.agent_id,
                "theta_svo": s.svo.theta_svo,
                "theta_svo_deg": s.svo.theta_deg,
                "weight_w": s.svo.weight_w,
                "episodes": s.episodes,
                "cumulative_return": s.cumulative_return,
                "env_id": self.settings.env_id,
            }
            files[name] = s.policy.save(d / name, meta)
        manifest = {
            "round": round_done,
            "env_id": self.settings.env_id,
            "map_sha256": self.settings.layout.sha256,
            "population": {k: getattr(self.pop.spec, k) for k in self.pop.spec.__dataclass_fields__},
            "agents": [
                {"agent_id": s.agent_id, "theta_svo": s.svo.theta_svo, "weight_w": s.svo.weight_w, "file": f"agent_{s.agent_id:02d}.ckpt"}
                for s in self.pop.slots
            ],
            "sha256": files,
            "sampler_state": self.pop.rng.bit_generator.state,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    def resume(self) -> int:
        """Restore the latest complete checkpoint under ``out_dir``. Returns rounds already done."""
        ck = latest_checkpoint(self.out_dir)
        if ck is None:
            return 0
        manifest = json.loads((ck / "manifest.json").read_text())
        if manifest["env_id"] != self.settings.env_id or manifest["map_sha256"] != self.settings.layout.sha256:
            raise CheckpointError(f"{ck}: checkpoint was written for a different environment or map")
        for s, entry in zip(self.pop.slots, manifest["agents"], strict=True):
            pol, meta = NeuralPolicy.load(ck / entry["file"])
            if meta["theta_svo"] != s.svo.theta_svo:
                raise CheckpointError(f"{ck}: agent {s.agent_id} SVO differs from the population spec")
            s.policy = pol
            s.episodes = meta["episodes"]
            s.cumulative_return = meta["cumulative_return"]
        self.pop.rng.bit_generator.state = manifest["sampler_state"]
        done = int(manifest["round"])
        self._truncate_log(done)
        log.info("resumed from %s (round %d)", ck, done)
        return done

    def _truncate_log(self, rounds_done: int) -> None:
        if not self.log_path.exists():
            return
        with open(self.log_path, newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["round"]) < rounds_done]
        with open(self.log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            w.writerows(kept)

    # -- loop ------------------------------------------------------------------

    def run(self, resume: bool = True) -> list[dict]:
        st = self.settings
        start = 0
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if resume:
                start = self.resume()
            if start == 0 or not self.log_path.exists():
                with open(self.log_path, "w", newline="") as fh:
                    csv.DictWriter(fh, fieldnames=LOG_COLUMNS).writeheader()
        self.start_round = start
        pool = None
        if not st.deterministic and st.workers > 1:
            pool = ProcessPoolExecutor(max_workers=st.workers)
        try:
            for rnd in range(start, st.rounds):
                rows = self.run_round(rnd, pool)
                self.rows.extend(rows)
                if self.out_dir is not None:
                    with open(self.log_path, "a", newline="") as fh:
                        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
                        w.writerows({k: _fmt(r[k]) for k in LOG_COLUMNS} for r in rows)
                    done = rnd + 1
                    if done == st.rounds or (st.checkpoint_every and done % st.checkpoint_every == 0):
                        self.checkpoint(done)
        finally:
            if pool is not None:
                pool.shutdown()
        if self.out_dir is not None and st.rounds == 0:
            self.checkpoint(0)
        return self.rows

    def _jobs(self, rnd: int) -> list[ArenaJob]:
        st = self.settings
        jobs = []
        for a in range(st.arenas):
            asg = sample_arena(self.pop, self.pop.rng, a)
            slots = [self.pop.slots[m] for m in asg.members]
            jobs.append(
                ArenaJob(
                    assignment=asg,
                    env_id=st.env_id,
                    layout_text=st.layout.text,
                    env_kwargs=st.env_kwargs,
                    episode_length=st.episode_length,
                    lam=st.smoothing_lambda,
                    arch=slots[0].policy.spec.to_dict(),
                    params=[s.policy.params.copy() for s in slots],
                    svo=[(s.svo.theta_svo, s.svo.weight_w) for s in slots],
                    record_replay=bool(self.out_dir is not None and st.replay_every and (rnd + 1) % st.replay_every == 0 and a == 0),
                )
            )
        return jobs

    def run_round(self, rnd: int, pool=None) -> list[dict]:
        jobs = self._jobs(rnd)
        if pool is not None:
            records = list(pool.map(_play, jobs))
        else:
            # parameter snapshots make the serial path see exactly what workers would
            records = []
            for job in jobs:
                spec = self.pop.slots[job.assignment.members[0]].policy.spec
                records.append(_play(job, [NeuralPolicy(spec, p) for p in job.params]))

        batches: dict[int, list] = {}
        for job, rec in zip(jobs, records):
            for k, agent in enumerate(job.assignment.members):
                batches.setdefault(agent, []).append(rec.trajectories[k])
                slot = self.pop.slots[agent]
                slot.episodes += 1
                slot.cumulative_return += float(rec.extrinsic_returns[k])
            if job.record_replay:
                replay_io.write(rec.replay, self.out_dir / "replays" / f"round_{rnd + 1:06d}_arena_{job.assignment.arena_id:02d}.svorpl")

        diags: dict[int, dict] = {}
        for agent in sorted(batches):
            slot = self.pop.slots[agent]
            try:
                d = slot.policy.update(batches[agent])
                d["status"] = "ok"
            except NonFiniteLossError as exc:
                log.warning("round %d agent %d: update quarantined: %s", rnd, agent, exc.diagnostics)
                self.quarantined.append((rnd, agent, exc.diagnostics))
                d = dict(exc.diagnostics, status="quarantined")
            diags[agent] = d

        rows = []
        for job, rec in zip(jobs, records):
            totals = rec.extrinsic_returns
            utils = rec.utility_returns
            punish = rec.punish_counts()
            eq = equality(totals)
            for k, agent in enumerate(job.assignment.members):
                slot = self.pop.slots[agent]
                d = diags[agent]
                rows.append(
                    {
                        "round": rnd,
                        "arena": job.assignment.arena_id,
                        "episode_seed": job.assignment.episode_seed,
                        "agent_id": agent,
                        "theta_svo_deg": slot.svo.theta_deg,
                        "theta_svo_rad": slot.svo.theta_svo,
                        "weight_w": slot.svo.weight_w,
                        "extrinsic_return": float(totals[k]),
                        "utility_return": float(utils[k]),
                        "collective_return": float(totals.sum()),
                        "equality": eq,
                        "punish_count": int(punish[k]),
                        "policy_loss": d.get("policy_loss", math.nan),
                        "value_loss": d.get("value_loss", math.nan),
                        "entropy": d.get("entropy", math.nan),
                        "grad_norm": d.get("grad_norm", math.nan),
                        "update_status": d["status"],
                    }
                )
        return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def latest_checkpoint(out_dir: str | Path | None) -> Path | None:
    if out_dir is None:
        return None
    root = Path(out_dir) / "checkpoints"
    if not root.is_dir():
        return None
    done = sorted(p for p in root.glob("round_*") if (p / "manifest.json").exists())
    return done[-1] if done else None


def load_population_checkpoint(ck_dir: str | Path) -> tuple[dict, list[NeuralPolicy], list[SvoParams]]:
    """Read a checkpoint directory back into (manifest, policies, SVO params), verifying file hashes."""
    ck_dir = Path(ck_dir)
    mpath = ck_dir / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"{ck_dir}: no manifest.json (not a checkpoint directory)")
    manifest = json.loads(mpath.read_text())
    policies, svo = [], []
    for entry in manifest["agents"]:
        pol, meta = NeuralPolicy.load(ck_dir / entry["file"])
        if manifest["sha256"][entry["file"]] != _payload_hash(ck_dir / entry["file"]):
            raise CheckpointError(f"{ck_dir / entry['file']}: does not match the manifest hash")
        policies.append(pol)
        svo.append(SvoParams(meta["theta_svo"], meta["weight_w"]))
    return manifest, policies, svo


def _payload_hash(path: Path) -> str:
    from svo_marl.policy import load_arrays

    header, _ = load_arrays(path)
    return header["sha256"]


def read_training_log(path: str | Path) -> list[dict]:
    """Load a training_log.csv with numeric columns converted."""
    ints = {"round", "arena", "episode_seed", "agent_id", "punish_count"}
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (v if k == "update_status" else int(v) if k in ints else float(v)) for k, v in r.items()})
    return rows
