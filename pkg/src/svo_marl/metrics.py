"""Outcome and behavioral measures computed from completed episodes and training logs.

Missing values (an undefined angle, an agent that never transitioned to
cleaning) are ``nan`` and are skipped by the aggregate helpers.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from svo_marl.svo import reward_angle

ABSTENTION_VERSION = 1


# -- outcome measures --------------------------------------------------------


def gini(returns) -> float:
    """Pairwise Gini coefficient sum_ij |r_i - r_j| / (2 n^2 mean) of non-negative values."""
    r = np.asarray(returns, dtype=np.float64)
    n = r.size
    total = r.sum()
    if total == 0:
        return 0.0
    # sorted closed form of the pairwise sum: sum_i (2i - n + 1) r_(i)
    s = np.sort(r)
    pair_sum = 2.0 * float(np.dot(2 * np.arange(n) - n + 1, s))
    return float(pair_sum / (2.0 * n * total))


def equality(returns, with_flag: bool = False):
    """Inverse Gini score in [0, 1]: 1 for identical returns, 0 when one agent earns everything.

    Negative returns are shifted by the group minimum first; pass
    ``with_flag=True`` to also get whether that happened. All-zero (or
    all-equal after shifting) returns score 1.
    """
    r = np.asarray(returns, dtype=np.float64)
    n = r.size
    if n < 2:
        raise ValueError("equality needs at least 2 returns")
    if not np.all(np.isfinite(r)):
        raise ValueError("equality needs finite returns")
    shifted = bool(r.min() < 0)
    if shifted:
        r = r - r.min()
    if r.sum() == 0:
        score = 1.0
    else:
        score = 1.0 - (n / (n - 1)) * gini(r)
        score = float(min(1.0, max(0.0, score)))
    return (score, shifted) if with_flag else score


@dataclass(frozen=True)
class EquilibriumWindow:
    """Which training rounds count as "at equilibrium".

    ``trailing``: the last ``fraction`` of rounds (at least one).
    ``plateau``: the least-squares slope of the per-round mean return over
    each backward window of ``plateau_rounds`` rounds is computed; the window
    starts at the beginning of the first backward window after which every
    slope stays within ``slope_tolerance``. Falls back to ``trailing`` if the
    series never settles.
    """

    rule: str = "trailing"
    fraction: float = 0.1
    slope_tolerance: float = 0.01
    plateau_rounds: int = 10

    def __post_init__(self):
        if self.rule not in ("trailing", "plateau"):
            raise ValueError(f"unknown equilibrium rule {self.rule!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        if self.plateau_rounds < 2:
            raise ValueError("plateau_rounds must be at least 2")

    def select(self, round_means: Sequence[float]) -> np.ndarray:
        """Indices (into ``round_means``) of the rounds inside the window."""
        y = np.asarray(round_means, dtype=np.float64)
        R = y.size
        if R == 0:
            raise ValueError("cannot resolve an equilibrium window over zero rounds")
        if self.rule == "plateau":
            start = plateau_start(y, self.plateau_rounds, self.slope_tolerance)
            if start is not None:
                return np.arange(start, R)
        k = max(1, int(math.ceil(self.fraction * R - 1e-9)))
        return np.arange(R - k, R)


def backward_slopes(y: np.ndarray, m: int) -> np.ndarray:
    """Least-squares slope of y[t-m+1 : t+1] for t = m-1 .. len(y)-1."""
    x = np.arange(m, dtype=np.float64) - (m - 1) / 2.0
    denom = float(x @ x)
    windows = np.lib.stride_tricks.sliding_window_view(y, m)
    return windows @ x / denom


def plateau_start(y: np.ndarray, m: int, tol: float) -> int | None:
    if y.size < m:
        return None
    flat = np.abs(backward_slopes(y, m)) <= tol
    if not flat[-1]:
        return None
    # last non-flat backward window; the plateau begins right after it
    bad = np.flatnonzero(~flat)
    first_ok = 0 if bad.size == 0 else int(bad[-1]) + 1
    return first_ok  # window ending at first_ok + m - 1 starts at first_ok


def median_return(
    rounds: Sequence[int],
    agent_ids: Sequence[int],
    returns: Sequence[float],
    window: EquilibriumWindow | None = None,
) -> float:
    """Median over agents of each agent's mean per-episode return inside the window.

    Inputs are parallel columns of a training log (one entry per agent per
    episode). The window is resolved on the per-round mean return.
    """
    window = window or EquilibriumWindow()
    rounds = np.asarray(rounds)
    agent_ids = np.asarray(agent_ids)
    returns = np.asarray(returns, dtype=np.float64)
    if rounds.size == 0:
        raise ValueError("empty training log: no rounds to take a median over")
    uniq = np.unique(rounds)
    means = np.array([returns[rounds == r].mean() for r in uniq])
    chosen = uniq[window.select(means)]
    mask = np.isin(rounds, chosen)
    if not mask.any():
        raise ValueError("equilibrium window is empty")
    per_agent = [returns[mask & (agent_ids == a)].mean() for a in np.unique(agent_ids[mask])]
    return float(np.median(per_agent))


# -- behavioral measures -------------------------------------------------------


def observed_reward_angle(record, agent: int) -> float:
    """Reward angle of the episode-total extrinsic returns from ``agent``'s seat; nan if all zero."""
    return reward_angle(record.extrinsic_returns, agent, degenerate=math.nan)


def abstention(record, agent: int, n_patches: int | None = None, length: int | None = None) -> float:
    """1 minus the time-weighted share of endangered apples ``agent`` ate.

    Each endangered apple eaten at (0-indexed) step t costs
    ``(T - 1 - t) / ((T - 1) * P)``: nothing on the final step, a full
    ``1/P`` on the first. Clamped to [0, 1].
    """
    P = record.n_patches if n_patches is None else n_patches
    if P <= 0:
        raise ValueError("abstention needs a map with at least one apple patch")
    T = record.length if length is None else length
    if T <= 1:
        return 1.0
    cost = sum((T - 1 - t) for t, a, _ in record.events.endangered_eaten if a == agent)
    return min(1.0, max(0.0, 1.0 - cost / ((T - 1) * P)))


def interagent_distance(record, agent: int, mode: str = "nearest") -> float:
    """Mean over steps of the Euclidean distance to the nearest (or, mode="mean", every) other avatar."""
    pos = record.positions.astype(np.float64)
    n = pos.shape[1]
    if n < 2 or pos.shape[0] == 0:
        return math.nan
    d = np.sqrt(((pos - pos[:, agent : agent + 1]) ** 2).sum(-1))
    d = np.delete(d, agent, axis=1)
    if mode == "nearest":
        per_step = d.min(axis=1)
    elif mode == "mean":
        per_step = d.mean(axis=1)
    else:
        raise ValueError(f"unknown distance mode {mode!r}")
    return float(per_step.mean())


def pollution_cleaned(record, agent: int) -> int:
    return int(sum(k for _, a, k in record.events.cleans if a == agent))


def preparedness(record, agent: int) -> tuple[float, int]:
    """(mean apples in view at river transitions, number of transitions); mean is nan with none."""
    counts = [k for _, a, k in record.events.transitions if a == agent]
    if not counts:
        return math.nan, 0
    return float(np.mean(counts)), len(counts)


# -- per-episode bundle and export ---------------------------------------------


@dataclass
class AgentEpisodeMetrics:
    episode: int
    seed: int
    env_id: str
    slot: int
    agent_id: int
    theta_svo_deg: float
    extrinsic_return: float
    utility_return: float
    collective_return: float
    equality: float
    equality_shifted: bool
    observed_angle: float
    abstention: float
    nearest_distance: float
    mean_pairwise_distance: float
    pollution_cleaned: int
    preparedness: float
    transitions: int
    punish_fires: int


METRIC_COLUMNS = tuple(AgentEpisodeMetrics.__dataclass_fields__)


def episode_metrics(record, episode: int = 0, theta_deg: Sequence[float] | None = None) -> list[AgentEpisodeMetrics]:
    """All measures for every agent of one episode."""
    totals = record.extrinsic_returns
    utils = record.utility_returns
    collective = float(totals.sum())
    eq, shifted = equality(totals, with_flag=True)
    punish = record.punish_counts()
    harvest = record.env_id == "harvestpatch"
    cleanup = record.env_id == "cleanup"
    rows = []
    for k in range(record.n_agents):
        prep, ntrans = preparedness(record, k) if cleanup else (math.nan, 0)
        rows.append(
            AgentEpisodeMetrics(
                episode=episode,
                seed=record.seed,
                env_id=record.env_id,
                slot=k,
                agent_id=record.agent_ids[k],
                theta_svo_deg=float(theta_deg[k]) if theta_deg is not None else math.nan,
                extrinsic_return=float(totals[k]),
                utility_return=float(utils[k]),
                collective_return=collective,
                equality=eq,
                equality_shifted=shifted,
                observed_angle=observed_reward_angle(record, k),
                abstention=abstention(record, k) if harvest else math.nan,
                nearest_distance=interagent_distance(record, k, "nearest"),
                mean_pairwise_distance=interagent_distance(record, k, "mean"),
                pollution_cleaned=pollution_cleaned(record, k) if cleanup else 0,
                preparedness=prep,
                transitions=ntrans,
                punish_fires=int(punish[k]),
            )
        )
    return rows


def write_metrics_csv(rows: Iterable[AgentEpisodeMetrics], path: str | Path) -> Path:
    """One row per (episode, agent). Writes the header even when there are no rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in asdict(row).items()})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return v


def nanmean(values) -> float:
    v = np.asarray(list(values), dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


SUMMARY_COLUMNS = (
    "label",
    "runs",
    "collective_return_mean",
    "collective_return_std",
    "equality_mean",
    "equality_std",
    "median_return_mean",
    "median_return_std",
    "failed",
)


def summarize_runs(label: str, runs: list[dict]) -> dict:
    """Mean and standard deviation across runs of per-run collective return, equality and median return.

    Each run dict carries ``collective_return``, ``equality`` and
    ``median_return`` (already reduced over that run's equilibrium window),
    or ``failed=True``.
    """
    ok = [r for r in runs if not r.get("failed")]
    out = {"label": label, "runs": len(ok), "failed": len(runs) - len(ok)}
    for key in ("collective_return", "equality", "median_return"):
        v = np.array([r[key] for r in ok], dtype=np.float64)
        out[f"{key}_mean"] = float(v.mean()) if v.size else math.nan
        out[f"{key}_std"] = float(v.std(ddof=1)) if v.size > 1 else (0.0 if v.size else math.nan)
    return out


def write_summary_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def training_log_summary(rows: list[dict], window: EquilibriumWindow | None = None) -> dict:
    """Collective return, equality and median return of one run inside its equilibrium window.

    ``rows`` are training-log rows (one per round, arena and agent). The
    window is resolved on the per-round mean extrinsic return; collective
    return and equality are averaged over the arena episodes it contains.
    """
    if not rows:
        raise ValueError("empty training log")
    window = window or EquilibriumWindow()
    rounds = np.array([int(r["round"]) for r in rows])
    agents = np.array([int(r["agent_id"]) for r in rows])
    rets = np.array([float(r["extrinsic_return"]) for r in rows])
    uniq = np.unique(rounds)
    chosen = set(uniq[window.select([rets[rounds == u].mean() for u in uniq])].tolist())
    episodes = {}
    for r in rows:
        if int(r["round"]) in chosen:
            episodes[(int(r["round"]), int(r["arena"]))] = (float(r["collective_return"]), float(r["equality"]))
    vals = np.array(list(episodes.values()))
    return {
        "collective_return": float(vals[:, 0].mean()),
        "equality": float(vals[:, 1].mean()),
        "median_return": median_return(rounds, agents, rets, window),
        "window_rounds": len(chosen),
    }
