"""Social Value Orientation: reward angles and the SVO utility.

An agent's reward angle is ``atan2(mean of others' rewards, own reward)``.
Its utility is the extrinsic reward minus ``w`` times the angular distance
between the angle it observes and its target angle ``theta_svo``. Angles
are in radians; observations are computed on exponentially smoothed
reward traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEGENERATE_EPS = 1e-9


@dataclass(frozen=True)
class SvoParams:
    theta_svo: float
    weight_w: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.theta_svo <= math.pi / 2 + 1e-12):
            raise ValueError(f"theta_svo must lie in [0, pi/2] radians, got {self.theta_svo}")
        if self.weight_w < 0 or not math.isfinite(self.weight_w):
            raise ValueError(f"weight_w must be a finite non-negative number, got {self.weight_w}")

    @classmethod
    def from_degrees(cls, theta_deg: float, weight_w: float = 0.0) -> "SvoParams":
        return cls(math.radians(theta_deg), weight_w)

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta_svo)


class SmoothedRewards:
    """Per-agent reward traces ``e_j <- lam * e_j + r_j``."""

    def __init__(self, n: int, lam: float = 0.975):
        if not 0.0 <= lam < 1.0:
            raise ValueError(f"smoothing lambda must be in [0, 1), got {lam}")
        self.lam = lam
        self.traces = np.zeros(n, dtype=np.float64)

    def reset(self) -> None:
        self.traces[:] = 0.0

    def update(self, step_rewards) -> np.ndarray:
        r = np.asarray(step_rewards, dtype=np.float64)
        if r.shape != self.traces.shape:
            raise ValueError(f"expected {self.traces.shape[0]} rewards, got {r.shape}")
        self.traces *= self.lam
        self.traces += r
        return self.traces


def angular_distance(a, b):
    """|a - b| wrapped to [0, pi]."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % (2 * math.pi)
    return np.minimum(d, 2 * math.pi - d)


def reward_angle(rewards, i: int, degenerate: float = math.nan, eps: float = DEGENERATE_EPS) -> float:
    """Reward angle for agent ``i`` in (-pi, pi].

    When both the own reward and the others' mean are below ``eps`` in
    magnitude there is no distribution to measure and ``degenerate`` is
    returned instead.
    """
    r = np.asarray(rewards, dtype=np.float64)
    n = r.shape[0]
    if n < 2:
        raise ValueError("reward angle needs a group of at least 2")
    own = float(r[i])
    others = (float(r.sum()) - own) / (n - 1)
    if abs(own) < eps and abs(others) < eps:
        return degenerate
    return math.atan2(others, own)


def reward_angles(rewards, degenerate, eps: float = DEGENERATE_EPS) -> np.ndarray:
    """Vectorized reward_angle for every agent; ``degenerate`` is per-agent."""
    r = np.asarray(rewards, dtype=np.float64)
    n = r.shape[0]
    if n < 2:
        raise ValueError("reward angle needs a group of at least 2")
    others = (r.sum() - r) / (n - 1)
    ang = np.arctan2(others, r)
    flat = (np.abs(r) < eps) & (np.abs(others) < eps)
    return np.where(flat, degenerate, ang)


def svo_utility(r_i: float, params: SvoParams, observed_angle: float) -> float:
    return r_i - params.weight_w * float(angular_distance(params.theta_svo, observed_angle))


def transform_step_rewards(step_rewards, params: list[SvoParams], smoothed: SmoothedRewards) -> np.ndarray:
    """Update the smoothed traces, then map extrinsic rewards to utilities."""
    r = np.asarray(step_rewards, dtype=np.float64)
    if len(params) != r.shape[0]:
        raise ValueError(f"{len(params)} SVO parameter sets for {r.shape[0]} rewards")
    traces = smoothed.update(r)
    theta = np.array([p.theta_svo for p in params])
    w = np.array([p.weight_w for p in params])
    angles = reward_angles(traces, theta)
    return r - w * angular_distance(theta, angles)


class GroupUtility:
    """Stateful per-arena shaper: one SmoothedRewards plus cached targets."""

    def __init__(self, params: list[SvoParams], lam: float = 0.975):
        self.params = list(params)
        self.smoothed = SmoothedRewards(len(self.params), lam)
        self._theta = np.array([p.theta_svo for p in self.params])
        self._w = np.array([p.weight_w for p in self.params])

    def reset(self) -> None:
        self.smoothed.reset()

    def __call__(self, step_rewards) -> np.ndarray:
        r = np.asarray(step_rewards, dtype=np.float64)
        angles = reward_angles(self.smoothed.update(r), self._theta)
        return r - self._w * angular_distance(self._theta, angles)
