"""Policies: the neural actor-critic learner and its checkpoint format.

Every policy (neural or scripted) exposes the same acting interface::

    state = policy.initial_state()
    policy.begin_episode(world, agent_index)
    action, log_prob, value, state = policy.act(obs, state, rng, greedy=False)
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from svo_marl.grid import PALETTE_UNIT, Observation
from svo_marl.nn import ActorCritic, Adam, ArchSpec

CHECKPOINT_MAGIC = b"SVOCKPT\x00"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, diagnostics: dict):
        super().__init__(f"non-finite loss or gradient; update rejected: {diagnostics}")
        self.diagnostics = diagnostics


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.99
    learning_rate: float = 4e-4
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    batch_size: int = 0  # max trajectories per update; 0 = all collected
    max_grad_norm: float = 0.0  # 0 disables clipping
    normalize_advantages: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        for name in ("learning_rate", "entropy_coef", "value_coef", "batch_size", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class Trajectory:
    """One agent's experience for one episode (all arrays length T)."""

    windows: np.ndarray  # (T, W, W) int8 cell categories
    headings: np.ndarray  # (T,)
    actions: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,) extrinsic
    utilities: np.ndarray  # (T,) learning signal
    bootstrap_value: float = 0.0

    def __post_init__(self):
        T = len(self.actions)
        for name in ("windows", "headings", "log_probs", "values", "rewards", "utilities"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"trajectory field {name} has length {len(getattr(self, name))}, expected {T}")

    def __len__(self) -> int:
        return len(self.actions)


def discounted_returns(utilities: np.ndarray, gamma: float, bootstrap: np.ndarray | float = 0.0) -> np.ndarray:
    """Returns-to-go along axis 0 of a (T, ...) array."""
    out = np.empty_like(utilities, dtype=np.float64)
    acc = np.zeros(utilities.shape[1:]) + bootstrap
    for t in range(utilities.shape[0] - 1, -1, -1):
        acc = utilities[t] + gamma * acc
        out[t] = acc
    return out


def stack_batch(trajectories: list[Trajectory], gamma: float):
    """(x, headings, actions, returns) arrays shaped (T, K, ...)."""
    if not trajectories:
        raise ValueError("empty batch")
    T = len(trajectories[0])
    if any(len(tr) != T for tr in trajectories):
        raise ValueError("all trajectories in a batch must share the same length")
    windows = np.stack([tr.windows for tr in trajectories], axis=1)  # (T, K, W, W)
    x = PALETTE_UNIT[windows].reshape(T, len(trajectories), -1)
    headings = np.stack([tr.headings for tr in trajectories], axis=1).astype(np.intp)
    actions = np.stack([tr.actions for tr in trajectories], axis=1).astype(np.intp)
    utilities = np.stack([tr.utilities for tr in trajectories], axis=1).astype(np.float64)
    boot = np.array([tr.bootstrap_value for tr in trajectories], dtype=np.float64)
    return x, headings, actions, discounted_returns(utilities, gamma, boot)


def a2c_loss_and_grad(
    net: ActorCritic,
    x: np.ndarray,
    headings: np.ndarray,
    actions: np.ndarray,
    returns: np.ndarray,
    cfg: LearnerConfig,
    advantages: np.ndarray | None = None,
):
    """Advantage actor-critic loss and its gradient.

    loss = -mean(A * log pi(a)) + value_coef * 0.5 * mean((G - V)^2)
           - entropy_coef * mean(H(pi))

    ``A = G - V`` is treated as a constant. Pass ``advantages`` to pin it
    (used by the finite-difference check).
    """
    logits, values, cache = net.forward_sequence(x, headings)
    T, K, A = logits.shape
    M = T * K
    zmax = logits.max(-1, keepdims=True)
    shifted = logits - zmax
    logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    logp_a = (logp * onehot).sum(-1)
    if advantages is None:
        adv = returns - values
        if cfg.normalize_advantages and adv.size > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    else:
        adv = advantages
    ent = -(p * logp).sum(-1)
    policy_loss = -(adv * logp_a).sum() / M
    value_loss = 0.5 * ((returns - values) ** 2).sum() / M
    entropy = ent.sum() / M
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    dlogits = (-adv[..., None] * (onehot - p) + cfg.entropy_coef * p * (logp + ent[..., None])) / M
    dvalues = cfg.value_coef * (values - returns) / M
    grad = net.backward_sequence(dlogits, dvalues, cache)
    diag = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "mean_return": float(returns[0].mean()),
    }
    return float(loss), grad, diag


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


class NeuralPolicy:
    """A learnable actor-critic policy with its own optimizer state."""

    kind = "neural"

    def __init__(
        self,
        spec: ArchSpec,
        params: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        learner: LearnerConfig | None = None,
    ):
        self.spec = spec
        self.net = ActorCritic(spec, params, rng)
        self.learner = learner or LearnerConfig()
        self.optimizer = Adam(spec.n_params, lr=self.learner.learning_rate)

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def initial_state(self) -> np.ndarray:
        return self.net.initial_state()

    def begin_episode(self, world, agent_index: int) -> None:
        pass

    def act(self, obs: Observation, state: np.ndarray, rng: np.random.Generator, greedy: bool = False):
        w = obs.window
        if w.shape != (self.spec.window, self.spec.window):
            raise ValueError(f"observation window {w.shape} does not match architecture window {self.spec.window}")
        logits, value, new_state = self.net.step(PALETTE_UNIT[w].ravel(), obs.orientation, state)
        probs = softmax(logits)
        if greedy:
            a = int(np.argmax(probs))
        else:
            a = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
            a = min(a, len(probs) - 1)
        return a, math.log(probs[a]), value, new_state

    def action_probs(self, obs: Observation, state: np.ndarray) -> np.ndarray:
        logits, _, _ = self.net.step(PALETTE_UNIT[obs.window].ravel(), obs.orientation, state)
        return softmax(logits)

    def update(self, trajectories: list[Trajectory], cfg: LearnerConfig | None = None) -> dict:
        """One gradient step on the batch. Raises NonFiniteLossError and leaves params untouched on NaN/inf."""
        cfg = cfg or self.learner
        if cfg.batch_size and len(trajectories) > cfg.batch_size:
            trajectories = trajectories[: cfg.batch_size]
        x, headings, actions, returns = stack_batch(trajectories, cfg.gamma)
        loss, grad, diag = a2c_loss_and_grad(self.net, x, headings, actions, returns, cfg)
        gnorm = float(np.sqrt(grad @ grad))
        diag["grad_norm"] = gnorm
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            raise NonFiniteLossError(diag)
        if cfg.max_grad_norm and gnorm > cfg.max_grad_norm:
            grad = grad * (cfg.max_grad_norm / gnorm)
        self.optimizer.lr = cfg.learning_rate
        self.optimizer.step(self.net.params, grad)
        return diag

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path, meta: dict | None = None) -> str:
        arrays = {
            "params": self.net.params,
            "adam_m": self.optimizer.m,
            "adam_v": self.optimizer.v,
        }
        header = {
            "arch": self.spec.to_dict(),
            "learner": asdict(self.learner),
            "adam_t": self.optimizer.t,
            "meta": meta or {},
        }
        return save_arrays(path, header, arrays)

    @classmethod
    def load(cls, path: str | Path) -> tuple["NeuralPolicy", dict]:
        header, arrays = load_arrays(path)
        spec = ArchSpec(**header["arch"])
        pol = cls(spec, arrays["params"], learner=LearnerConfig(**header["learner"]))
        pol.optimizer.m[:] = arrays["adam_m"]
        pol.optimizer.v[:] = arrays["adam_v"]
        pol.optimizer.t = header["adam_t"]
        return pol, header["meta"]


def save_arrays(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a versioned blob: magic, u16 version, u32 header length, JSON header, payload.

    The header lists each array's name/dtype/shape/offset and the SHA-256
    of the payload. Returns that content hash.
    """
    payload = bytearray()
    entries = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "dtype": "<f8", "shape": list(a.shape), "offset": len(payload), "nbytes": a.nbytes})
        payload += a.tobytes()
    digest = hashlib.sha256(payload).hexdigest()
    full = dict(header, arrays=entries, sha256=digest, format_version=CHECKPOINT_VERSION)
    hbytes = json.dumps(full, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(hbytes)) + hbytes + bytes(payload))
    return digest


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    m = len(CHECKPOINT_MAGIC)
    if data[:m] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", data, m)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = m + struct.calcsize("<HI")
    header = json.loads(data[start : start + hlen])
    payload = data[start + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header, arrays

