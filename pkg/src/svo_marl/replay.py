"""Binary replay log for a single episode.

Layout (little-endian)::

    magic      8 bytes   b"SVORPL\\x00\\x01"
    record*    u32 length | u8 kind | payload

Record kinds:

    1 HEADER   JSON: format, env_id, n_agents, seed, map_sha256, map_text, env_kwargs
    2 STEP     u32 step index, then one u8 action per agent
    3 TRAILER  u32 steps, 32-byte SHA-256 of the final world state

A JSONL mirror carries the same content for humans: one header line, one
line per step and a trailer line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

MAGIC = b"SVORPL\x00\x01"
HEADER, STEP, TRAILER = 1, 2, 3
_REC = struct.Struct("<IB")


class ReplayIntegrityError(Exception):
    """The replay file is truncated, corrupt, or does not reproduce its recorded hash."""


@dataclass
class Replay:
    env_id: str
    n_agents: int
    seed: int
    map_sha256: str
    map_text: str
    env_kwargs: dict
    actions: list[bytes] = field(default_factory=list)
    final_hash: str | None = None

    @property
    def header(self) -> dict:
        return {
            "format": 1,
            "env_id": self.env_id,
            "n_agents": self.n_agents,
            "seed": self.seed,
            "map_sha256": self.map_sha256,
            "map_text": self.map_text,
            "env_kwargs": self.env_kwargs,
        }


def from_world(world, env_kwargs: dict) -> Replay:
    """Capture a finished (or in-progress) world's action log as a Replay."""
    n = world.n_agents
    log = bytes(world.action_log)
    steps = [log[k : k + n] for k in range(0, len(log), n)]
    return Replay(
        env_id=world.env_id,
        n_agents=n,
        seed=world.seed,
        map_sha256=world.layout.sha256,
        map_text=world.layout.text,
        env_kwargs=env_kwargs,
        actions=steps,
        final_hash=world.state_hash(),
    )


def _record(kind: int, payload: bytes) -> bytes:
    return _REC.pack(len(payload), kind) + payload


def write(replay: Replay, path: str | Path, jsonl: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, _record(HEADER, json.dumps(replay.header, sort_keys=True).encode())]
    for t, acts in enumerate(replay.actions):
        chunks.append(_record(STEP, struct.pack("<I", t) + bytes(acts)))
    chunks.append(_record(TRAILER, struct.pack("<I", len(replay.actions)) + bytes.fromhex(replay.final_hash)))
    path.write_bytes(b"".join(chunks))
    if jsonl:
        with open(path.with_suffix(".jsonl"), "w") as fh:
            hdr = dict(replay.header)
            fh.write(json.dumps({"header": hdr}, sort_keys=True) + "\n")
            for t, acts in enumerate(replay.actions):
                fh.write(json.dumps({"t": t, "actions": list(acts)}) + "\n")
            fh.write(json.dumps({"steps": len(replay.actions), "final_hash": replay.final_hash}) + "\n")
    return path


def read(path: str | Path) -> Replay:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ReplayIntegrityError(f"{path}: bad magic, not a replay file")
    pos = len(MAGIC)
    replay = None
    expected_step = 0

    def where():
        return "header" if replay is None else f"step {expected_step}"

    while pos < len(data):
        if pos + _REC.size > len(data):
            raise ReplayIntegrityError(f"{path}: truncated record header at {where()}")
        length, kind = _REC.unpack_from(data, pos)
        pos += _REC.size
        if pos + length > len(data):
            raise ReplayIntegrityError(f"{path}: truncated record payload at {where()}")
        payload = data[pos : pos + length]
        pos += length
        if kind == HEADER:
            if replay is not None:
                raise ReplayIntegrityError(f"{path}: duplicate header")
            h = json.loads(payload)
            replay = Replay(
                env_id=h["env_id"],
                n_agents=h["n_agents"],
                seed=h["seed"],
                map_sha256=h["map_sha256"],
                map_text=h["map_text"],
                env_kwargs=h["env_kwargs"],
            )
        elif replay is None:
            raise ReplayIntegrityError(f"{path}: record before header")
        elif kind == STEP:
            (t,) = struct.unpack_from("<I", payload)
            acts = payload[4:]
            if t != expected_step or len(acts) != replay.n_agents:
                raise ReplayIntegrityError(f"{path}: malformed record at step {expected_step}")
            replay.actions.append(acts)
            expected_step += 1
        elif kind == TRAILER:
            (steps,) = struct.unpack_from("<I", payload)
            if steps != expected_step:
                raise ReplayIntegrityError(
                    f"{path}: trailer says {steps} steps, file holds {expected_step}"
                )
            replay.final_hash = payload[4:].hex()
            if pos != len(data):
                raise ReplayIntegrityError(f"{path}: trailing bytes after trailer")
            return replay
        else:
            raise ReplayIntegrityError(f"{path}: unknown record kind {kind} at {where()}")
    raise ReplayIntegrityError(f"{path}: truncated, no trailer after {where()}")
