"""ASCII map format.

One character per cell, one line per row. Legend:

    #        wall
    .        open floor
    P        avatar spawn point (open floor)
    O        orchard cell (Cleanup apple spawn)
    R        river cell (Cleanup)
    0-9 a-z  HarvestPatch apple site; the character is the base-36 patch id

Lines starting with ``;`` are comments. Trailing whitespace is ignored, but
every row must have the same width.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

OPEN, WALL, ORCHARD, RIVER = 0, 1, 2, 3

_PATCH_CHARS = "0123456789abcdefghijklmnopqrstuvwxyz"


class MapError(ValueError):
    """Malformed map text or a map that violates an environment invariant."""


@dataclass(frozen=True)
class MapLayout:
    text: str
    terrain: np.ndarray
    spawn_points: tuple[tuple[int, int], ...]
    patch_sites: dict[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    river_cells: tuple[tuple[int, int], ...] = ()
    orchard_cells: tuple[tuple[int, int], ...] = ()

    @property
    def height(self) -> int:
        return self.terrain.shape[0]

    @property
    def width(self) -> int:
        return self.terrain.shape[1]

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def parse_map(text: str) -> MapLayout:
    rows = [line.rstrip() for line in text.splitlines()]
    rows = [r for r in rows if r and not r.startswith(";")]
    if not rows:
        raise MapError("map is empty")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise MapError(f"row {i} has width {len(r)}, expected {width}")

    terrain = np.zeros((len(rows), width), dtype=np.int8)
    spawns, rivers, orchards = [], [], []
    patches: dict[int, list[tuple[int, int]]] = {}
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            pos = (r, c)
            if ch == "#":
                terrain[r, c] = WALL
            elif ch == ".":
                pass
            elif ch == "P":
                spawns.append(pos)
            elif ch == "O":
                terrain[r, c] = ORCHARD
                orchards.append(pos)
            elif ch == "R":
                terrain[r, c] = RIVER
                rivers.append(pos)
            elif ch in _PATCH_CHARS:
                terrain[r, c] = ORCHARD
                patches.setdefault(_PATCH_CHARS.index(ch), []).append(pos)
            else:
                raise MapError(f"unknown map character {ch!r} at row {r}, col {c}")
    if not spawns:
        raise MapError("map has no spawn points ('P')")
    canonical = "\n".join(rows) + "\n"
    return MapLayout(
        text=canonical,
        terrain=terrain,
        spawn_points=tuple(spawns),
        patch_sites={k: tuple(v) for k, v in sorted(patches.items())},
        river_cells=tuple(rivers),
        orchard_cells=tuple(orchards),
    )


def load_map(path: str | Path) -> MapLayout:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"map file not found: {path}")
    return parse_map(path.read_text())


BUNDLED_MAPS = {
    "harvestpatch": "harvestpatch.txt",
    "harvestpatch_micro": "harvestpatch_micro.txt",
    "cleanup": "cleanup.txt",
    "cleanup_micro": "cleanup_micro.txt",
}


def bundled_map(name: str) -> MapLayout:
    try:
        fname = BUNDLED_MAPS[name]
    except KeyError:
        raise MapError(f"no bundled map named {name!r}; have {sorted(BUNDLED_MAPS)}") from None
    return parse_map(resources.files("svo_marl.mapdata").joinpath(fname).read_text())


def hex_patch_map(
    height: int = 24,
    width: int = 26,
    row_centers: tuple[int, ...] = (1, 8, 15, 22),
    col_centers: tuple[tuple[int, ...], tuple[int, ...]] = ((2, 10, 18), (6, 14, 22)),
    spawns: tuple[tuple[int, int], ...] = (
        (4, 3), (4, 11), (4, 19), (11, 7), (11, 15), (11, 23), (18, 3), (18, 11), (18, 19), (11, 1),
    ),
) -> str:
    """Lay out plus-shaped 5-site patches on an offset (hex-like) lattice."""
    grid = [["."] * width for _ in range(height)]
    pid = 0
    for k, r in enumerate(row_centers):
        for c in col_centers[k % 2]:
            for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
                grid[r + dr][c + dc] = _PATCH_CHARS[pid]
            pid += 1
    for r, c in spawns:
        if grid[r][c] != ".":
            raise MapError(f"spawn point {(r, c)} collides with a patch site")
        grid[r][c] = "P"
    return "\n".join("".join(row) for row in grid) + "\n"
