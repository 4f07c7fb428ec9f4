"""Run and sweep configuration: YAML files validated by a strict schema.

Unknown keys are rejected everywhere. Angles are given in degrees.

Any key can be overridden from the environment with
``SVOMARL__<section>__<key>=<yaml value>``; for example
``SVOMARL__learner__learning_rate=0.01`` or
``SVOMARL__population__svo__theta_deg=45``. Overrides are applied before
validation, so they are checked like file values.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from svo_marl.envs import DEFAULT_WEIGHT, ENVIRONMENTS
from svo_marl.maps import BUNDLED_MAPS, MapLayout, bundled_map, load_map
from svo_marl.nn import ArchSpec
from svo_marl.policy import LearnerConfig
from svo_marl.population import PopulationSpec, TrainSettings

ENV_PREFIX = "SVOMARL__"


class ConfigFileError(ValueError):
    """Config could not be read or failed validation; message lists every bad field."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HarvestPatchSection(Strict):
    regrowth_radius: float = Field(3.0, gt=0)
    distance: Literal["euclidean", "l1"] = "euclidean"
    regrowth_probabilities: list[float] = [0.0, 0.01, 0.01, 0.05, 0.05, 0.05, 0.10]
    initial_apple_prob: float = Field(0.8, gt=0, le=1)

    @field_validator("regrowth_probabilities")
    @classmethod
    def _table(cls, v):
        if not v or any(not 0.0 <= p <= 1.0 for p in v):
            raise ValueError("entries must lie in [0, 1]")
        if v[0] != 0.0:
            raise ValueError("entry 0 must be 0 (no live neighbors, no regrowth)")
        return v


class CleanupSection(Strict):
    pollution_spawn_prob: float = Field(0.5, ge=0, le=1)
    depletion_threshold: float = Field(0.4, gt=0, le=1)
    max_spawn_prob: float = Field(0.05, ge=0, le=1)
    growth_mode: Literal["linear", "step"] = "linear"
    start_polluted: bool = True
    initial_apple_prob: float = Field(0.5, ge=0, le=1)


class EnvSection(Strict):
    id: Literal["harvestpatch", "cleanup"] = "harvestpatch"
    map: Optional[str] = None  # bundled map name or file path; default: the task's full map
    episode_length: int = Field(1000, ge=1)
    punish_length: int = Field(10, ge=0)
    clean_length: int = Field(3, ge=0)
    punish_timeout: int = Field(0, ge=0)
    harvestpatch: HarvestPatchSection = HarvestPatchSection()
    cleanup: CleanupSection = CleanupSection()


class SvoSection(Strict):
    distribution: Literal["homogeneous", "normal"] = "homogeneous"
    theta_deg: float = Field(0.0, ge=0, le=90)
    mean_deg: float = 45.0
    std_deg: float = Field(0.0, ge=0)


class PopulationSection(Strict):
    size: int = Field(30, ge=1)
    group_size: int = Field(5, ge=1)
    svo: SvoSection = SvoSection()
    weight_w: Optional[float] = Field(None, ge=0)  # default: the task's tuned weight
    smoothing_lambda: float = Field(0.975, ge=0, lt=1)

    @model_validator(mode="after")
    def _sizes(self):
        if self.group_size > self.size:
            raise ValueError(f"group_size {self.group_size} exceeds population size {self.size}")
        return self


class LearnerSection(Strict):
    gamma: float = Field(0.99, ge=0, lt=1)
    learning_rate: float = Field(4e-4, ge=0)
    entropy_coef: float = Field(0.003, ge=0)
    value_coef: float = Field(0.5, ge=0)
    batch_size: int = Field(0, ge=0)
    max_grad_norm: float = Field(0.0, ge=0)
    normalize_advantages: bool = False


class ArchSection(Strict):
    conv_channels: int = Field(6, ge=1)
    kernel: int = Field(3, ge=1)
    hidden: int = Field(64, ge=1)
    recurrent: int = Field(64, ge=1)


class TrainingSection(Strict):
    arenas: int = Field(100, ge=1)
    rounds: int = Field(100, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    replay_every: int = Field(0, ge=0)


class EvalSection(Strict):
    episodes: int = Field(100, ge=0)
    group_size: int = Field(5, ge=1)
    greedy: bool = False


class RunSection(Strict):
    seed: int = Field(0, ge=0)
    out: str = "runs/default"
    deterministic: bool = True
    workers: int = Field(1, ge=1)


class RunConfig(Strict):
    env: EnvSection = EnvSection()
    population: PopulationSection = PopulationSection()
    learner: LearnerSection = LearnerSection()
    arch: ArchSection = ArchSection()
    training: TrainingSection = TrainingSection()
    eval: EvalSection = EvalSection()
    run: RunSection = RunSection()

    # -- conversions to runtime objects --------------------------------------

    def layout(self, base_dir: Path | None = None) -> MapLayout:
        name = self.env.map or self.env.id
        if name in BUNDLED_MAPS:
            return bundled_map(name)
        p = Path(name)
        if not p.is_absolute() and base_dir is not None and not p.exists():
            p = base_dir / p
        return load_map(p)

    def env_kwargs(self) -> dict:
        e = self.env
        params = (e.harvestpatch if e.id == "harvestpatch" else e.cleanup).model_dump()
        return {
            "punish_length": e.punish_length,
            "clean_length": e.clean_length,
            "punish_timeout": e.punish_timeout,
            "params": params,
        }

    @property
    def weight_w(self) -> float:
        w = self.population.weight_w
        return DEFAULT_WEIGHT[self.env.id] if w is None else w

    def population_spec(self) -> PopulationSpec:
        p = self.population
        return PopulationSpec(
            n_population=p.size,
            group_size=p.group_size,
            distribution=p.svo.distribution,
            theta_deg=p.svo.theta_deg,
            mean_deg=p.svo.mean_deg,
            std_deg=p.svo.std_deg,
            weight_w=self.weight_w,
            seed=self.run.seed,
        )

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(n_actions=ENVIRONMENTS[self.env.id][0].n_actions, **self.arch.model_dump())

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(**self.learner.model_dump())

    def train_settings(self, layout: MapLayout) -> TrainSettings:
        t = self.training
        return TrainSettings(
            env_id=self.env.id,
            layout=layout,
            env_kwargs=self.env_kwargs(),
            arenas=t.arenas,
            rounds=t.rounds,
            episode_length=self.env.episode_length,
            smoothing_lambda=self.population.smoothing_lambda,
            checkpoint_every=t.checkpoint_every,
            replay_every=t.replay_every,
            deterministic=self.run.deterministic,
            workers=self.run.workers,
        )


# -- sweeps ----------------------------------------------------------------------


class Linspace(Strict):
    start: float
    stop: float
    num: int = Field(ge=1)

    def values(self) -> list[float]:
        return [float(v) for v in np.linspace(self.start, self.stop, self.num)]


Axis = Union[list[float], Linspace]


def _axis(v: Axis) -> list[float]:
    return v.values() if isinstance(v, Linspace) else [float(x) for x in v]


class SweepGrid(Strict):
    mode: Literal["svo", "weight"] = "svo"
    means_deg: Axis = [45.0]
    stds_deg: Axis = [0.0]
    weights: Axis = [0.2]
    theta_deg: float = Field(90.0, ge=0, le=90)  # homogeneous target used in weight mode
    seeds: list[int] = [0]

    @model_validator(mode="after")
    def _nonempty(self):
        axes = [self.seeds] + ([_axis(self.weights)] if self.mode == "weight" else [_axis(self.means_deg), _axis(self.stds_deg)])
        if any(len(a) == 0 for a in axes):
            raise ValueError("sweep grid is empty")
        if self.mode == "weight" and any(w < 0 for w in _axis(self.weights)):
            raise ValueError("weights must be non-negative")
        if self.mode == "svo" and any(s < 0 for s in _axis(self.stds_deg)):
            raise ValueError("standard deviations must be non-negative")
        return self


class WindowSection(Strict):
    rule: Literal["trailing", "plateau"] = "trailing"
    fraction: float = Field(0.1, gt=0, le=1)
    slope_tolerance: float = Field(0.01, ge=0)
    plateau_rounds: int = Field(10, ge=2)


class SweepConfig(Strict):
    base: Union[str, RunConfig]
    grid: SweepGrid = SweepGrid()
    window: WindowSection = WindowSection()
    out: str = "runs/sweep"


def sweep_cells(sweep: SweepConfig, base: RunConfig) -> list[tuple[str, RunConfig]]:
    """Expand the grid into (label, RunConfig) cells, seeds innermost."""
    g = sweep.grid
    cells = []
    if g.mode == "svo":
        for mean in _axis(g.means_deg):
            for std in _axis(g.stds_deg):
                for seed in g.seeds:
                    cfg = base.model_copy(deep=True)
                    cfg.population.svo = SvoSection(distribution="normal", mean_deg=mean, std_deg=std)
                    cfg.run.seed = seed
                    cells.append((f"mean{mean:g}_std{std:g}_seed{seed}", cfg))
    else:
        for w in _axis(g.weights):
            for seed in g.seeds:
                cfg = base.model_copy(deep=True)
                cfg.population.svo = SvoSection(distribution="homogeneous", theta_deg=g.theta_deg)
                cfg.population.weight_w = w
                cfg.run.seed = seed
                cells.append((f"w{w:g}_seed{seed}", cfg))
    return cells


# -- loading -------------------------------------------------------------------


def env_overrides(environ=None) -> dict:
    """Nested dict built from ``SVOMARL__a__b=value`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p for p in key[len(ENV_PREFIX) :].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_yaml(path: Path) -> dict:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"{path}: not valid YAML: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")
    return data


def format_validation_error(exc: ValidationError, source: str) -> str:
    lines = [f"{source}: invalid configuration"]
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def parse_run_config(data: dict, source: str = "<config>", environ=None) -> RunConfig:
    data = deep_merge(data, env_overrides(environ))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigFileError(format_validation_error(exc, source)) from None


def load_run_config(path: str | Path, environ=None) -> RunConfig:
    path = Path(path)
    return parse_run_config(_read_yaml(path), str(path), environ)


def load_sweep_config(path: str | Path, environ=None) -> tuple[SweepConfig, RunConfig]:
    """Parse a sweep file and resolve its base run config (path relative to the sweep file)."""
    path = Path(path)
    data = _read_yaml(path)
    base = data.get("base")
    if isinstance(base, str):
        base_path = Path(base)
        if not base_path.is_absolute():
            base_path = path.parent / base_path
        base_data = _read_yaml(base_path)
        source = str(base_path)
    elif isinstance(base, dict):
        base_data = base
        source = f"{path}:base"
    else:
        raise ConfigFileError(f"{path}: 'base' must be a config path or an inline mapping")
    base_cfg = parse_run_config(base_data, source, environ)
    try:
        sweep = SweepConfig.model_validate({**data, "base": base_cfg})
    except ValidationError as exc:
        raise ConfigFileError(format_validation_error(exc, str(path))) from None
    return sweep, base_cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
