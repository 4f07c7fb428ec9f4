"""Command-line entry point: ``svo-marl {train,eval,sweep,replay,export}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 integrity
error (corrupt replay or checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from svo_marl import __version__
from svo_marl import replay as replay_io
from svo_marl.config import (
    ConfigFileError,
    RunConfig,
    dump_config,
    load_run_config,
    load_sweep_config,
    sweep_cells,
)
from svo_marl.envs import make_env, resimulate
from svo_marl.episode import run_episode
from svo_marl.grid import ConfigError
from svo_marl.maps import MapError
from svo_marl.metrics import (
    ABSTENTION_VERSION,
    EquilibriumWindow,
    episode_metrics,
    summarize_runs,
    training_log_summary,
    write_metrics_csv,
    write_summary_csv,
)
from svo_marl.policy import CheckpointError
from svo_marl.population import (
    Trainer,
    latest_checkpoint,
    load_population_checkpoint,
    materialize_population,
    read_training_log,
    sample_svo,
)
from svo_marl.scripted import SCRIPTED_KINDS, apple_positions as apple_cells, scripted_policy
from svo_marl.svo import SvoParams

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INTEGRITY = 0, 2, 3, 4

log = logging.getLogger("svo_marl")


def code_version_hash() -> str:
    """SHA-256 over the package's source files and bundled maps."""
    h = hashlib.sha256()
    root = resources.files("svo_marl")
    paths = sorted(p for p in Path(str(root)).rglob("*") if p.suffix in (".py", ".txt"))
    for p in paths:
        h.update(p.relative_to(Path(str(root))).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- config plumbing -------------------------------------------------------------


def _load(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.run.out = args.out
    if getattr(args, "deterministic", None) is not None:
        cfg.run.deterministic = args.deterministic
    if getattr(args, "workers", None) is not None:
        cfg.run.workers = args.workers
    return RunConfig.model_validate(cfg.model_dump()), Path(args.config).resolve().parent


# -- train -------------------------------------------------------------------------


def train_run(cfg: RunConfig, base_dir: Path | None = None, resume: bool = True) -> Path:
    """Train one population; returns the run directory."""
    layout = cfg.layout(base_dir)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    (out / "map.txt").write_text(layout.text)
    run_info = {
        "package_version": __version__,
        "code_sha256": code_version_hash(),
        "seed": cfg.run.seed,
        "deterministic": cfg.run.deterministic,
        "map_sha256": layout.sha256,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "run.json").write_text(json.dumps(run_info, indent=2, sort_keys=True))
    pop = materialize_population(cfg.population_spec(), cfg.arch_spec(), cfg.learner_config())
    trainer = Trainer(pop, cfg.train_settings(layout), out)
    trainer.run(resume=resume)
    if trainer.quarantined:
        (out / "quarantine.json").write_text(json.dumps(trainer.quarantined, default=float))
    return out


def cmd_train(args) -> int:
    cfg, base = _load(args)
    out = train_run(cfg, base, resume=not args.fresh)
    print(json.dumps({"run_dir": str(out), "training_log_sha256": file_sha256(out / "training_log.csv")}))
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------


def eval_plan(n_population: int, group_size: int, episodes: int, seed: int) -> list[tuple[int, tuple[int, ...]]]:
    """(episode seed, member ids) for each evaluation episode; a fresh group every episode."""
    if group_size > n_population:
        raise ConfigError(f"eval group_size {group_size} exceeds population size {n_population}")
    rng = np.random.default_rng([seed, 3])
    plan = []
    for _ in range(episodes):
        members = tuple(int(m) for m in rng.choice(n_population, size=group_size, replace=False))
        plan.append((int(rng.integers(0, 2**31 - 1)), members))
    return plan


def resolve_checkpoint(path) -> Path:
    """A checkpoint directory, or the latest checkpoint inside a run directory."""
    ck = Path(path)
    if (ck / "checkpoints").is_dir():
        ck = latest_checkpoint(ck) or ck
    if not (ck / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest under {path}")
    return ck


def _eval_population(cfg: RunConfig, args):
    """(policies, svo params, source label) for the population under evaluation."""
    if args.checkpoint:
        ck = resolve_checkpoint(args.checkpoint)
        manifest, policies, svo = load_population_checkpoint(ck)
        if manifest["env_id"] != cfg.env.id:
            raise ConfigError(
                f"checkpoint {ck} was trained on {manifest['env_id']!r}, config asks for {cfg.env.id!r}"
            )
        want = cfg.arch_spec().n_actions
        if policies and policies[0].n_actions != want:
            raise ConfigError(f"checkpoint policies have {policies[0].n_actions} actions, {cfg.env.id} needs {want}")
        return policies, svo, str(ck)
    kinds = [k.strip() for k in (args.policy_kind or "").split(",") if k.strip()]
    if not kinds:
        raise ConfigError("eval needs --checkpoint or --policy-kind")
    thetas = sample_svo(cfg.population_spec())
    policies = [scripted_policy(kinds[i % len(kinds)], cfg.env.id) for i in range(cfg.population.size)]
    svo = [SvoParams(float(t), cfg.weight_w) for t in thetas]
    return policies, svo, ",".join(kinds)


def cmd_eval(args) -> int:
    cfg, base = _load(args)
    episodes = cfg.eval.episodes if args.episodes is None else args.episodes
    if episodes < 0:
        raise ConfigError("--episodes must be non-negative")
    n = cfg.eval.group_size if args.group_size is None else args.group_size
    if args.dry_run:
        N = cfg.population.size
        if args.checkpoint:
            N = len(json.loads((resolve_checkpoint(args.checkpoint) / "manifest.json").read_text())["agents"])
        plan = eval_plan(N, n, episodes, cfg.run.seed)
        print(json.dumps({
            "command": "eval",
            "episodes": len(plan),
            "group_size": n,
            "population_size": N,
            "agent_episodes": sum(len(m) for _, m in plan),
            "groups": [list(m) for _, m in plan],
        }))
        return EXIT_OK
    policies, svo, source = _eval_population(cfg, args)
    plan = eval_plan(len(policies), n, episodes, cfg.run.seed)
    layout = cfg.layout(base)
    kwargs = cfg.env_kwargs()
    rows = []
    for e, (seed, members) in enumerate(plan):
        world = make_env(cfg.env.id, layout, n, seed, kwargs)
        rec = run_episode(
            world,
            [policies[m] for m in members],
            [svo[m] for m in members],
            cfg.env.episode_length,
            np.random.default_rng([seed, 7]),
            lam=cfg.population.smoothing_lambda,
            agent_ids=list(members),
            collect=False,
            greedy=cfg.eval.greedy,
        )
        rows.extend(episode_metrics(rec, e, [svo[m].theta_deg for m in members]))
    out = Path(cfg.run.out)
    path = write_metrics_csv(rows, out / "eval_metrics.csv")
    print(json.dumps({
        "metrics_csv": str(path),
        "episodes": episodes,
        "group_size": n,
        "policies": source,
        "abstention_formula_version": ABSTENTION_VERSION,
    }))
    return EXIT_OK


# -- sweep ------------------------------------------------------------------------------


def _run_cell(label: str, cfg_dict: dict, base_dir: str, window: dict) -> dict:
    try:
        cfg = RunConfig.model_validate(cfg_dict)
        out = train_run(cfg, Path(base_dir))
        rows = read_training_log(out / "training_log.csv")
        res = training_log_summary(rows, EquilibriumWindow(**window))
        return {"label": label, "run_dir": str(out), "failed": False, **res}
    except Exception as exc:  # a failing cell must not stop the sweep
        return {"label": label, "failed": True, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()}


def cmd_sweep(args) -> int:
    sweep, base_cfg = load_sweep_config(args.config)
    if args.seed is not None:
        raise ConfigError("sweep seeds come from the grid's 'seeds' list; --seed is not accepted")
    out_root = Path(args.out or sweep.out)
    cells = sweep_cells(sweep, base_cfg)
    if args.dry_run:
        print(json.dumps({
            "command": "sweep",
            "mode": sweep.grid.mode,
            "env": base_cfg.env.id,
            "populations": len(cells),
            "cells": [label for label, _ in cells],
        }))
        return EXIT_OK
    base_dir = str(Path(args.config).resolve().parent)
    jobs = []
    for label, cfg in cells:
        cfg.run.out = str(out_root / "cells" / label)
        jobs.append((label, cfg.model_dump(mode="json"), base_dir, sweep.window.model_dump()))
    workers = args.workers or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        results = [_run_cell(*j) for j in jobs]

    out_root.mkdir(parents=True, exist_ok=True)
    cell_cols = ["label", "failed", "collective_return", "equality", "median_return", "window_rounds", "run_dir", "error"]
    with open(out_root / "cells.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cell_cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(results)
    groups: dict[str, list[dict]] = {}
    for (label, _, _, _), res in zip(jobs, results):
        groups.setdefault(label.rsplit("_seed", 1)[0], []).append(res)
    summary = [summarize_runs(g, rs) for g, rs in groups.items()]
    path = write_summary_csv(summary, out_root / "summary.csv")
    for r in results:
        if r["failed"]:
            log.error("sweep cell %s failed: %s", r["label"], r["error"])
    print(json.dumps({"summary_csv": str(path), "populations": len(cells), "failed": sum(r["failed"] for r in results)}))
    return EXIT_OK


# -- replay / export ----------------------------------------------------------------------


def cmd_replay(args) -> int:
    rep = replay_io.read(args.replay)
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for world, rewards in resimulate(rep):
            state = world.summary()
            state["rewards"] = rewards
            state["apples"] = int(world.apple_count)
            if rewards is None:
                state["apple_cells"] = [list(p) for p in apple_cells(world)]
            if hasattr(world, "river"):
                state["pollution_fraction"] = world.river.pollution_fraction
            sink.write(json.dumps(state) + "\n")
        sink.write(json.dumps({"verified": True, "steps": len(rep.actions), "final_hash": rep.final_hash}) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def cmd_export(args) -> int:
    run = Path(args.run)
    log_path = run / "training_log.csv"
    if not log_path.exists():
        raise ConfigError(f"no training_log.csv in {run}")
    rows = read_training_log(log_path)
    out = Path(args.out or run / "export")
    out.mkdir(parents=True, exist_ok=True)
    window = EquilibriumWindow(rule=args.window, fraction=args.fraction)
    if not rows:
        write_summary_csv([], out / "summary.csv")
        print(json.dumps({"export_dir": str(out), "rows": 0}))
        return EXIT_OK
    res = training_log_summary(rows, window)
    write_summary_csv([summarize_runs(run.name, [res])], out / "summary.csv")
    agents: dict[int, list] = {}
    for r in rows:
        agents.setdefault(r["agent_id"], []).append(r)
    with open(out / "agents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent_id", "theta_svo_deg", "theta_svo_rad", "episodes", "mean_extrinsic_return", "mean_utility_return", "mean_punish_count"])
        for a in sorted(agents):
            rs = agents[a]
            w.writerow([
                a,
                repr(rs[0]["theta_svo_deg"]),
                repr(rs[0]["theta_svo_rad"]),
                len(rs),
                repr(float(np.mean([r["extrinsic_return"] for r in rs]))),
                repr(float(np.mean([r["utility_return"] for r in rs]))),
                repr(float(np.mean([r["punish_count"] for r in rs]))),
            ])
    print(json.dumps({"export_dir": str(out), "rows": len(rows), **{k: v for k, v in res.items() if not (isinstance(v, float) and math.isnan(v))}}))
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svo-marl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", required=True, help="run config YAML")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", help="output directory (overrides run.out)")

    t = sub.add_parser("train", help="train one population")
    common(t)
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="serialize arenas for bit-exact reproducibility")
    t.add_argument("--workers", type=int, help="arena worker processes (non-deterministic mode)")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints in the output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate frozen or scripted policies")
    common(e)
    e.add_argument("--checkpoint", help="checkpoint directory (or a run directory: latest checkpoint)")
    e.add_argument("--policy-kind", help=f"scripted policy kind(s), comma separated: {', '.join(SCRIPTED_KINDS)}")
    e.add_argument("--episodes", type=int)
    e.add_argument("--group-size", type=int)
    e.add_argument("--dry-run", action="store_true", help="print the episode/group plan without playing")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train every cell of a sweep grid and summarize")
    common(s)
    s.add_argument("--workers", type=int, help="cells trained in parallel")
    s.add_argument("--dry-run", action="store_true", help="enumerate populations without training")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("replay", help="re-simulate a replay file and dump per-step state")
    r.add_argument("replay", help="replay file (.svorpl)")
    r.add_argument("--out", help="write the JSONL dump here instead of stdout")
    r.set_defaults(func=cmd_replay)

    x = sub.add_parser("export", help="summarize a run's training log into CSV tables")
    x.add_argument("--run", required=True, help="run directory")
    x.add_argument("--out", help="export directory (default: <run>/export)")
    x.add_argument("--window", choices=("trailing", "plateau"), default="trailing")
    x.add_argument("--fraction", type=float, default=0.1)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigFileError, ConfigError, MapError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (replay_io.ReplayIntegrityError, CheckpointError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
