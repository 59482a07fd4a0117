"""Stage functions and the manifest-driven experiment runner.

A manifest is a config file (see :mod:`deeptruck.config`) with an
``[experiment]`` section, optional component sections, and one optional
section per stage::

    [experiment]
    seed = 0
    out = runs/desk
    stages = gen-data, train-model, validate-model, train-policy, eval-policy
    config = desk.cfg          # extra component sections, relative to the manifest

    [gen-data]
    hours = 4
    validation_hours = 1

    [train-policy]
    model = pretrained/model.ckpt   # input from outside this run

Stage inputs default to the outputs of earlier stages of the same run.  All
inputs are resolved before anything runs, so a missing file is reported up
front.  Each stage writes into ``<out>/<stage>/`` a ``run.json`` (resolved
configs, seeds, git-describe string, input checksums) and a
``checksums.sha256`` of its outputs; logs go to ``<out>/logs/<stage>.log``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .cacc import CaccEnv, DeepEgo, PlantEgo
from .cyclegen import coverage_table, generate_dataset, profile_coverage, spanning_profiles
from .episode import read_dataset, write_dataset
from .model import DeepTruckModel, IoSpec
from .policy import GaussianPolicy, train_policy
from .stats import control_error_stats, model_error_stats
from .train import train

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-model", "validate-model", "train-policy", "eval-policy")
NUMERIC_SUFFIXES = (".csv", ".ckpt")

# offsets keep the default stage seeds distinct while deriving from one run seed
_STAGE_SEED_OFFSET = {name: i for i, name in enumerate(STAGES)}
_VALIDATION_DATA_OFFSET = 100


class StageError(RuntimeError):
    def __init__(self, stage: str, log_path, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause} (log: {log_path})")
        self.stage = stage
        self.log_path = Path(log_path)


class ResolutionError(ValueError):
    pass


# -- provenance ---------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_checksums(directory) -> dict[str, str]:
    directory = Path(directory)
    sums = {
        str(p.relative_to(directory)): sha256_file(p)
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != "checksums.sha256"
    }
    with open(directory / "checksums.sha256", "w") as fh:
        for name, digest in sums.items():
            fh.write(f"{digest}  {name}\n")
    return sums


def numeric_checksums(root) -> dict[str, str]:
    """Checksums of every CSV and checkpoint under ``root``."""
    root = Path(root)
    return {
        str(p.relative_to(root)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix in NUMERIC_SUFFIXES
    }


def write_run_record(directory, stage: str, seed: int, configs: dict, inputs: dict, extra=None) -> None:
    record = {
        "stage": stage,
        "seed": seed,
        "git_describe": git_describe(),
        "configs": cfgmod.to_text(configs),
        "inputs": {k: {"path": str(v), "sha256": _input_digest(v)} for k, v in inputs.items()},
    }
    if extra:
        record.update(extra)
    Path(directory, "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _input_digest(path) -> str:
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.glob("*.csv")):
            h.update(p.name.encode())
            h.update(sha256_file(p).encode())
        return h.hexdigest()
    return sha256_file(path)


# -- stages ------------------------------------------------------------------------


def coverage_csv(table, cfg, path) -> None:
    edges = np.linspace(cfg.v_min, cfg.v_max, len(table) + 1)
    with open(path, "w") as fh:
        fh.write("bin,v_lo,v_hi,decel_count,accel_count\n")
        for i, (dec, acc) in enumerate(table):
            fh.write(f"{i},{edges[i]:.17g},{edges[i + 1]:.17g},{dec},{acc}\n")


def stage_gen_data(out, configs, seed: int, hours: float, validation_hours: float = 0.0) -> dict:
    """Generate a training set (and optionally a held-out set) plus coverage reports."""
    out = Path(out)
    cg, plant = configs["cyclegen"], configs["plant"]
    eps = generate_dataset(cg, plant, hours, seed)
    write_dataset(eps, out / "train")
    summary = {"train_episodes": len(eps), "train_hours": sum(e.duration for e in eps) / 3600.0}
    if validation_hours > 0:
        val = generate_dataset(cg, plant, validation_hours, seed + _VALIDATION_DATA_OFFSET)
        write_dataset(val, out / "validation")
        summary["validation_episodes"] = len(val)
    profiles = profile_coverage(spanning_profiles(cg, hours, seed), cg)
    coverage_csv(profiles, cg, out / "coverage_profiles.csv")
    v = np.concatenate([e.v for e in eps])
    a = np.concatenate([e.a for e in eps])
    dataset = coverage_table(v, a, cg.v_min, cg.v_max)
    coverage_csv(dataset, cg, out / "coverage_dataset.csv")
    (out / "coverage_report.txt").write_text(coverage_report(profiles, dataset, cg))
    summary["profile_cells_empty"] = int(np.sum(profiles == 0))
    return summary


def coverage_report(profiles, dataset, cfg) -> str:
    """Plain-text view of the speed-decile by acceleration-sign occupancy tables."""
    edges = np.linspace(cfg.v_min, cfg.v_max, len(profiles) + 1)
    lines = ["speed bin [m/s]     profile -/+          dataset -/+"]
    for i in range(len(profiles)):
        lines.append(
            f"{edges[i]:5.1f} - {edges[i + 1]:5.1f}   {profiles[i, 0]:8d} {profiles[i, 1]:8d}"
            f"   {dataset[i, 0]:8d} {dataset[i, 1]:8d}"
        )
    empty = int(np.sum(profiles == 0))
    lines.append(f"empty profile cells: {empty}")
    return "\n".join(lines) + "\n"


def stage_train_model(out, configs, seed: int, data_dir) -> dict:
    out = Path(out)
    tc = configs["train"]
    episodes = read_dataset(data_dir)
    io = IoSpec.from_episodes(episodes)
    rng = np.random.default_rng(seed)
    model = DeepTruckModel.initialize(io, rng, tc.hidden_size, tc.decoder_sizes)
    best, curve = train(model, episodes, tc, rng)
    best.save(out / "model.ckpt")
    curve.to_csv(out / "curve.csv")
    d = curve.deploy_form_loss
    return {"epoch0_deploy_loss": d[0], "final_deploy_loss": d[-1], "best_deploy_loss": min(d)}


def stage_validate_model(out, configs, seed: int, model_path, data_dir, trials=90, horizon=400) -> dict:
    out = Path(out)
    model = DeepTruckModel.load(model_path)
    episodes = read_dataset(data_dir)
    cg = configs["cyclegen"]
    res = model_error_stats(
        model,
        episodes,
        horizon,
        trials,
        np.random.default_rng(seed),
        speed_range=(cg.v_min, cg.v_max),
        grade_range=(-cg.grade_limit, cg.grade_limit),
    )
    res.stats.to_csv(out / "error_stats.csv")
    res.scenario.to_csv(out / "scenario.csv")
    with open(out / "trials.csv", "w") as fh:
        fh.write("trial,episode,k0,max_abs_a_error,max_abs_v_error,max_abs_f_error\n")
        for i, ((e, k0), m) in enumerate(zip(res.slices, res.trial_max_abs)):
            fh.write(f"{i},{e},{k0},{m[0]:.17g},{m[1]:.17g},{m[2]:.17g}\n")
    v = res.stats.channel("v")
    a = res.stats.channel("a")
    return {
        "trials": res.stats.n_trials,
        "excluded": len(res.excluded),
        "max_abs_mean_v_error": float(np.abs(v["mean"]).max()),
        "max_abs_mean_a_error": float(np.abs(a["mean"]).max()),
        "fraction_max_v_error_below_1.5": res.fraction_within("v", 1.5),
    }


def stage_train_policy(out, configs, seed: int, model_path) -> dict:
    out = Path(out)
    pc = configs["policy"]
    env = CaccEnv(configs["cacc"], DeepEgo(DeepTruckModel.load(model_path), configs["cacc"].idle_fuel_rate))
    final, best, curve = train_policy(env, pc, rng=np.random.default_rng(seed))
    final.save(out / "policy_final.ckpt")
    best.save(out / "policy_best.ckpt")
    curve.to_csv(out / "curve.csv")
    tail = curve.rows[-10:]
    return {
        "final_average_return": curve.rows[-1].average_return if curve.rows else None,
        "crash_rate_last10": sum(r.crashes for r in tail) / max(1, sum(r.episodes for r in tail)),
    }


def evaluate_policy(out, env, policy, trials: int, seed: int, keep_rollouts: bool = True):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ev = control_error_stats(env, policy.act_deterministic, trials, np.random.default_rng(seed))
    ev.stats.to_csv(out / "error_stats.csv")
    if keep_rollouts:
        for i, tr in enumerate(ev.trajectories):
            tr.to_csv(out / f"rollout_{i:03d}.csv")
    return ev


def control_summary(ev) -> dict:
    tg_ok = ev.settled("time_gap_error", 0.2, 15.0)
    se_ok = ev.settled("speed_error", 0.1, 30.0)
    return {
        "rollouts": len(ev.trajectories),
        "crashes": ev.crashes,
        "fraction_settled": float(np.mean(tg_ok & se_ok)),
        "steady_state_mean_time_gap_error": ev.steady_state_mean("time_gap_error"),
    }


def stage_eval_policy(out, configs, seed: int, policy_path, model_path, trials=100, plant_trials=10) -> dict:
    out = Path(out)
    cc = configs["cacc"]
    policy = GaussianPolicy.load(policy_path)
    deep = evaluate_policy(
        out / "deep", CaccEnv(cc, DeepEgo(DeepTruckModel.load(model_path), cc.idle_fuel_rate)), policy, trials, seed
    )
    summary = {"deep": control_summary(deep)}
    if plant_trials:
        plant = evaluate_policy(out / "plant", CaccEnv(cc, PlantEgo(configs["plant"])), policy, plant_trials, seed)
        summary["plant"] = control_summary(plant)
    return summary


# -- manifest -------------------------------------------------------------------------


@dataclass
class StagePlan:
    name: str
    seed: int
    params: dict
    inputs: dict
    out: Path


@dataclass
class Manifest:
    path: Path
    out: Path
    seed: int
    configs: dict
    stages: list[StagePlan] = field(default_factory=list)
    threads: int | None = None


_STAGE_DEFAULTS = {
    "gen-data": {"hours": 4.0, "validation_hours": 1.0},
    "train-model": {},
    "validate-model": {"trials": 90, "horizon": 400},
    "train-policy": {"policy": "final"},
    "eval-policy": {"trials": 100, "plant_trials": 10, "policy": "final"},
}
_INPUT_KEYS = {
    "train-model": {"data": ("gen-data", "train")},
    "validate-model": {"model": ("train-model", "model.ckpt"), "data": ("gen-data", "validation")},
    "train-policy": {"model": ("train-model", "model.ckpt")},
    "eval-policy": {"model": ("train-model", "model.ckpt"), "policy_ckpt": ("train-policy", None)},
}


def load_manifest(path, out=None, seed=None) -> Manifest:
    """Parse and fully resolve a manifest; raises :class:`ResolutionError` on any missing input."""
    path = Path(path)
    if not path.exists():
        raise ResolutionError(f"manifest not found: {path}")
    raw = cfgmod.read_sections(path)
    raw.pop("", None)
    exp = {k: cfgmod.parse_value(v) for k, v in raw.pop("experiment", {}).items()}
    base = path.parent
    component = {k: raw.pop(k) for k in list(raw) if k in cfgmod.SECTIONS}
    if exp.get("config"):
        cpath = base / str(exp["config"])
        if not cpath.exists():
            raise ResolutionError(f"config file not found: {cpath}")
        extra = cfgmod.read_sections(cpath)
        extra.pop("", None)
        for name, vals in extra.items():
            if name not in cfgmod.SECTIONS:
                raise ResolutionError(f"{cpath}: unknown section {name!r}")
            component[name] = {**vals, **component.get(name, {})}
    try:
        configs = {name: cfgmod.build(cls, component.get(name, {})) for name, cls in cfgmod.SECTIONS.items()}
    except cfgmod.ConfigError as exc:
        raise ResolutionError(str(exc)) from exc
    run_seed = int(seed if seed is not None else exp.get("seed", 0))
    out_dir = Path(out) if out is not None else base / str(exp.get("out", "run"))
    names = exp.get("stages", STAGES)
    names = [n.strip() for n in names.split(",")] if isinstance(names, str) else list(names)
    for n in names:
        if n not in STAGES:
            raise ResolutionError(f"unknown stage {n!r}")
    unknown = set(raw) - set(STAGES)
    if unknown:
        raise ResolutionError(f"unknown manifest section(s) {sorted(unknown)}")
    plans = []
    for n in STAGES:
        if n not in names:
            continue
        params = dict(_STAGE_DEFAULTS[n])
        params.update({k: cfgmod.parse_value(v) for k, v in raw.get(n, {}).items()})
        stage_seed = int(params.pop("seed", run_seed + _STAGE_SEED_OFFSET[n]))
        inputs = {}
        for key, (producer, rel) in _INPUT_KEYS.get(n, {}).items():
            explicit_key = "policy_path" if key == "policy_ckpt" else key
            if explicit_key in params:
                p = Path(params.pop(explicit_key))
                p = p if p.is_absolute() else base / p
                if not p.exists():
                    raise ResolutionError(f"stage {n!r}: input {explicit_key} not found: {p}")
                inputs[key] = p
            elif producer in names:
                if n == "validate-model" and key == "data" and not _has_validation_split(raw):
                    rel = "train"
                if rel is None:
                    rel = f"policy_{params.get('policy', 'final')}.ckpt"
                inputs[key] = out_dir / producer / rel
            else:
                raise ResolutionError(f"stage {n!r}: input {explicit_key!r} not given and stage {producer!r} not run")
        plans.append(StagePlan(n, stage_seed, params, inputs, out_dir / n))
    threads = exp.get("threads")
    return Manifest(path, out_dir, run_seed, configs, plans, int(threads) if threads else None)


def _has_validation_split(raw) -> bool:
    hours = raw.get("gen-data", {}).get("validation_hours")
    hours = _STAGE_DEFAULTS["gen-data"]["validation_hours"] if hours is None else cfgmod.parse_value(hours)
    return float(hours or 0.0) > 0


def _run_stage(plan: StagePlan, configs) -> dict:
    p, i = plan.params, plan.inputs
    if plan.name == "gen-data":
        return stage_gen_data(plan.out, configs, plan.seed, float(p["hours"]), float(p["validation_hours"]))
    if plan.name == "train-model":
        return stage_train_model(plan.out, configs, plan.seed, i["data"])
    if plan.name == "validate-model":
        return stage_validate_model(
            plan.out, configs, plan.seed, i["model"], i["data"], int(p["trials"]), int(p["horizon"])
        )
    if plan.name == "train-policy":
        return stage_train_policy(plan.out, configs, plan.seed, i["model"])
    if plan.name == "eval-policy":
        return stage_eval_policy(
            plan.out, configs, plan.seed, i["policy_ckpt"], i["model"], int(p["trials"]), int(p["plant_trials"])
        )
    raise ResolutionError(plan.name)


def run_experiment(manifest_path, out=None, seed=None) -> Path:
    """Run every stage of a manifest in order; return the artifact directory."""
    m = load_manifest(manifest_path, out, seed)
    m.out.mkdir(parents=True, exist_ok=True)
    (m.out / "logs").mkdir(exist_ok=True)
    (m.out / "manifest.resolved.cfg").write_text(cfgmod.to_text(m.configs))
    summaries = {}
    for plan in m.stages:
        plan.out.mkdir(parents=True, exist_ok=True)
        log_path = m.out / "logs" / f"{plan.name}.log"
        handler = logging.FileHandler(log_path, mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root = logging.getLogger("deeptruck")
        root.addHandler(handler)
        prev_level = root.level
        root.setLevel(logging.INFO)
        t0 = time.perf_counter()
        try:
            log.info("stage %s: seed %d, inputs %s", plan.name, plan.seed, {k: str(v) for k, v in plan.inputs.items()})
            summary = _run_stage(plan, m.configs)
            log.info("stage %s done in %.1f s: %s", plan.name, time.perf_counter() - t0, summary)
        except Exception as exc:
            log.exception("stage %s failed", plan.name)
            raise StageError(plan.name, log_path, exc) from exc
        finally:
            root.removeHandler(handler)
            root.setLevel(prev_level)
            handler.close()
        write_run_record(plan.out, plan.name, plan.seed, m.configs, plan.inputs, {"params": plan.params, "summary": summary})
        write_checksums(plan.out)
        summaries[plan.name] = summary
    (m.out / "summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    write_checksums(m.out)
    return m.out
