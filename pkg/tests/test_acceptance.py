"""Acceptance criteria, one test per criterion.

The slow criteria share one run of the desk-scale manifest
(``manifests/desk.cfg``); set ``DEEPTRUCK_DESK_RUN`` to an existing run
directory to reuse it.  Each test prints a PASS/FAIL line and the terminal
summary lists them all.
"""

import json
import os
import re
import time
from pathlib import Path

import numpy as np
import pytest

from deeptruck import pipeline as pl
from deeptruck.cacc import CaccConfig, CaccEnv, CaccState, DeepEgo
from deeptruck.cyclegen import CycleGenConfig, generate_dataset, profile_coverage, sample_acceleration, road_random_walk, spanning_profiles
from deeptruck.episode import read_dataset
from deeptruck.model import A, V, DeepTruckModel, IoSpec, forward_deployment
from deeptruck.plant import PlantConfig
from deeptruck.policy import sample_action
from deeptruck.train import SliceSampler, TrainConfig, backprop_kstep, loss_kstep, make_batch, train

pytestmark = pytest.mark.acceptance

MANIFEST = Path(__file__).resolve().parents[1] / "manifests" / "desk.cfg"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    reuse = os.environ.get("DEEPTRUCK_DESK_RUN")
    if reuse:
        return Path(reuse)
    return pl.run_experiment(MANIFEST, out=tmp_path_factory.mktemp("desk") / "run")


def summary(run, stage):
    return json.loads((run / stage / "run.json").read_text())["summary"]


def stage_seconds(run, stage) -> float:
    m = re.search(r"stage \S+ done in ([0-9.]+) s", (run / "logs" / f"{stage}.log").read_text())
    return float(m.group(1)) if m else float("nan")


# -- 1 -------------------------------------------------------------------------------


def test_c1_constraint_exactness(desk_run, criterion):
    t0 = time.perf_counter()
    model = DeepTruckModel.load(desk_run / "train-model" / "model.ckpt")
    episodes = read_dataset(desk_run / "gen-data" / "validation")
    T = 400
    slices = SliceSampler(episodes, T + 1).sample(np.random.default_rng(0), 100)
    u = np.stack([episodes[e].u[k : k + T] for e, k in slices], axis=1)
    w = np.stack([episodes[e].w[k : k + T] for e, k in slices], axis=1)
    y0 = np.stack([episodes[e].y[k] for e, k in slices])
    y = forward_deployment(model, u, w, y0, T)
    res = np.abs(y[1:, :, V] - y[:-1, :, V] - y[1:, :, A] * model.io.dt) / np.maximum(np.abs(y[1:, :, V]), 1.0)
    dt = time.perf_counter() - t0
    ok = criterion(1, "constraint exactness", res.max() < 1e-9 and dt < 60,
                   f"max relative residual {res.max():.2e} over 100 rollouts, {dt:.1f} s")
    assert ok


# -- 2 -------------------------------------------------------------------------------


def test_c2_gradient_oracle(criterion):
    t0 = time.perf_counter()
    episodes = generate_dataset(CycleGenConfig(), PlantConfig(), 0.05, seed=0)
    io = IoSpec.from_episodes(episodes)
    model = DeepTruckModel.initialize(io, np.random.default_rng(0), 4, TrainConfig().decoder_sizes)
    K, M = 8, 4
    batch = make_batch(episodes, SliceSampler(episodes, K + 1).sample(np.random.default_rng(1), M), K, io.w_dim)
    _, g = backprop_kstep(model, batch)
    h, worst, count = 1e-5, 0.0, 0
    for name, P in model.params.items():
        for idx in np.ndindex(P.shape):
            q = {k: v.copy() for k, v in model.params.items()}
            q[name][idx] += h
            lp = loss_kstep(model.with_params(q), batch)
            q[name][idx] -= 2 * h
            lm = loss_kstep(model.with_params(q), batch)
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[name][idx]) / max(abs(fd), abs(g[name][idx]), 1e-5))
            count += 1
    dt = time.perf_counter() - t0
    ok = criterion(2, "gradient oracle", worst < 1e-4 and dt < 60,
                   f"worst relative error {worst:.2e} over {count} parameters, {dt:.1f} s")
    assert ok


# -- 3 -------------------------------------------------------------------------------


def test_c3_replica_fidelity(desk_run, criterion):
    data = summary(desk_run, "gen-data")
    val = summary(desk_run, "validate-model")
    params = json.loads((desk_run / "validate-model" / "run.json").read_text())["params"]
    train_min = stage_seconds(desk_run, "train-model") / 60
    checks = [
        data["train_hours"] >= 4.0,
        val["trials"] == 90 and params["horizon"] * CaccConfig().dt == pytest.approx(40.0),
        val["max_abs_mean_v_error"] < 0.5,
        val["fraction_max_v_error_below_1.5"] >= 0.8,
        val["max_abs_mean_a_error"] <= 0.5,
        train_min <= 30,
    ]
    ok = criterion(
        3, "replica fidelity", all(checks),
        f"{data['train_hours']:.2f} h data, |mean v err| max {val['max_abs_mean_v_error']:.3f} m/s, "
        f"{val['fraction_max_v_error_below_1.5']:.0%} trials within 1.5 m/s, "
        f"|mean a err| max {val['max_abs_mean_a_error']:.3f} m/s^2, {val['trials']} trials, training {train_min:.1f} min",
    )
    assert ok


# -- 4 -------------------------------------------------------------------------------


def test_c4_learning_curve_convergence(desk_run, criterion):
    rows = np.genfromtxt(desk_run / "train-model" / "curve.csv", delimiter=",", names=True)
    curves = [rows["deploy_form_loss"]]
    episodes = read_dataset(desk_run / "gen-data" / "train")
    io = IoSpec.from_episodes(episodes)
    cfg = TrainConfig()
    for seed in (101, 202):
        rng = np.random.default_rng(seed)
        model = DeepTruckModel.initialize(io, rng, cfg.hidden_size, cfg.decoder_sizes)
        _, curve = train(model, episodes, cfg, rng)
        curves.append(np.array(curve.deploy_form_loss))
    ratios = [c[-1] / c[0] for c in curves]
    finite = all(np.all(np.isfinite(c)) for c in curves)
    ok = criterion(4, "learning-curve convergence", finite and max(ratios) < 0.2,
                   "final/epoch-0 deployment loss " + ", ".join(f"{r:.3f}" for r in ratios)
                   + f" on 3 seeds, all finite: {finite}")
    assert ok


# -- 5 -------------------------------------------------------------------------------


def test_c5_cycle_generator_coverage(criterion):
    t0 = time.perf_counter()
    cfg = CycleGenConfig()
    profiles = spanning_profiles(cfg, 1.0, seed=0)
    table = profile_coverage(profiles, cfg)
    v = np.concatenate([p.v_raw for p in profiles])
    in_range = v.min() >= cfg.v_min and v.max() <= cfg.v_max
    dt = time.perf_counter() - t0
    ok = criterion(5, "cycle-generator coverage", np.all(table > 0) and in_range and dt < 60,
                   f"{int(np.sum(table[:, 0] + table[:, 1] > 0))}/10 deciles occupied, min cell {table.min()}, "
                   f"raw speed range [{v.min():.3f}, {v.max():.3f}], {dt:.1f} s")
    assert ok


# -- 6 -------------------------------------------------------------------------------


def test_c6_cacc_environment(desk_run, criterion):
    t0 = time.perf_counter()
    cfg = CaccConfig()
    env = CaccEnv(cfg, DeepEgo(DeepTruckModel.load(desk_run / "train-model" / "model.ckpt"), cfg.idle_fuel_rate))
    rng = np.random.default_rng(0)
    n, T = 8, cfg.horizon
    s = env.reset(rng, n)
    y0 = s.ego.y.copy()
    actions = rng.uniform(0, 100, (T, n, 2))
    v = [s.v_ego]
    for k in range(T):
        s, _, _ = env.step(s, actions[k])
        v.append(s.v_ego)
    ref = forward_deployment(env.ego.model, actions, np.zeros((T, n, 1)), y0, T)
    diff = np.max(np.abs(np.array(v) - ref[:, :, 1]))

    gaps = np.array([cfg.d_safety - 1e-9, cfg.d_safety, cfg.d_safety + 1e-9])
    probe = env.reset(np.random.default_rng(1), 3)
    probe = CaccState(
        p_leader=np.zeros(3), p_ego=-gaps, v_leader=np.full(3, 10.0), v_ego=np.full(3, 10.0),
        ego=env.ego.start(np.full(3, 10.0), np.zeros(3)), Tg_target=np.full(3, 0.5), grade=np.zeros(3),
    )
    _, _, done = env.step(probe, np.zeros((3, 2)))
    crash_ok = done.tolist() == [True, True, False]

    perfect = CaccState(
        p_leader=np.zeros(1), p_ego=np.array([-30.0]), v_leader=np.array([15.0]), v_ego=np.array([15.0]),
        ego=env.ego.start(np.array([15.0]), np.zeros(1)), Tg_target=np.array([2.0]), grade=np.zeros(1),
    )
    r, _ = env.reward(perfect, np.zeros(1), np.zeros(1))
    dt = time.perf_counter() - t0
    ok = criterion(6, "CACC environment", diff < 1e-12 and crash_ok and r[0] == 0.0 and dt < 60,
                   f"max |v_env - v_deploy| {diff:.1e}, crash flags {done.tolist()}, "
                   f"perfect-tracking reward {r[0]}, {dt:.1f} s")
    assert ok


# -- 7 -------------------------------------------------------------------------------


def test_c7_policy_quality_deep_env(desk_run, criterion):
    deep = summary(desk_run, "eval-policy")["deep"]
    train_min = stage_seconds(desk_run, "train-policy") / 60
    ok = criterion(
        7, "policy quality (deep env)",
        deep["rollouts"] == 100 and deep["fraction_settled"] >= 0.9 and deep["crashes"] == 0 and train_min <= 45,
        f"{deep['fraction_settled']:.0%} of {deep['rollouts']} rollouts settled, {deep['crashes']} crashes, "
        f"training {train_min:.1f} min",
    )
    assert ok


# -- 8 -------------------------------------------------------------------------------


def test_c8_transfer_gap(desk_run, criterion):
    plant = summary(desk_run, "eval-policy")["plant"]
    ss = plant["steady_state_mean_time_gap_error"]
    ok = criterion(8, "transfer gap (surrogate plant)",
                   plant["rollouts"] == 10 and plant["crashes"] == 0 and abs(ss) < 0.3,
                   f"{plant['rollouts']} rollouts, {plant['crashes']} crashes, steady-state mean time-gap error {ss:+.3f} s")
    assert ok


# -- 9 -------------------------------------------------------------------------------


def test_c9_determinism(desk_run, tmp_path_factory, criterion):
    again = pl.run_experiment(MANIFEST, out=tmp_path_factory.mktemp("desk-again") / "run")
    a, b = pl.numeric_checksums(desk_run), pl.numeric_checksums(again)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = criterion(9, "determinism", not differing and len(a) > 0,
                   f"{len(a)} numeric artifacts compared, {len(differing)} differ {differing[:3]}")
    assert ok


# -- 10 ------------------------------------------------------------------------------


def test_c10_statistical_oracles(criterion):
    results = {}
    mean, std = np.array([12.0, -3.0]), np.array([2.0, 0.5])
    x = sample_action(np.broadcast_to(mean, (100_000, 2)), std, np.random.default_rng(0))
    results["gaussian sampler"] = np.allclose(x.mean(axis=0), mean, rtol=0.01) and np.allclose(
        x.std(axis=0), std, rtol=0.01
    )

    cfg = CycleGenConfig(v_ref=17.5, v_max=35.0, sigma_a_scaling=2.0)
    rng = np.random.default_rng(2)
    draws = np.array([sample_acceleration(17.5, cfg, rng) for _ in range(100_000)])
    results["sigma_a moments"] = abs(draws.std() / (0.5 * cfg.sigma_a_scaling) - 1) < 0.02 and abs(draws.mean()) < 0.01

    walk = CycleGenConfig(road_walk_step_std=0.2)
    rng = np.random.default_rng(11)
    finals = np.array([road_random_walk(walk, rng, 501)[-1] for _ in range(1000)])
    results["random-walk variance"] = abs(finals.var() / (500 * 0.2**2) - 1) < 0.10

    ok = criterion(10, "statistical oracles", all(results.values()),
                   ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in results.items()))
    assert ok
