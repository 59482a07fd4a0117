import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeptruck.cacc import CaccConfig, CaccEnv, CaccState, DeepEgo, PlantEgo, discounted_sum, rollout, run_batch
from deeptruck.model import DeepTruckModel, IoSpec, forward_deployment
from deeptruck.plant import PlantConfig

CFG = CaccConfig()


def replica(seed=0):
    io = IoSpec(
        u_offset=np.array([30.0, 10.0]), u_scale=np.array([30.0, 20.0]),
        y_offset=np.array([0.0, 15.0, 5.0]), y_scale=np.array([0.5, 8.0, 5.0]),
    )
    return DeepTruckModel.initialize(io, np.random.default_rng(seed), 6, (6,))


def deep_env(cfg=CFG, seed=0):
    return CaccEnv(cfg, DeepEgo(replica(seed)))


def plant_env(cfg=CFG):
    return CaccEnv(cfg, PlantEgo(PlantConfig()))


def state(gap, v_ego, v_leader, Tg=2.0, env=None):
    env = env or plant_env()
    v_ego, v_leader = np.atleast_1d(v_ego).astype(float), np.atleast_1d(v_leader).astype(float)
    n = len(v_ego)
    return CaccState(
        p_leader=np.zeros(n), p_ego=-np.atleast_1d(gap).astype(float), v_leader=v_leader, v_ego=v_ego,
        ego=env.ego.start(v_ego, np.zeros(n)), Tg_target=np.full(n, Tg), grade=np.zeros(n),
    )


# -- reset ------------------------------------------------------------------------


def test_reset_distributions():
    s = plant_env().reset(np.random.default_rng(0), 10_000)
    assert s.v_leader.min() >= 8.3 and s.v_leader.max() <= 22.2
    assert s.v_leader.mean() == pytest.approx(15.25, rel=0.01)
    assert s.Tg_target.min() >= 2.0 and s.Tg_target.max() <= 5.0
    assert np.all(s.p_leader == 0) and np.all(s.p_leader > s.p_ego)
    assert np.all(s.grade == 0)


def test_initial_gap_reconstructed_from_draws():
    s = plant_env().reset(np.random.default_rng(1), 500)
    e = s.init_draws["position_error"]
    assert np.all(np.abs(e) <= 1.39)
    assert np.array_equal(s.gap, s.v_ego * s.Tg_target + e)
    assert np.array_equal(s.v_ego, s.v_leader + s.init_draws["speed_error"])


def test_graded_mode_draws_constant_grade():
    env = plant_env(CaccConfig(grade_mode="graded"))
    s = env.reset(np.random.default_rng(2), 1000)
    assert np.abs(s.grade).max() <= 2.0 and s.grade.std() > 0.5
    assert env.observe(s).shape == (1000, 5)
    s2, _, _ = env.step(s, np.zeros((1000, 2)))
    assert np.array_equal(s2.grade, s.grade)


def test_deep_warm_start_output():
    env = deep_env()
    s = env.reset(np.random.default_rng(0), 3)
    assert np.array_equal(s.ego.y[:, 1], s.v_ego)
    assert np.all(s.ego.y[:, 0] == 0) and np.all(s.ego.y[:, 2] == CFG.idle_fuel_rate)
    assert np.all(s.ego.x.hidden == 0)


# -- reward and step --------------------------------------------------------------


def test_reward_zero_at_perfect_tracking():
    s = state(gap=30.0, v_ego=15.0, v_leader=15.0, Tg=2.0)
    r, crash = plant_env().reward(s, np.zeros(1), np.zeros(1))
    assert r[0] == 0.0 and not crash[0]


def test_crash_boundary_is_inclusive():
    env = plant_env()
    gaps = np.array([CFG.d_safety - 1e-9, CFG.d_safety, CFG.d_safety + 1e-9])
    s = state(gap=gaps, v_ego=np.full(3, 10.0), v_leader=np.full(3, 10.0), Tg=0.5)
    _, r, done = env.step(s, np.zeros((3, 2)))
    assert list(done) == [True, True, False]
    assert np.all(r[:2] <= -CFG.alpha_crash) and r[2] > -CFG.alpha_crash


def test_reward_value_by_hand():
    s = state(gap=25.0, v_ego=10.0, v_leader=12.0, Tg=2.0)
    r, _ = plant_env().reward(s, np.array([50.0]), np.array([10.0]))
    assert r[0] == pytest.approx(-(5.0**2) - 2.0**2 - 1e-4 * 2500 - 1e-4 * 100, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(
    gap=st.floats(0, 500), v_ego=st.floats(0, 40), v_leader=st.floats(0, 40), Tg=st.floats(0.5, 6),
    E=st.floats(0, 100), B=st.floats(0, 100),
)
def test_reward_nonpositive(gap, v_ego, v_leader, Tg, E, B):
    r, _ = plant_env().reward(state(gap, v_ego, v_leader, Tg), np.array([E]), np.array([B]))
    assert r[0] <= 0.0


def test_actions_clamped_before_use():
    env = plant_env()
    s = state(gap=30.0, v_ego=15.0, v_leader=15.0)
    _, r_hi, _ = env.step(s, np.array([[250.0, -40.0]]))
    _, r_cl, _ = env.step(s, np.array([[100.0, 0.0]]))
    assert r_hi[0] == r_cl[0]


def test_leader_kinematics_independent_of_actions():
    env = deep_env()
    rng = np.random.default_rng(3)
    s0 = env.reset(rng, 4)
    a = s0
    b = s0
    for k in range(1, 101):
        a, _, _ = env.step(a, np.zeros((4, 2)))
        b, _, _ = env.step(b, rng.uniform(0, 100, (4, 2)))
        assert np.array_equal(a.p_leader, b.p_leader)
    assert np.allclose(a.p_leader, s0.v_leader * 100 * CFG.dt, rtol=1e-13)


def test_ego_position_is_kinematic():
    env = plant_env()
    s = env.reset(np.random.default_rng(0), 2)
    nxt, _, _ = env.step(s, np.full((2, 2), 20.0))
    assert np.array_equal(nxt.p_ego, s.p_ego + s.v_ego * CFG.dt)


def test_env_matches_forward_deployment():
    env = deep_env(seed=4)
    rng = np.random.default_rng(5)
    n, T = 6, 200
    s = env.reset(rng, n)
    y0 = s.ego.y.copy()
    actions = rng.uniform(0, 100, (T, n, 2))
    v = [s.v_ego]
    for k in range(T):
        s, _, _ = env.step(s, actions[k])
        v.append(s.v_ego)
    ref = forward_deployment(env.ego.model, actions, np.zeros((T, n, 1)), y0, T)
    assert np.max(np.abs(np.array(v) - ref[:, :, 1])) < 1e-12


def test_non_finite_ego_velocity_raises():
    m = replica()
    p = dict(m.params)
    p["D1_b"] = np.array([1e308, 0.0, 0.0])
    env = CaccEnv(CFG, DeepEgo(m.with_params(p)))
    s = env.reset(np.random.default_rng(0), 1)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError):
        for _ in range(100):
            s, _, _ = env.step(s, [[100.0, 0.0]])


# -- rollouts -----------------------------------------------------------------------


def test_geometric_return_example():
    # closed form of the 800-term geometric series: 768.873...
    assert discounted_sum(-np.ones(800), 0.9999) == pytest.approx(-768.8735, abs=1e-4)
    assert discounted_sum(-np.ones(800), 0.9999) == pytest.approx(-(1 - 0.9999**800) / (1 - 0.9999), rel=1e-12)


def test_zero_discount_returns_first_reward():
    env = plant_env()
    traj, ret = rollout(env, lambda o, r: np.full((len(o), 2), 30.0), np.random.default_rng(0), 50, gamma=0.0)
    assert ret == traj.rewards[0]


def test_seeded_rollout_replays_bit_identically():
    env = deep_env()
    act = lambda o, r: r.uniform(0, 100, (len(o), 2))
    a, ra = rollout(env, act, np.random.default_rng(8), 100)
    b, rb = rollout(env, act, np.random.default_rng(8), 100)
    assert ra == rb and np.array_equal(a.obs, b.obs) and np.array_equal(a.actions, b.actions)


def test_crash_truncates_and_is_flagged():
    env = plant_env()
    # full throttle closes the gap to a slow leader
    trajs, _ = run_batch(env, lambda o, r: np.tile([100.0, 0.0], (len(o), 1)), np.random.default_rng(0), 3)
    for t in trajs:
        assert t.crashed and len(t) < CFG.horizon
        assert t.rewards[-1] <= -CFG.alpha_crash
        assert np.all(t.rewards[:-1] > -CFG.alpha_crash)


def test_batch_rollouts_match_single_rollouts():
    env = plant_env()
    act = lambda o, r: np.column_stack([20 + 2 * (o[:, 2] - o[:, 3]), np.zeros(len(o))])
    batch, _ = run_batch(env, act, np.random.default_rng(0), 3, 120)
    s = env.reset(np.random.default_rng(0), 3)
    for i, t in enumerate(batch):
        one = CaccState(
            s.p_leader[i : i + 1], s.p_ego[i : i + 1], s.v_leader[i : i + 1], s.v_ego[i : i + 1],
            env.ego.start(s.v_ego[i : i + 1], s.grade[i : i + 1]), s.Tg_target[i : i + 1], s.grade[i : i + 1],
        )
        single, _ = run_batch(env, act, None, 1, 120, state=one)
        assert np.array_equal(single[0].obs, t.obs)


def test_horizon_longer_than_env_rejected():
    with pytest.raises(ValueError):
        run_batch(plant_env(), lambda o, r: np.zeros((len(o), 2)), np.random.default_rng(0), 1, CFG.horizon + 1)


@pytest.mark.parametrize(
    "kwargs", [{"alpha_p": -1.0}, {"v_leader_range": (5.0, 1.0)}, {"grade_mode": "hilly"}, {"gamma": 0.0}]
)
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        CaccConfig(**kwargs)


def test_trajectory_csv_header(tmp_path):
    traj, _ = rollout(plant_env(), lambda o, r: np.zeros((len(o), 2)), np.random.default_rng(0), 5)
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,v_leader,v_ego,gap,desired_gap,E_cmd,B_cmd,r,gap_error,speed_error"
    assert len(lines) == 6
