import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deeptruck.cacc import CaccConfig, CaccEnv, PlantEgo
from deeptruck.episode import Episode
from deeptruck.model import DeepTruckModel, IoSpec
from deeptruck.plant import PlantConfig
from deeptruck.stats import (
    CONTROL_CHANNELS,
    OUTPUT_CHANNELS,
    ErrorStatSeries,
    ModelSimulator,
    ReplaySimulator,
    control_error_stats,
    model_error_stats,
)


def episodes(n_eps=3, n=120, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_eps):
        v = 10 + np.cumsum(rng.normal(0, 0.05, n))
        a = np.concatenate([[0.0], np.diff(v) / 0.1])
        out.append(Episode(0.1, np.arange(n) * 0.1, rng.uniform(0, 50, n), np.zeros(n), v, a,
                           rng.uniform(1, 9, n), theta_rdg=rng.uniform(-2, 2, n)))
    return out


class ConstantSpeedEgo:
    """Stub backend that holds its speed whatever the command."""

    def start(self, v0, grade):
        return np.asarray(v0, float)

    def advance(self, st, E, B, grade):
        return st, st


# -- ErrorStatSeries ----------------------------------------------------------------


def test_two_pass_oracle():
    rng = np.random.default_rng(0)
    e = rng.normal(3.0, 2.0, (40, 25, 3))
    s = ErrorStatSeries.from_errors(e, OUTPUT_CHANNELS, 0.1)
    for k in (0, 7, 24):
        for j in range(3):
            x = e[:, k, j]
            m = sum(x) / len(x)
            var = sum((xi - m) ** 2 for xi in x) / len(x)
            assert s.mean[k, j] == pytest.approx(m, rel=1e-12, abs=1e-12)
            assert s.std[k, j] == pytest.approx(np.sqrt(var), rel=1e-12)
            assert s.min[k, j] == x.min() and s.max[k, j] == x.max()
    assert s.n_trials == 40 and s.steps == 25


def test_single_trial_has_zero_spread():
    e = np.random.default_rng(1).normal(size=(1, 10, 2))
    s = ErrorStatSeries.from_errors(e, ("x", "y"), 0.1)
    assert np.all(s.std == 0) and np.array_equal(s.mean, e[0])


def test_missing_samples_are_ignored():
    e = np.array([[[1.0], [2.0]], [[3.0], [np.nan]]])
    s = ErrorStatSeries.from_errors(e, ("x",), 0.1)
    assert s.mean[:, 0].tolist() == [2.0, 2.0]
    assert s.count.tolist() == [2, 1]
    with pytest.raises(ValueError):
        ErrorStatSeries.from_errors(np.full((2, 1, 1), np.nan), ("x",), 0.1)
    with pytest.raises(ValueError):
        ErrorStatSeries.from_errors(np.zeros((2, 3)), ("x",), 0.1)


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 8), st.integers(1, 6), st.just(2)), elements=st.floats(-1e6, 1e6)))
def test_mean_between_min_and_max(e):
    s = ErrorStatSeries.from_errors(e, ("x", "y"), 0.1)
    assert np.all(s.min <= s.mean) and np.all(s.mean <= s.max)
    assert np.all(s.std >= 0)


def test_csv_layout(tmp_path):
    s = ErrorStatSeries.from_errors(np.zeros((2, 3, 3)), CONTROL_CHANNELS, 0.1)
    s.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("k,t,count,gap_error_mean,gap_error_std,gap_error_min,gap_error_max")
    assert len(lines) == 4


# -- model validation --------------------------------------------------------------


def test_replay_simulator_has_zero_error():
    v = model_error_stats(ReplaySimulator(), episodes(), horizon=50, trials=20, rng=np.random.default_rng(0))
    for arr in (v.stats.mean, v.stats.std, v.stats.min, v.stats.max):
        assert np.all(arr == 0)
    assert v.fraction_within("v", 1e-12) == 1.0
    assert v.scenario.initial_speed.sum() == 20


def test_model_validation_cross_check():
    eps = episodes(seed=2)
    io = IoSpec.from_episodes(eps)
    model = DeepTruckModel.initialize(io, np.random.default_rng(0), 4, (4,))
    val = model_error_stats(model, eps, horizon=30, trials=12, rng=np.random.default_rng(3))
    sim = ModelSimulator(model)
    errs = np.array([sim(eps[e], k0, 30) - eps[e].y[k0 : k0 + 31] for e, k0 in val.slices])
    assert np.allclose(val.stats.mean, errs.mean(axis=0), rtol=1e-12, atol=1e-12)
    assert np.allclose(val.trial_max_abs, np.abs(errs).max(axis=1))
    assert np.all(val.stats.mean[0] == 0)  # trials start from the recorded output


def test_diverging_trials_are_excluded():
    eps = episodes(seed=4)
    calls = []

    def flaky(ep, k0, steps):
        from deeptruck.model import ModelDivergedError

        calls.append(k0)
        if len(calls) % 2:
            raise ModelDivergedError(3)
        return ep.y[k0 : k0 + steps + 1]

    v = model_error_stats(flaky, eps, horizon=20, trials=10, rng=np.random.default_rng(0))
    assert len(v.excluded) == 5 and len(v.slices) == 5


# -- control evaluation ------------------------------------------------------------


def test_perfect_tracking_stub_gives_zero_errors():
    cfg = CaccConfig(speed_error_range=(0.0, 0.0), position_error_range=(0.0, 0.0), horizon=300)
    env = CaccEnv(cfg, ConstantSpeedEgo())
    ev = control_error_stats(env, lambda o, r: np.zeros((len(o), 2)), trials=20, rng=np.random.default_rng(0))
    assert ev.crashes == 0
    assert np.abs(ev.stats.max).max() < 1e-9 and np.abs(ev.stats.min).max() < 1e-9
    assert ev.settled("time_gap_error", 1e-6, 0.0).all()
    assert abs(ev.steady_state_mean("speed_error")) < 1e-12


def test_control_stats_match_trajectories():
    env = CaccEnv(CaccConfig(horizon=200), PlantEgo(PlantConfig()))
    act = lambda o, r: np.column_stack([np.clip(20 + 3 * (o[:, 2] - o[:, 3]), 0, 100), np.zeros(len(o))])
    ev = control_error_stats(env, act, trials=8, rng=np.random.default_rng(1))
    ge = np.array([t.gap_error for t in ev.trajectories])
    assert np.allclose(ev.stats.channel("gap_error")["mean"], ge.mean(axis=0), rtol=1e-12, atol=1e-12)
    tg = ev.errors("time_gap_error")
    assert tg.shape == (8, 200)
    expect = [np.all(np.abs(t.time_gap_error[150:]) < 0.2) for t in ev.trajectories]
    assert ev.settled("time_gap_error", 0.2, 15.0).tolist() == expect


def test_crashed_rollouts_never_count_as_settled():
    env = CaccEnv(CaccConfig(horizon=300), PlantEgo(PlantConfig()))
    ev = control_error_stats(env, lambda o, r: np.tile([100.0, 0.0], (len(o), 1)), trials=4)
    assert ev.crashes == 4
    assert not ev.settled("gap_error", 1e9, 0.0).any()
