"""Error statistics for open-loop model validation and closed-loop control.

Every statistic is taken across trials at a fixed time index ``k``, so a
series describes how the error distribution evolves with simulation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cacc import CaccEnv, run_batch
from .model import DeepTruckModel, ModelDivergedError, forward_deployment
from .train import SliceSampler

OUTPUT_CHANNELS = ("a", "v", "f_rate")
CONTROL_CHANNELS = ("gap_error", "time_gap_error", "speed_error")


@dataclass
class ErrorStatSeries:
    """Per-step mean, population std, min and max of an error across trials.

    Arrays have shape ``(steps, channels)``; ``count[k]`` is the number of
    trials contributing at step ``k`` (trials may end early, e.g. on a crash).
    """

    channels: tuple[str, ...]
    dt: float
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    count: np.ndarray

    @property
    def n_trials(self) -> int:
        return int(self.count.max(initial=0))

    @property
    def steps(self) -> int:
        return len(self.mean)

    @classmethod
    def from_errors(cls, errors, channels, dt: float) -> "ErrorStatSeries":
        """Statistics of ``errors`` shaped (trials, steps, channels); NaN marks a missing sample."""
        e = np.asarray(errors, dtype=float)
        if e.ndim != 3 or e.shape[2] != len(channels):
            raise ValueError("errors must have shape (trials, steps, channels)")
        present = ~np.isnan(e)
        count = present[:, :, 0].sum(axis=0)
        if np.any(count == 0):
            raise ValueError("every step needs at least one trial")
        n = present.sum(axis=0)
        filled = np.where(present, e, 0.0)
        mean = filled.sum(axis=0) / n
        dev = np.where(present, e - mean, 0.0)
        std = np.sqrt((dev**2).sum(axis=0) / n)
        lo = np.where(present, e, np.inf).min(axis=0)
        hi = np.where(present, e, -np.inf).max(axis=0)
        # summation rounding can push the mean a hair outside [min, max]
        mean = np.clip(mean, lo, hi)
        return cls(tuple(channels), float(dt), mean, std, lo, hi, count)

    def channel(self, name: str) -> dict[str, np.ndarray]:
        j = self.channels.index(name)
        return {"mean": self.mean[:, j], "std": self.std[:, j], "min": self.min[:, j], "max": self.max[:, j]}

    def to_csv(self, path) -> None:
        cols = ["k", "t", "count"]
        for c in self.channels:
            cols += [f"{c}_mean", f"{c}_std", f"{c}_min", f"{c}_max"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.steps):
                vals = [k * self.dt, self.count[k]]
                for j in range(len(self.channels)):
                    vals += [self.mean[k, j], self.std[k, j], self.min[k, j], self.max[k, j]]
                fh.write(str(k) + "," + ",".join(format(float(x), ".17g") for x in vals) + "\n")


# -- model validation ------------------------------------------------------------


class ModelSimulator:
    """Open-loop replay of an episode slice through a replica model."""

    def __init__(self, model: DeepTruckModel):
        self.model = model

    def __call__(self, episode, k0: int, steps: int) -> np.ndarray:
        m = self.model
        u = episode.u[k0 : k0 + steps]
        w = episode.w[k0 : k0 + steps] if m.io.w_dim and episode.w_dim else np.zeros((steps, m.io.w_dim))
        return forward_deployment(m, u, w, episode.y[k0], steps)


class ReplaySimulator:
    """Returns the recorded response: a perfect predictor used as a test stub."""

    def __call__(self, episode, k0: int, steps: int) -> np.ndarray:
        return episode.y[k0 : k0 + steps + 1].copy()


@dataclass
class ScenarioSummary:
    """Decile histograms of the conditions the validation trials visited."""

    speed_edges: np.ndarray
    grade_edges: np.ndarray
    initial_speed: np.ndarray
    visited_speed: np.ndarray
    visited_grade: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("bin,speed_lo,speed_hi,initial_speed,visited_speed,grade_lo,grade_hi,visited_grade\n")
            for i in range(len(self.initial_speed)):
                fh.write(
                    f"{i},{self.speed_edges[i]:.17g},{self.speed_edges[i + 1]:.17g},{self.initial_speed[i]},"
                    f"{self.visited_speed[i]},{self.grade_edges[i]:.17g},{self.grade_edges[i + 1]:.17g},"
                    f"{self.visited_grade[i]}\n"
                )


@dataclass
class ModelValidation:
    stats: ErrorStatSeries
    trial_max_abs: np.ndarray  # (trials, channels) worst absolute error per trial
    slices: list[tuple[int, int]]
    excluded: list[tuple[tuple[int, int], str]]
    scenario: ScenarioSummary

    def fraction_within(self, channel: str, bound: float) -> float:
        j = self.stats.channels.index(channel)
        return float(np.mean(self.trial_max_abs[:, j] < bound))


def _histogram(x, lo, hi, bins=10):
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(np.clip(x, lo, hi), bins=edges)
    return edges, counts


def model_error_stats(
    model,
    episodes,
    horizon: int = 400,
    trials: int = 90,
    rng: np.random.Generator | None = None,
    speed_range=(0.0, 35.0),
    grade_range=(-3.0, 3.0),
) -> ModelValidation:
    """Open-loop error statistics of ``horizon``-step trials drawn at random.

    ``model`` is a :class:`DeepTruckModel` or any callable
    ``(episode, k0, steps) -> (steps + 1, 3)``.  Each trial starts from the
    recorded ``y(k0)`` and never sees the data again.  Trials whose
    simulation diverges are excluded and listed.
    """
    sim = ModelSimulator(model) if isinstance(model, DeepTruckModel) else model
    rng = rng if rng is not None else np.random.default_rng(0)
    slices = SliceSampler(episodes, horizon + 1).sample(rng, trials)
    errors, kept, excluded = [], [], []
    v0, v_seen, g_seen = [], [], []
    for e, k0 in slices:
        ep = episodes[e]
        truth = ep.y[k0 : k0 + horizon + 1]
        try:
            pred = sim(ep, k0, horizon)
        except ModelDivergedError as exc:
            excluded.append(((e, k0), str(exc)))
            continue
        errors.append(pred - truth)
        kept.append((e, k0))
        v0.append(truth[0, 1])
        v_seen.append(truth[:, 1])
        if ep.w_dim:
            g_seen.append(ep.w[k0 : k0 + horizon + 1, 0])
    if not errors:
        raise ModelDivergedError(0, "every validation trial diverged")
    err = np.array(errors)
    stats = ErrorStatSeries.from_errors(err, OUTPUT_CHANNELS, episodes[0].dt)
    s_edges, s0 = _histogram(np.array(v0), *speed_range)
    _, sv = _histogram(np.concatenate(v_seen), *speed_range)
    g_edges, gv = _histogram(np.concatenate(g_seen) if g_seen else np.zeros(0), *grade_range)
    return ModelValidation(
        stats=stats,
        trial_max_abs=np.abs(err).max(axis=1),
        slices=kept,
        excluded=excluded,
        scenario=ScenarioSummary(s_edges, g_edges, s0, sv, gv),
    )


# -- control evaluation ------------------------------------------------------------


@dataclass
class ControlEvaluation:
    stats: ErrorStatSeries
    trajectories: list = field(repr=False)
    crashes: int

    def errors(self, channel: str) -> np.ndarray:
        """(trials, steps) array of one error channel, NaN after a trajectory ends."""
        j = CONTROL_CHANNELS.index(channel)
        return self._stack()[:, :, j]

    def _stack(self):
        T = self.stats.steps
        out = np.full((len(self.trajectories), T, len(CONTROL_CHANNELS)), np.nan)
        for i, tr in enumerate(self.trajectories):
            out[i, : len(tr)] = np.stack([tr.gap_error, tr.time_gap_error, tr.speed_error], axis=-1)
        return out

    def settled(self, channel: str, bound: float, after_s: float) -> np.ndarray:
        """Per rollout: |error| < bound at every step from ``after_s`` on (crashed rollouts fail)."""
        e = self.errors(channel)
        k = int(round(after_s / self.stats.dt))
        tail = np.abs(e[:, k:])
        ok = np.all(tail < bound, axis=1)
        return ok & ~np.array([tr.crashed for tr in self.trajectories])

    def steady_state_mean(self, channel: str, last_s: float = 10.0) -> float:
        """Mean across rollouts and over the final ``last_s`` seconds of each."""
        e = self.errors(channel)
        k = max(0, self.stats.steps - int(round(last_s / self.stats.dt)))
        return float(np.nanmean(e[:, k:]))


def control_error_stats(env: CaccEnv, act, trials: int = 100, rng: np.random.Generator | None = None, horizon=None):
    """Closed-loop error statistics of ``trials`` rollouts.

    ``act(obs, rng)`` should be deterministic (a policy's mean action) for
    evaluation.  Rollouts are run in one lockstep batch in fixed order.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    trajs, _ = run_batch(env, act, rng, trials, horizon)
    T = max(len(t) for t in trajs)
    err = np.full((trials, T, len(CONTROL_CHANNELS)), np.nan)
    for i, tr in enumerate(trajs):
        err[i, : len(tr)] = np.stack([tr.gap_error, tr.time_gap_error, tr.speed_error], axis=-1)
    stats = ErrorStatSeries.from_errors(err, CONTROL_CHANNELS, env.cfg.dt)
    return ControlEvaluation(stats, trajs, sum(t.crashed for t in trajs))
