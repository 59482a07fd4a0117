"""Random driving cycles that span the speed/acceleration/grade space.

Three episode families are produced:

* spanning profiles: a stochastic speed controller drives a double
  integrator, the acceleration is smoothed and the speed re-integrated with a
  soft upper limit, and a proportional tracker makes the plant follow it;
* coasting: random initial speed, both pedals released;
* braking to zero: random initial speed and a random constant brake command.

All randomness flows through a ``numpy.random.Generator`` so a profile is a
pure function of the configuration and seed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from .episode import Episode
from .plant import PlantConfig, initial_state, plant_step


@dataclass(frozen=True)
class CycleGenConfig:
    v_min: float = 0.0
    v_max: float = 35.0
    v_ref: float | None = None
    mu_a_scaling: float = 1.0
    sigma_a_scaling: float = 4.0
    mu_T: float = 6.0
    sigma_T: float = 1.0
    dt: float = 0.1
    smoothing_window: int = 15
    road_walk_step_std: float = 0.04
    road_ma_window: int = 15
    grade_limit: float = 3.0
    seed: int = 0
    # episode composition
    spanning_duration: float = 600.0
    coast_max_duration: float = 120.0
    coast_epsilon: float = 0.5
    brake_min: float = 10.0
    brake_max: float = 100.0
    stop_hold: float = 7.0
    tracker_engine_gain: float = 40.0
    tracker_brake_gain: float = 20.0
    tracker_deadband: float = 0.05
    spanning_fraction: float = 0.7
    coasting_fraction: float = 0.15

    def __post_init__(self):
        if not 0 <= self.v_min < self.v_max:
            raise ValueError("need 0 <= v_min < v_max")
        if self.mu_a_scaling <= 0 or self.sigma_a_scaling <= 0 or self.sigma_T <= 0:
            raise ValueError("scalings must be > 0")
        if self.dt <= 0 or self.mu_T < self.dt:
            raise ValueError("need dt > 0 and mu_T >= dt")
        if self.smoothing_window < 1 or self.road_ma_window < 1:
            raise ValueError("moving-average windows must be >= 1")
        if self.grade_limit < 0 or self.road_walk_step_std < 0:
            raise ValueError("grade_limit and road_walk_step_std must be >= 0")

    @property
    def reference_speed(self) -> float:
        return self.v_ref if self.v_ref is not None else 0.5 * (self.v_min + self.v_max)


@dataclass
class SpeedProfile:
    t: np.ndarray
    v_raw: np.ndarray
    a_raw: np.ndarray
    resample_times: list[float] = field(default_factory=list)
    v_f: np.ndarray | None = None
    a_f: np.ndarray | None = None


def accel_statistics(v_at_Ti: float, cfg: CycleGenConfig) -> tuple[float, float]:
    """Mean and standard deviation of the acceleration draw at speed ``v_at_Ti``.

    The standard deviation expression goes negative above ``v_max``; it is
    floored at zero there.
    """
    v_ref = cfg.reference_speed
    mu = 1.0 - v_at_Ti / v_ref
    sigma = (v_at_Ti / v_ref) * (1.0 - v_at_Ti / cfg.v_max)
    return cfg.mu_a_scaling * mu, cfg.sigma_a_scaling * max(sigma, 0.0)


def sample_acceleration(v_at_Ti: float, cfg: CycleGenConfig, rng: np.random.Generator) -> float:
    mean, std = accel_statistics(v_at_Ti, cfg)
    if std == 0.0:
        return mean
    return float(rng.normal(mean, std))


def ceil_to_grid(x: float, dt: float) -> float:
    # tolerance keeps exact multiples (1.0 / 0.1 -> 10.000000000000002) on their own sample
    return math.ceil(x / dt - 1e-9) * dt


def resample_interval(draw: float, mu_a_now: float, dt: float) -> float:
    """Grid-aligned holding time for a given normal draw of the interval length."""
    return ceil_to_grid(max(draw * (1.0 - abs(mu_a_now)), dt), dt)


def next_resample_time(T_i: float, mu_a_now: float, cfg: CycleGenConfig, rng) -> float:
    """Next acceleration resampling instant; always at least one sample later."""
    if T_i < 0:
        raise ValueError("T_i must be >= 0")
    draw = float(rng.normal(cfg.mu_T, cfg.sigma_T))
    return T_i + resample_interval(draw, mu_a_now, cfg.dt)


def integrate_raw_speed(
    cfg: CycleGenConfig,
    rng: np.random.Generator,
    duration: float,
    v0: float | None = None,
    accel_fn=None,
) -> SpeedProfile:
    """Saturated double integrator driven by the resampled random acceleration.

    ``accel_fn(v, rng)`` overrides the acceleration draw (used to force known
    inputs in tests).
    """
    if duration < cfg.dt:
        raise ValueError("duration must be >= dt")
    n = int(round(duration / cfg.dt))
    if v0 is None:
        v0 = float(rng.uniform(cfg.v_min, cfg.v_max))
    draw = accel_fn if accel_fn is not None else (lambda v, r: sample_acceleration(v, cfg, r))

    v = np.empty(n + 1)
    a = np.empty(n + 1)
    v[0] = v0
    resample_steps = [0]
    a_now = draw(v0, rng)
    mu_now = 1.0 - v0 / cfg.reference_speed
    next_step = int(round(next_resample_time(0.0, mu_now, cfg, rng) / cfg.dt))
    a[0] = a_now
    for k in range(1, n + 1):
        if k == next_step:
            resample_steps.append(k)
            a_now = draw(v[k - 1], rng)
            mu_now = 1.0 - v[k - 1] / cfg.reference_speed
            next_step = int(round(next_resample_time(k * cfg.dt, mu_now, cfg, rng) / cfg.dt))
        a[k] = a_now
        v[k] = max(min(v[k - 1] + a_now * cfg.dt, cfg.v_max), cfg.v_min)
    t = np.arange(n + 1) * cfg.dt
    return SpeedProfile(t=t, v_raw=v, a_raw=a, resample_times=[s * cfg.dt for s in resample_steps])


def soft_limited_step(v_prev: float, a: float, cfg: CycleGenConfig) -> float:
    m = max(v_prev + a * cfg.dt, cfg.v_min)
    return m / (1.0 + math.exp(0.5 * (m - cfg.v_max)))


def smooth_and_reintegrate(profile: SpeedProfile, cfg: CycleGenConfig) -> SpeedProfile:
    """Moving-average the acceleration, re-integrate speed under the soft cap.

    The filtered acceleration stored on the result is recomputed from the
    re-integrated speed as a backward difference (first entry zero).
    """
    smoothed = uniform_filter1d(profile.a_raw, size=cfg.smoothing_window, mode="nearest")
    v_f = np.empty_like(profile.v_raw)
    v_f[0] = profile.v_raw[0]
    for k in range(1, len(v_f)):
        v_f[k] = soft_limited_step(v_f[k - 1], smoothed[k], cfg)
    a_f = np.zeros_like(v_f)
    a_f[1:] = np.diff(v_f) / cfg.dt
    return SpeedProfile(
        t=profile.t,
        v_raw=profile.v_raw,
        a_raw=profile.a_raw,
        resample_times=list(profile.resample_times),
        v_f=v_f,
        a_f=a_f,
    )


def road_random_walk(cfg: CycleGenConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Unsmoothed, unclamped grade walk of ``n`` samples starting at zero."""
    steps = rng.normal(0.0, cfg.road_walk_step_std, size=n) if cfg.road_walk_step_std > 0 else np.zeros(n)
    steps[0] = 0.0
    return np.cumsum(steps)


def generate_road_profile(cfg: CycleGenConfig, rng: np.random.Generator, duration: float) -> np.ndarray:
    """Grade in percent: random walk, centred moving average, clamp to ``±grade_limit``."""
    if duration < cfg.dt:
        raise ValueError("duration must be >= dt")
    n = int(round(duration / cfg.dt)) + 1
    walk = road_random_walk(cfg, rng, n)
    smooth = uniform_filter1d(walk, size=cfg.road_ma_window, mode="nearest")
    return np.clip(smooth, -cfg.grade_limit, cfg.grade_limit)


@dataclass(frozen=True)
class SpeedTracker:
    """Proportional speed tracker with a deadband; never commands both pedals."""

    engine_gain: float = 40.0
    brake_gain: float = 20.0
    deadband: float = 0.05

    @classmethod
    def from_config(cls, cfg: CycleGenConfig) -> "SpeedTracker":
        return cls(cfg.tracker_engine_gain, cfg.tracker_brake_gain, cfg.tracker_deadband)

    def command(self, v_ref_next: float, v: float) -> tuple[float, float]:
        err = v_ref_next - v
        if err > self.deadband:
            return min(self.engine_gain * (err - self.deadband), 100.0), 0.0
        if err < -self.deadband:
            return 0.0, min(self.brake_gain * (-err - self.deadband), 100.0)
        return 0.0, 0.0


def plant_hash(plant: PlantConfig) -> str:
    return hashlib.sha256(repr(plant).encode()).hexdigest()[:16]


def simulate_episode(
    plant: PlantConfig,
    v0: float,
    grade: np.ndarray,
    controller,
    stop=lambda k, v: False,
    kind: str = "custom",
    seed: int = -1,
) -> Episode:
    """Generic closed-loop episode: ``controller(k, v) -> (E_cmd, B_cmd)``.

    Row ``k`` stores the command applied at sample ``k`` and the response
    measured at sample ``k``; the last row's commands are zero.
    """
    st = initial_state(v0, plant)
    n_max = len(grade)
    t, E, B, G, A, V, F = ([] for _ in range(7))
    a, v, f = 0.0, float(v0), plant.idle_fuel_rate
    k = 0
    while True:
        t.append(k * plant.dt)
        G.append(float(grade[k]))
        A.append(a)
        V.append(v)
        F.append(f)
        if k == n_max - 1 or stop(k, st.v):
            E.append(0.0)
            B.append(0.0)
            break
        e_cmd, b_cmd = controller(k, st.v)
        E.append(float(e_cmd))
        B.append(float(b_cmd))
        st, resp = plant_step(st, (e_cmd, b_cmd), grade[k], plant)
        a, v, f = resp.a, resp.v, resp.f_rate
        k += 1
    return Episode(
        dt=plant.dt,
        t=np.array(t),
        E_cmd=np.array(E),
        B_cmd=np.array(B),
        theta_rdg=np.array(G),
        a=np.array(A),
        v=np.array(V),
        f_rate=np.array(F),
        meta={"seed": seed, "kind": kind, "plant_hash": plant_hash(plant)},
    )


def generate_coasting_episode(cfg: CycleGenConfig, rng, plant: PlantConfig, seed: int = -1) -> Episode:
    v0 = float(rng.uniform(cfg.v_min, cfg.v_max))
    grade = generate_road_profile(cfg, rng, cfg.coast_max_duration)
    floor = cfg.v_min + cfg.coast_epsilon
    return simulate_episode(
        plant, v0, grade, lambda k, v: (0.0, 0.0), stop=lambda k, v: v <= floor, kind="coasting", seed=seed
    )


def generate_braking_episode(cfg: CycleGenConfig, rng, plant: PlantConfig, seed: int = -1) -> Episode:
    v0 = float(rng.uniform(cfg.v_min, cfg.v_max))
    b_cmd = float(rng.uniform(cfg.brake_min, cfg.brake_max))
    # long enough to stop from v_max at the weakest brake on the steepest descent, plus the hold
    worst = b_cmd / 100.0 * plant.max_brake_decel - 9.81 * cfg.grade_limit / 100.0
    horizon = v0 / max(worst, 0.05) + 10.0 + cfg.stop_hold
    grade = generate_road_profile(cfg, rng, horizon)
    hold_steps = int(round(cfg.stop_hold / plant.dt))
    stopped_at: list[int] = []

    def stop(k, v):
        if v <= 0.0 and not stopped_at:
            stopped_at.append(k)
        return bool(stopped_at) and k >= stopped_at[0] + hold_steps

    ep = simulate_episode(plant, v0, grade, lambda k, v: (0.0, b_cmd), stop=stop, kind="braking", seed=seed)
    if ep.v[-1] != 0.0:
        raise RuntimeError("braking episode did not reach standstill")
    return ep


def generate_spanning_episode(
    cfg: CycleGenConfig,
    rng,
    plant: PlantConfig,
    tracker: SpeedTracker | None = None,
    duration: float | None = None,
    seed: int = -1,
) -> Episode:
    """Track a smoothed random speed profile on the plant; log the plant's actual response."""
    tracker = tracker or SpeedTracker.from_config(cfg)
    duration = duration or cfg.spanning_duration
    profile = smooth_and_reintegrate(integrate_raw_speed(cfg, rng, duration), cfg)
    grade = generate_road_profile(cfg, rng, duration)
    v_ref = profile.v_f
    ep = simulate_episode(
        plant,
        float(v_ref[0]),
        grade,
        lambda k, v: tracker.command(v_ref[k + 1], v),
        kind="spanning",
        seed=seed,
    )
    ep.meta["reference"] = v_ref
    return ep


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, episode index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_dataset(cfg: CycleGenConfig, plant: PlantConfig, hours: float, seed: int | None = None) -> list[Episode]:
    """Mixture of the three families totalling at least ``hours`` of driving.

    Episode ``i`` uses its own stream ``episode_rng(seed, i)``; the family is
    chosen deterministically so the duration shares match the configured
    fractions.
    """
    seed = cfg.seed if seed is None else seed
    target = hours * 3600.0
    spent = {"spanning": 0.0, "coasting": 0.0, "braking": 0.0}
    share = {
        "spanning": cfg.spanning_fraction,
        "coasting": cfg.coasting_fraction,
        "braking": max(1.0 - cfg.spanning_fraction - cfg.coasting_fraction, 0.0),
    }
    episodes = []
    i = 0
    while sum(spent.values()) < target:
        total = sum(spent.values()) or 1.0
        kind = max(share, key=lambda k: share[k] - spent[k] / total)
        rng = episode_rng(seed, i)
        if kind == "spanning":
            ep = generate_spanning_episode(cfg, rng, plant, seed=seed)
        elif kind == "coasting":
            ep = generate_coasting_episode(cfg, rng, plant, seed=seed)
        else:
            ep = generate_braking_episode(cfg, rng, plant, seed=seed)
        ep.meta["index"] = i
        episodes.append(ep)
        spent[kind] += ep.duration
        i += 1
    return episodes


def coverage_table(v: np.ndarray, a: np.ndarray, v_min: float, v_max: float, bins: int = 10) -> np.ndarray:
    """Counts per (speed decile, sign of acceleration); column 0 decel, column 1 accel."""
    edges = np.linspace(v_min, v_max, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    table = np.zeros((bins, 2), dtype=int)
    np.add.at(table, (idx[a < 0], 0), 1)
    np.add.at(table, (idx[a > 0], 1), 1)
    return table


def spanning_profiles(cfg: CycleGenConfig, hours: float, seed: int | None = None) -> list[SpeedProfile]:
    """Raw and smoothed spanning speed profiles totalling at least ``hours``."""
    seed = cfg.seed if seed is None else seed
    profiles, total, i = [], 0.0, 0
    while total < hours * 3600.0:
        rng = episode_rng(seed, i)
        profiles.append(smooth_and_reintegrate(integrate_raw_speed(cfg, rng, cfg.spanning_duration), cfg))
        total += cfg.spanning_duration
        i += 1
    return profiles


def profile_coverage(profiles: list[SpeedProfile], cfg: CycleGenConfig, bins: int = 10) -> np.ndarray:
    """Coverage table of the raw (pre-smoothing) speed profiles.

    The sign is that of the realised acceleration ``v(k+1) - v(k)``, so a
    profile pinned at a speed limit counts as neither.
    """
    v = np.concatenate([p.v_raw[:-1] for p in profiles])
    a = np.concatenate([np.diff(p.v_raw) for p in profiles])
    return coverage_table(v, a, cfg.v_min, cfg.v_max, bins)
