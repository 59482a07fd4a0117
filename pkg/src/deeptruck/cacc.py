"""Two-truck cooperative adaptive cruise control environment.

The leader is a constant-velocity point mass.  The ego truck's position is
integrated kinematically while its velocity comes from a pluggable dynamics
backend: the learned replica (:class:`DeepEgo`) for training, or the
surrogate plant (:class:`PlantEgo`) to measure the transfer gap.

Every environment quantity is a numpy array over a batch of independent
episodes, so one ``step`` call advances many rollouts at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import DeepTruckModel, DeploymentState, deployment_step
from .plant import PlantConfig, initial_state, plant_step

ACTION_BOUNDS = (0.0, 100.0)  # engine and brake commands, percent


@dataclass(frozen=True)
class CaccConfig:
    dt: float = 0.1
    horizon: int = 800
    alpha_p: float = 1.0
    alpha_v: float = 1.0
    alpha_E: float = 1e-4
    alpha_B: float = 1e-4
    alpha_crash: float = 1e6
    d_safety: float = 5.0
    v_leader_range: tuple[float, float] = (8.3, 22.2)
    speed_error_range: tuple[float, float] = (-1.39, 1.39)
    position_error_range: tuple[float, float] = (-1.39, 1.39)
    time_gap_range: tuple[float, float] = (2.0, 5.0)
    grade_range: tuple[float, float] = (-2.0, 2.0)
    grade_mode: str = "flat"
    gamma: float = 0.9999
    idle_fuel_rate: float = 0.3

    def __post_init__(self):
        for name in ("alpha_p", "alpha_v", "alpha_E", "alpha_B", "alpha_crash"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("v_leader_range", "speed_error_range", "position_error_range", "time_gap_range", "grade_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered (low <= high)")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.grade_mode not in ("flat", "graded"):
            raise ValueError("grade_mode must be 'flat' or 'graded'")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("need horizon >= 1 and dt > 0")

    @property
    def obs_dim(self) -> int:
        return 5 if self.grade_mode == "graded" else 4


class DeepEgo:
    """Ego velocity from closed-loop simulation of the replica model."""

    def __init__(self, model: DeepTruckModel, idle_fuel_rate: float = 0.3):
        self.model = model
        self.idle_fuel_rate = idle_fuel_rate

    def start(self, v0: np.ndarray, grade: np.ndarray):
        y0 = np.stack([np.zeros_like(v0), v0, np.full_like(v0, self.idle_fuel_rate)], axis=-1)
        return DeploymentState.start(self.model, y0)

    def advance(self, sim: DeploymentState, E, B, grade):
        u = np.stack([E, B], axis=-1)
        w = grade[:, None] if self.model.io.w_dim else np.zeros((len(E), 0))
        sim = deployment_step(self.model, sim, u, w)
        return sim, sim.y[:, 1]


class PlantEgo:
    """Ego velocity from the surrogate plant (ground truth for transfer tests)."""

    def __init__(self, plant: PlantConfig):
        self.plant = plant

    def start(self, v0: np.ndarray, grade: np.ndarray):
        return initial_state(np.asarray(v0, float), self.plant)

    def advance(self, st, E, B, grade):
        st, resp = plant_step(st, np.stack([E, B], axis=-1), grade, self.plant)
        return st, np.asarray(resp.v, dtype=float)


@dataclass
class CaccState:
    p_leader: np.ndarray
    p_ego: np.ndarray
    v_leader: np.ndarray
    v_ego: np.ndarray
    ego: object
    Tg_target: np.ndarray
    grade: np.ndarray
    step: int = 0
    init_draws: dict = field(default_factory=dict)

    @property
    def gap(self) -> np.ndarray:
        return self.p_leader - self.p_ego

    @property
    def gap_error(self) -> np.ndarray:
        return self.gap - self.v_ego * self.Tg_target

    @property
    def speed_error(self) -> np.ndarray:
        return self.v_leader - self.v_ego

    @property
    def time_gap_error(self) -> np.ndarray:
        # point-mass geometry: actual time gap is gap / v_ego
        return self.gap_error / np.maximum(self.v_ego, 1e-6)


class CaccEnv:
    def __init__(self, cfg: CaccConfig, ego):
        self.cfg = cfg
        self.ego = ego

    def reset(self, rng: np.random.Generator, n: int = 1) -> CaccState:
        cfg = self.cfg
        v_leader = rng.uniform(*cfg.v_leader_range, size=n)
        dv = rng.uniform(*cfg.speed_error_range, size=n)
        Tg = rng.uniform(*cfg.time_gap_range, size=n)
        e = rng.uniform(*cfg.position_error_range, size=n)
        if cfg.grade_mode == "graded":
            grade = rng.uniform(*cfg.grade_range, size=n)
        else:
            grade = np.zeros(n)
        v_ego = np.maximum(v_leader + dv, 0.0)
        p_ego = -(v_ego * Tg + e)
        return CaccState(
            p_leader=np.zeros(n),
            p_ego=p_ego,
            v_leader=v_leader,
            v_ego=v_ego,
            ego=self.ego.start(v_ego, grade),
            Tg_target=Tg,
            grade=grade,
            step=0,
            init_draws={"speed_error": dv, "position_error": e},
        )

    def observe(self, s: CaccState) -> np.ndarray:
        cols = [s.v_leader, s.v_ego, s.gap, s.v_ego * s.Tg_target]
        if self.cfg.grade_mode == "graded":
            cols.append(s.grade)
        return np.stack(cols, axis=-1)

    def reward(self, s: CaccState, E, B):
        cfg = self.cfg
        crash = s.gap <= cfg.d_safety
        r = (
            -cfg.alpha_p * s.gap_error**2
            - cfg.alpha_v * s.speed_error**2
            - cfg.alpha_E * E**2
            - cfg.alpha_B * B**2
            - cfg.alpha_crash * crash
        )
        return r, crash

    def step(self, s: CaccState, action) -> tuple[CaccState, np.ndarray, np.ndarray]:
        """Apply ``action`` (engine %, brake %) to every episode in the batch.

        The reward is evaluated on the pre-transition state and the clamped
        action.  ``done`` is true on a crash or when the horizon is reached.
        """
        action = np.asarray(action, dtype=float).reshape(len(s.v_ego), 2)
        E = np.clip(action[:, 0], *ACTION_BOUNDS)
        B = np.clip(action[:, 1], *ACTION_BOUNDS)
        r, crash = self.reward(s, E, B)
        dt = self.cfg.dt
        ego, v_next = self.ego.advance(s.ego, E, B, s.grade)
        if not np.all(np.isfinite(v_next)):
            raise FloatingPointError(f"non-finite ego velocity at step {s.step}")
        nxt = replace(
            s,
            p_leader=s.p_leader + s.v_leader * dt,
            p_ego=s.p_ego + s.v_ego * dt,
            v_ego=v_next,
            ego=ego,
            step=s.step + 1,
        )
        done = crash | (nxt.step >= self.cfg.horizon)
        return nxt, r, done


@dataclass
class Trajectory:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    gap_error: np.ndarray
    speed_error: np.ndarray
    time_gap_error: np.ndarray
    crashed: bool

    def __len__(self) -> int:
        return len(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        return discounted_sum(self.rewards, gamma)

    def to_csv(self, path) -> None:
        n_obs = self.obs.shape[1]
        names = ["v_leader", "v_ego", "gap", "desired_gap", "grade"][:n_obs]
        with open(path, "w") as fh:
            fh.write(",".join(["k", *names, "E_cmd", "B_cmd", "r", "gap_error", "speed_error"]) + "\n")
            for k in range(len(self)):
                vals = [*self.obs[k], *self.actions[k], self.rewards[k], self.gap_error[k], self.speed_error[k]]
                fh.write(str(k) + "," + ",".join(format(x, ".17g") for x in vals) + "\n")


def discounted_sum(rewards, gamma: float) -> float:
    g = 0.0
    for r in reversed(np.asarray(rewards, dtype=float)):
        g = r + gamma * g
    return float(g)


def run_batch(env: CaccEnv, act, rng: np.random.Generator, n: int, horizon: int | None = None, state=None):
    """Roll out ``n`` episodes in lockstep.

    ``act(obs, rng) -> actions`` maps an (n, obs_dim) array to (n, 2)
    actions; the recorded action is what the policy emitted (before the
    environment clamps it).  Episodes that finish keep being stepped but
    their samples are discarded, so every returned trajectory stops at its
    own ``done``.
    """
    horizon = env.cfg.horizon if horizon is None else horizon
    if horizon > env.cfg.horizon:
        raise ValueError("rollout horizon exceeds environment horizon")
    s = env.reset(rng, n) if state is None else state
    obs_l, act_l, rew_l, ge_l, se_l, te_l = [], [], [], [], [], []
    alive = np.ones(n, dtype=bool)
    ends = np.full(n, horizon)
    crashed = np.zeros(n, dtype=bool)
    for k in range(horizon):
        o = env.observe(s)
        a = np.asarray(act(o, rng), dtype=float).reshape(n, 2)
        obs_l.append(o)
        act_l.append(a)
        ge_l.append(s.gap_error)
        se_l.append(s.speed_error)
        te_l.append(s.time_gap_error)
        hit = s.gap <= env.cfg.d_safety
        s, r, done = env.step(s, a)
        rew_l.append(r)
        newly = alive & done
        crashed |= newly & hit
        ends[newly] = k + 1
        alive &= ~done
        if not alive.any():
            break
    obs, acts, rews = np.array(obs_l), np.array(act_l), np.array(rew_l)
    ge, se, te = np.array(ge_l), np.array(se_l), np.array(te_l)
    return [
        Trajectory(obs[: ends[i], i], acts[: ends[i], i], rews[: ends[i], i], ge[: ends[i], i], se[: ends[i], i], te[: ends[i], i], bool(crashed[i]))
        for i in range(n)
    ], s


def rollout(env: CaccEnv, act, rng: np.random.Generator, horizon: int | None = None, gamma: float | None = None):
    """Single episode; returns the trajectory and its discounted return."""
    trajs, _ = run_batch(env, act, rng, 1, horizon)
    gamma = env.cfg.gamma if gamma is None else gamma
    return trajs[0], trajs[0].discounted_return(gamma)
