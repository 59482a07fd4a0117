"""Gaussian MLP policy and REINFORCE training in the CACC environment.

The policy maps a normalised observation through tanh hidden layers to the
mean engine and brake commands (percent); a state-independent log standard
deviation gives a diagonal Gaussian.  Deterministic control uses the mean.

Training collects whole episodes in lockstep batches, forms discounted
rewards-to-go, subtracts a time-indexed average-return baseline and ascends
``mean_t grad log pi(a_t | o_t) * (G_t - b_t)`` with the shared Adagrad.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .cacc import CaccConfig, CaccEnv, run_batch
from .checkpoint import load_container, save_container
from .optim import AdagradState, NonFiniteGradientError, adagrad_update

log = logging.getLogger(__name__)

LOG_STD_BOUNDS = (-20.0, 2.0)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PgConfig:
    batch_size: int = 4000
    iterations: int = 200
    gamma: float = 0.9999
    learning_rate: float = 0.1
    adagrad_epsilon: float = 1e-8
    gradient_clip_norm: float | None = None
    hidden_sizes: tuple[int, ...] = (25, 25, 25)
    init_log_std: float = 0.0
    init_mean: tuple[float, float] = (10.0, 0.0)
    action_scale: float = 10.0
    baseline: str = "time"
    normalize_advantages: bool = False
    horizon: int = 800
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < self.horizon:
            raise ValueError("batch_size must be >= horizon")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.baseline not in ("time", "none"):
            raise ValueError("baseline must be 'time' or 'none'")
        if self.action_scale <= 0:
            raise ValueError("action_scale must be > 0")
        if self.iterations < 0 or self.learning_rate < 0:
            raise ValueError("need iterations >= 0 and learning_rate >= 0")
        object.__setattr__(self, "hidden_sizes", tuple(int(s) for s in self.hidden_sizes))


# full-size training profile; the dataclass defaults are the desk-scale profile
FULL_SCALE = dict(batch_size=20000, iterations=500, gamma=0.9999, horizon=800)


def _uniform_moments(lo: float, hi: float) -> tuple[float, float]:
    return 0.5 * (lo + hi), (hi - lo) ** 2 / 12.0


def observation_normalizer(cfg: CaccConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed whitening of the observation distribution at episode reset.

    Returns ``(offset, transform)`` with ``z = transform @ (obs - offset)``.
    The moments are exact for the independent uniform draws of ``reset``;
    the transform is the inverse Cholesky factor of their covariance taken in
    the order (leader speed, ego speed, desired gap, gap).  The whitened
    coordinates are then, in observation order, the leader speed, the speed
    error, the gap error and the time-gap draw, each with unit variance.
    Tracking errors therefore appear directly as inputs instead of as small
    differences between large, strongly correlated gap readings.
    """
    m_vl, var_vl = _uniform_moments(*cfg.v_leader_range)
    m_dv, var_dv = _uniform_moments(*cfg.speed_error_range)
    m_tg, var_tg = _uniform_moments(*cfg.time_gap_range)
    m_e, var_e = _uniform_moments(*cfg.position_error_range)
    # observation = (v_leader, v_ego, gap, desired_gap); v_ego = vl + dv, desired = v_ego * Tg, gap = desired + e
    # (the rare clamp of v_ego at zero is ignored)
    m_w, var_w = m_vl + m_dv, var_vl + var_dv
    ew2, etg2 = var_w + m_w**2, var_tg + m_tg**2
    m_d, var_d = m_w * m_tg, ew2 * etg2 - (m_w * m_tg) ** 2
    cov = np.array(
        [
            [var_vl, var_vl, var_vl * m_tg, var_vl * m_tg],
            [var_vl, var_w, var_w * m_tg, var_w * m_tg],
            [var_vl * m_tg, var_w * m_tg, var_d + var_e, var_d],
            [var_vl * m_tg, var_w * m_tg, var_d, var_d],
        ]
    )
    perm = [0, 1, 3, 2]
    chol = np.linalg.cholesky(cov[np.ix_(perm, perm)] + 1e-12 * np.eye(4))
    transform = np.zeros((4, 4))
    transform[np.ix_(perm, perm)] = np.linalg.inv(chol)
    offset = [m_vl, m_w, m_d + m_e, m_d]
    if cfg.grade_mode == "graded":
        m_g, var_g = _uniform_moments(*cfg.grade_range)
        offset.append(m_g)
        transform = np.pad(transform, ((0, 1), (0, 1)))
        transform[4, 4] = 1.0 / math.sqrt(var_g) if var_g > 0 else 1.0
    return np.array(offset), transform


def diagonal_transform(scale) -> np.ndarray:
    """Transform for plain per-entry scaling ``z = (obs - offset) / scale``."""
    return np.diag(1.0 / np.asarray(scale, dtype=float))


class GaussianPolicy:
    """Policy parameters plus the fixed observation normaliser."""

    kind = "deeptruck-policy"

    def __init__(self, params: dict[str, np.ndarray], obs_offset, obs_transform, action_scale: float = 1.0):
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self.obs_offset = np.asarray(obs_offset, dtype=float)
        self.obs_transform = np.asarray(obs_transform, dtype=float)
        if self.obs_transform.shape != (len(self.obs_offset),) * 2:
            raise ValueError("obs_transform must be a square matrix matching obs_offset")
        self.action_scale = float(action_scale)
        self.n_layers = sum(1 for k in self.params if k.endswith("_W"))
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{k}: non-finite entries")
        self.params["log_std"] = np.clip(self.params["log_std"], *LOG_STD_BOUNDS)

    @classmethod
    def initialize(
        cls, obs_offset, obs_transform, rng, hidden_sizes=(25, 25, 25), init_log_std=0.0, init_mean=(10.0, 0.0), action_scale=1.0
    ):
        sizes = (len(obs_offset),) + tuple(hidden_sizes) + (2,)
        params = {}
        last = len(sizes) - 2
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(n_in)
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
            params[f"L{i}_W"] = W * 0.01 if i == last else W
            params[f"L{i}_b"] = np.array(init_mean, dtype=float) / action_scale if i == last else np.zeros(n_out)
        params["log_std"] = np.full(2, float(init_log_std))
        return cls(params, obs_offset, obs_transform, action_scale)

    @property
    def obs_dim(self) -> int:
        return len(self.obs_offset)

    def with_params(self, params) -> "GaussianPolicy":
        return GaussianPolicy(params, self.obs_offset, self.obs_transform, self.action_scale)

    def save(self, path) -> None:
        arrays = dict(self.params)
        arrays["obs_offset"] = self.obs_offset
        arrays["obs_transform"] = self.obs_transform
        save_container(path, self.kind, {"n_layers": self.n_layers, "action_scale": self.action_scale}, arrays)

    @classmethod
    def load(cls, path) -> "GaussianPolicy":
        _, meta, arrays = load_container(path, expect_kind=cls.kind)
        off, tr = arrays.pop("obs_offset"), arrays.pop("obs_transform")
        return cls(arrays, off, tr, meta.get("action_scale", 1.0))

    # -- evaluation ------------------------------------------------------------

    def _forward(self, obs):
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation has {obs.shape[-1]} entries, policy expects {self.obs_dim}")
        z = (obs - self.obs_offset) @ self.obs_transform.T
        acts = [z]
        for i in range(self.n_layers):
            z = z @ self.params[f"L{i}_W"] + self.params[f"L{i}_b"]
            if i < self.n_layers - 1:
                z = np.tanh(z)
            acts.append(z)
        return self.action_scale * z, acts

    def forward(self, obs) -> tuple[np.ndarray, np.ndarray]:
        """Mean command (percent) and standard deviation for each observation."""
        mean, _ = self._forward(obs)
        return mean, np.broadcast_to(np.exp(self.params["log_std"]), mean.shape).copy()

    def act_deterministic(self, obs, rng=None):
        return self.forward(obs)[0]

    def act_stochastic(self, obs, rng):
        mean, std = self.forward(obs)
        return sample_action(mean, std, rng)

    def grad_log_prob(self, obs, actions, weights) -> dict[str, np.ndarray]:
        """Gradient of ``sum_t weights_t * log pi(actions_t | obs_t)``."""
        mean, acts = self._forward(obs)
        log_std = self.params["log_std"]
        inv_var = np.exp(-2.0 * log_std)
        diff = actions - mean
        w = np.asarray(weights, dtype=float)[:, None]
        grads = {"log_std": np.sum(w * (diff**2 * inv_var - 1.0), axis=0)}
        dz = w * diff * inv_var * self.action_scale
        for i in reversed(range(self.n_layers)):
            grads[f"L{i}_W"] = acts[i].T @ dz
            grads[f"L{i}_b"] = dz.sum(axis=0)
            if i > 0:
                dz = (dz @ self.params[f"L{i}_W"].T) * (1.0 - acts[i] ** 2)
        return grads


def sample_action(mean, std, rng: np.random.Generator) -> np.ndarray:
    return mean + std * rng.standard_normal(np.shape(mean))


def log_prob(action, mean, std) -> np.ndarray:
    """Diagonal Gaussian log density summed over the action dimensions."""
    z = (np.asarray(action) - mean) / std
    return np.sum(-0.5 * z**2 - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def rewards_to_go(rewards, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    g = 0.0
    for t in reversed(range(len(rewards))):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def time_baseline(returns: list[np.ndarray]) -> np.ndarray:
    """Mean reward-to-go at each time index over the trajectories that reach it."""
    T = max(len(g) for g in returns)
    total = np.zeros(T)
    count = np.zeros(T)
    for g in returns:
        total[: len(g)] += g
        count[: len(g)] += 1
    return total / count


def policy_gradient(policy: GaussianPolicy, trajectories, gamma: float, baseline=None, normalize=False):
    """REINFORCE estimate of the return gradient (ascent direction).

    Returns ``(grads, advantages)``; ``baseline`` overrides the time-indexed
    average when given as an array over time.
    """
    G = [rewards_to_go(t.rewards, gamma) for t in trajectories]
    if baseline is None:
        b = time_baseline(G)
    elif isinstance(baseline, str):
        b = time_baseline(G) if baseline == "time" else np.zeros(max(len(g) for g in G))
    else:
        b = np.asarray(baseline, dtype=float)
    adv = [g - b[: len(g)] for g in G]
    obs = np.concatenate([t.obs for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    flat = np.concatenate(adv)
    if normalize:
        flat = (flat - flat.mean()) / (flat.std() + 1e-8)
    weights = flat / len(obs)
    return policy.grad_log_prob(obs, actions, weights), adv


@dataclass
class IterationStats:
    iteration: int
    average_return: float
    average_discounted_return: float
    crashes: int
    episodes: int
    steps: int
    skipped: bool = False


def collect(env: CaccEnv, policy: GaussianPolicy, rng, batch_size: int, horizon: int):
    """Whole episodes in lockstep waves until at least ``batch_size`` steps are gathered."""
    trajs = []
    steps = 0
    while steps < batch_size:
        n = max(1, math.ceil((batch_size - steps) / horizon))
        wave, _ = run_batch(env, policy.act_stochastic, rng, n, horizon)
        trajs.extend(wave)
        steps += sum(len(t) for t in wave)
    return trajs


def pg_update(policy: GaussianPolicy, trajectories, cfg: PgConfig, state: AdagradState):
    """One Adagrad ascent step on the REINFORCE estimate; returns (policy, stats)."""
    with np.errstate(invalid="ignore", over="ignore"):
        # non-finite values are caught by the optimiser and reported below
        grads, _ = policy_gradient(policy, trajectories, cfg.gamma, cfg.baseline, cfg.normalize_advantages)
    stats = IterationStats(
        iteration=state.steps,
        average_return=float(np.mean([t.rewards.sum() for t in trajectories])),
        average_discounted_return=float(np.mean([t.discounted_return(cfg.gamma) for t in trajectories])),
        crashes=sum(t.crashed for t in trajectories),
        episodes=len(trajectories),
        steps=sum(len(t) for t in trajectories),
    )
    descent = {k: -g for k, g in grads.items()}
    try:
        params = adagrad_update(
            policy.params, descent, state, cfg.learning_rate, cfg.adagrad_epsilon, cfg.gradient_clip_norm
        )
    except NonFiniteGradientError:
        stats.skipped = True
        log.warning("non-finite policy gradient, update skipped")
        return policy, stats
    return policy.with_params(params), stats


@dataclass
class PolicyCurve:
    rows: list[IterationStats]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,average_return,average_discounted_return,crashes,episodes,steps\n")
            for r in self.rows:
                fh.write(
                    f"{r.iteration},{r.average_return:.17g},{r.average_discounted_return:.17g},"
                    f"{r.crashes},{r.episodes},{r.steps}\n"
                )


def train_policy(env: CaccEnv, cfg: PgConfig, policy: GaussianPolicy | None = None, rng=None):
    """Run ``cfg.iterations`` policy-gradient iterations.

    Returns ``(final_policy, best_policy, curve)``; the best policy is the
    one whose sampled batch had the highest average discounted return.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if policy is None:
        off, tr = observation_normalizer(env.cfg)
        policy = GaussianPolicy.initialize(
            off, tr, rng, cfg.hidden_sizes, cfg.init_log_std, cfg.init_mean, cfg.action_scale
        )
    state = AdagradState.zeros_like(policy.params)
    rows = []
    best, best_ret = policy, -math.inf
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        trajs = collect(env, policy, rng, cfg.batch_size, cfg.horizon)
        before = policy
        policy, stats = pg_update(policy, trajs, cfg, state)
        stats.iteration = it
        rows.append(stats)
        if stats.average_discounted_return > best_ret:
            best, best_ret = before, stats.average_discounted_return
        if it % 10 == 0 or it == cfg.iterations - 1:
            log.info(
                "iter %d return %.1f disc %.1f crashes %d (%.0fs)",
                it, stats.average_return, stats.average_discounted_return, stats.crashes, time.perf_counter() - t0,
            )
    return policy, best, PolicyCurve(rows)
