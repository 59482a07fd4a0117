"""K-step unfolded mini-batch Adagrad training of the replica model.

Each gradient is estimated from ``M`` episode slices of ``K`` steps run in
training (teacher-forced) form from a zero hidden state.  The loss is the
summed squared error over all three output channels measured in normalised
units; the speed term only sees the acceleration error through the
kinematic constraint.  Gradients are exact reverse-mode derivatives of that
loss through the unrolled network.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .model import A, F, V, DeepTruckModel, HiddenState, ModelDivergedError, forward_deployment
from .optim import AdagradState, adagrad_update

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, message: str = "training loss became non-finite"):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


@dataclass(frozen=True)
class TrainConfig:
    K: int = 64
    M: int = 32
    N: int = 20
    epochs: int = 600
    learning_rate: float = 0.05
    adagrad_epsilon: float = 1e-8
    gradient_clip_norm: float | None = 5.0
    hidden_size: int = 64
    decoder_sizes: tuple[int, ...] = (64, 64)
    validation_fraction: float = 0.15
    split_seed: int = 0
    val_slices: int = 64
    val_rollouts: int = 32
    deploy_horizon: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.N < 1 or self.epochs < 0:
            raise ValueError("need K, M, N >= 1 and epochs >= 0")
        if self.learning_rate < 0 or self.adagrad_epsilon <= 0:
            raise ValueError("need learning_rate >= 0 and adagrad_epsilon > 0")
        object.__setattr__(self, "decoder_sizes", tuple(int(s) for s in self.decoder_sizes))


@dataclass
class Batch:
    """``M`` aligned slices: inputs ``u``, ``w`` of shape (K, M, ·), responses ``y`` of shape (K+1, M, 3)."""

    u: np.ndarray
    w: np.ndarray
    y: np.ndarray

    @property
    def K(self) -> int:
        return self.u.shape[0]

    @property
    def M(self) -> int:
        return self.u.shape[1]


def make_batch(episodes, slices, K: int, w_dim: int) -> Batch:
    if not slices:
        raise ValueError("empty batch")
    u = np.stack([episodes[e].u[k0 : k0 + K] for e, k0 in slices], axis=1)
    if w_dim:
        w = np.stack([episodes[e].w[k0 : k0 + K] for e, k0 in slices], axis=1)
    else:
        w = np.zeros((K, len(slices), 0))
    y = np.stack([episodes[e].y[k0 : k0 + K + 1] for e, k0 in slices], axis=1)
    if u.shape[0] != K or y.shape[0] != K + 1:
        raise IndexError("slice runs past the end of its episode")
    return Batch(u, w, y)


class SliceSampler:
    """Uniform sampling over every valid (episode, start) pair."""

    def __init__(self, episodes, length: int):
        self.counts = np.array([max(len(ep) - length + 1, 0) for ep in episodes], dtype=np.int64)
        self.total = int(self.counts.sum())
        if self.total == 0:
            raise ValueError(f"no episode is long enough for slices of {length} samples")
        self.cum = np.cumsum(self.counts)

    def sample(self, rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
        idx = rng.integers(0, self.total, size=n)
        ep = np.searchsorted(self.cum, idx, side="right")
        start = idx - (self.cum[ep] - self.counts[ep])
        return [(int(e), int(s)) for e, s in zip(ep, start)]


# -- loss and gradient ---------------------------------------------------------


def _forward(model: DeepTruckModel, batch: Batch):
    p = model.params
    xn = model.normalize_inputs(batch.u, batch.w, batch.y[:-1])
    zx = xn @ p["W_x"] + p["b"]
    K, M = zx.shape[:2]
    h = model.hidden_size
    state = HiddenState.zeros(h, M)
    hs = np.empty((K, M, h))
    cs_prev = np.empty((K, M, h))
    hs_prev = np.empty((K, M, h))
    gates = []
    for j in range(K):
        cs_prev[j] = state.cell
        hs_prev[j] = state.hidden
        state, g = model.cell(zx[j], state)
        hs[j] = state.hidden
        gates.append(g)
    out, acts = model.decoder(hs)
    yhat = model.constrain(out, batch.y[:-1, :, V])
    f_pre = out[..., F] * model.io.y_scale[F] + model.io.y_offset[F]
    a_pre = out[..., A] * model.io.y_scale[A] + model.io.y_offset[A]
    a_free = a_pre >= -batch.y[:-1, :, V] / model.io.dt
    return yhat, dict(xn=xn, hs_prev=hs_prev, cs_prev=cs_prev, gates=gates, acts=acts, f_pre=f_pre, a_free=a_free)


def normalized_errors(model: DeepTruckModel, yhat, target):
    return (yhat - target) / model.io.y_scale


def loss_kstep(model: DeepTruckModel, batch: Batch) -> float:
    """Summed squared normalised output error over all slices and steps."""
    if batch.M == 0 or batch.K == 0:
        raise ValueError("empty batch")
    yhat, _ = _forward(model, batch)
    return float(np.sum(normalized_errors(model, yhat, batch.y[1:]) ** 2))


def channel_losses(model: DeepTruckModel, batch: Batch) -> dict[str, float]:
    yhat, _ = _forward(model, batch)
    e2 = normalized_errors(model, yhat, batch.y[1:]) ** 2
    return {name: float(e2[..., i].mean()) for i, name in enumerate(model.io.y_names)}


def backprop_kstep(model: DeepTruckModel, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its exact gradient with respect to every parameter array."""
    p = model.params
    io = model.io
    h = model.hidden_size
    yhat, cache = _forward(model, batch)
    e = normalized_errors(model, yhat, batch.y[1:])
    loss = float(np.sum(e**2))

    dyhat = 2.0 * e / io.y_scale
    da = dyhat[..., A] + dyhat[..., V] * io.dt
    dout = np.zeros_like(yhat)
    dout[..., A] = da * io.y_scale[A] * cache["a_free"]
    dout[..., F] = dyhat[..., F] * io.y_scale[F] * (cache["f_pre"] > 0)

    grads = {}
    acts = cache["acts"]
    dz = dout
    for i in reversed(range(model.n_decoder_layers)):
        a_in = acts[i]
        grads[f"D{i}_W"] = np.tensordot(a_in, dz, axes=([0, 1], [0, 1]))
        grads[f"D{i}_b"] = dz.sum(axis=(0, 1))
        dz = dz @ p[f"D{i}_W"].T
        if i > 0:
            dz = dz * (1.0 - a_in**2)
    dhs = dz

    K, M = dhs.shape[:2]
    dZ = np.empty((K, M, 4 * h))
    dh_next = np.zeros((M, h))
    dc_next = np.zeros((M, h))
    W_hT = p["W_h"].T
    for j in reversed(range(K)):
        i_g, f_g, o_g, g_g, tc = cache["gates"][j]
        dh = dhs[j] + dh_next
        dc = dc_next + dh * o_g * (1.0 - tc**2)
        dZ[j, :, :h] = dc * g_g * i_g * (1.0 - i_g)
        dZ[j, :, h : 2 * h] = dc * cache["cs_prev"][j] * f_g * (1.0 - f_g)
        dZ[j, :, 2 * h : 3 * h] = dh * tc * o_g * (1.0 - o_g)
        dZ[j, :, 3 * h :] = dc * i_g * (1.0 - g_g**2)
        dc_next = dc * f_g
        dh_next = dZ[j] @ W_hT
    grads["W_h"] = np.tensordot(cache["hs_prev"], dZ, axes=([0, 1], [0, 1]))
    grads["W_x"] = np.tensordot(cache["xn"], dZ, axes=([0, 1], [0, 1]))
    grads["b"] = dZ.sum(axis=(0, 1))
    return loss, grads


# -- validation ------------------------------------------------------------------


def deployment_loss(model: DeepTruckModel, episodes, slices, horizon: int) -> float:
    """Mean per-step squared normalised error of closed-loop rollouts from ``y(k0)``."""
    u = np.stack([episodes[e].u[k0 : k0 + horizon] for e, k0 in slices], axis=1)
    w = np.stack([episodes[e].w[k0 : k0 + horizon] for e, k0 in slices], axis=1)
    y = np.stack([episodes[e].y[k0 : k0 + horizon + 1] for e, k0 in slices], axis=1)
    try:
        yhat = forward_deployment(model, u, w, y[0], horizon)
    except ModelDivergedError:
        return math.inf
    err = normalized_errors(model, yhat[1:], y[1:])
    return float(np.mean(np.sum(err**2, axis=-1)))


def split_episodes(episodes, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(episodes))
    n_val = max(1, int(round(fraction * len(episodes)))) if len(episodes) > 1 else 0
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [episodes[i] for i in train], [episodes[i] for i in val]


@dataclass
class LearningCurve:
    epoch: list[int]
    train_form_loss: list[float]
    deploy_form_loss: list[float]

    def rows(self):
        return list(zip(self.epoch, self.train_form_loss, self.deploy_form_loss))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_form_loss,deploy_form_loss\n")
            for e, a, b in self.rows():
                fh.write(f"{e},{a:.17g},{b:.17g}\n")


def train(model: DeepTruckModel, episodes, cfg: TrainConfig, rng: np.random.Generator | None = None):
    """Fit ``model`` on ``episodes``; return the best-validation model and the learning curve.

    Row 0 of the curve is the untrained model; rows 1..epochs follow each
    epoch of ``N`` Adagrad steps.  Validation uses a fixed set of held-out
    slices (teacher-forced loss) and closed-loop rollouts of
    ``deploy_horizon`` steps (deployment loss), both reported per step.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    train_eps, val_eps = split_episodes(episodes, cfg.validation_fraction, cfg.split_seed)
    if not val_eps:
        val_eps = train_eps
    w_dim = model.io.w_dim
    sampler = SliceSampler(train_eps, cfg.K + 1)
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.split_seed, 1]))
    val_batch = make_batch(val_eps, SliceSampler(val_eps, cfg.K + 1).sample(val_rng, cfg.val_slices), cfg.K, w_dim)
    try:
        deploy_slices = SliceSampler(val_eps, cfg.deploy_horizon + 1).sample(val_rng, cfg.val_rollouts)
        deploy_horizon = cfg.deploy_horizon
    except ValueError:
        deploy_horizon = min(len(ep) for ep in val_eps) - 1
        deploy_slices = SliceSampler(val_eps, deploy_horizon + 1).sample(val_rng, cfg.val_rollouts)
    per_step = 1.0 / (cfg.M * cfg.K)
    val_norm = 1.0 / (val_batch.M * val_batch.K)

    def evaluate(m):
        return loss_kstep(m, val_batch) * val_norm, deployment_loss(m, val_eps, deploy_slices, deploy_horizon)

    state = AdagradState.zeros_like(model.params)
    curve = LearningCurve([], [], [])
    tl, dl = evaluate(model)
    curve.epoch.append(0)
    curve.train_form_loss.append(tl)
    curve.deploy_form_loss.append(dl)
    best, best_loss = model.copy(), dl
    params = model.params
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(cfg.N):
            batch = make_batch(train_eps, sampler.sample(rng, cfg.M), cfg.K, w_dim)
            loss, grads = backprop_kstep(model, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            grads = {k: g * per_step for k, g in grads.items()}
            params = adagrad_update(
                params, grads, state, cfg.learning_rate, cfg.adagrad_epsilon, cfg.gradient_clip_norm
            )
            model = model.with_params(params) if _finite(params) else _diverged(epoch)
        tl, dl = evaluate(model)
        if not math.isfinite(tl):
            raise TrainingDivergedError(epoch)
        curve.epoch.append(epoch)
        curve.train_form_loss.append(tl)
        curve.deploy_form_loss.append(dl)
        if dl < best_loss:
            best, best_loss = model.copy(), dl
        if epoch % 50 == 0 or epoch == cfg.epochs:
            log.info("epoch %d train %.5f deploy %.5f (%.0fs)", epoch, tl, dl, time.perf_counter() - t0)
    return best, curve


def _finite(params) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())


def _diverged(epoch):
    raise TrainingDivergedError(epoch, "parameters became non-finite")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
