"""Recurrent replica of truck longitudinal dynamics.

The model has three parts:

* a single-layer LSTM state model consuming the normalised inputs
  ``[u(k), w(k), y(k)]`` and the previous hidden state;
* a feedforward decoder mapping the hidden state to normalised outputs
  (acceleration, an unused speed channel, fuel rate);
* a kinematic constraint that forms the speed output as
  ``v(k+1) = v(k) + a(k+1) * dt`` instead of trusting the decoder.

Outputs are ordered ``(a, v, f_rate)`` everywhere.  Arrays are time-major:
``(steps, batch, channels)``; unbatched inputs are accepted and returned
without the batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import load_container, save_container

A, V, F = 0, 1, 2


class ModelDivergedError(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite model output"):
        self.step = step
        super().__init__(f"{message} at step {step}")


@dataclass
class IoSpec:
    u_dim: int = 2
    w_dim: int = 1
    y_dim: int = 3
    dt: float = 0.1
    u_names: tuple[str, ...] = ("E_cmd", "B_cmd")
    w_names: tuple[str, ...] = ("theta_rdg",)
    y_names: tuple[str, ...] = ("a", "v", "f_rate")
    u_units: tuple[str, ...] = ("%", "%")
    w_units: tuple[str, ...] = ("%",)
    y_units: tuple[str, ...] = ("m/s^2", "m/s", "cm^3/s")
    u_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    u_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    w_offset: np.ndarray = field(default_factory=lambda: np.zeros(1))
    w_scale: np.ndarray = field(default_factory=lambda: np.ones(1))
    y_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    y_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        for name in ("u_offset", "u_scale", "w_offset", "w_scale", "y_offset", "y_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if self.w_dim == 0:
            self.w_names, self.w_units = (), ()
        if self.y_dim != 3 or tuple(self.y_names) != ("a", "v", "f_rate"):
            raise ValueError("outputs must be (a, v, f_rate)")
        for prefix, dim in (("u", self.u_dim), ("w", self.w_dim), ("y", self.y_dim)):
            off, sc = getattr(self, prefix + "_offset"), getattr(self, prefix + "_scale")
            if off.shape != (dim,) or sc.shape != (dim,):
                raise ValueError(f"{prefix} normalisation must have {dim} entries")
            if np.any(sc <= 0):
                raise ValueError(f"{prefix} scales must be positive")

    @property
    def n_in(self) -> int:
        return self.u_dim + self.w_dim + self.y_dim

    @property
    def in_offset(self) -> np.ndarray:
        return np.concatenate([self.u_offset, self.w_offset, self.y_offset])

    @property
    def in_scale(self) -> np.ndarray:
        return np.concatenate([self.u_scale, self.w_scale, self.y_scale])

    def normalize_y(self, y):
        return (np.asarray(y) - self.y_offset) / self.y_scale

    def denormalize_y(self, yn):
        return np.asarray(yn) * self.y_scale + self.y_offset

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IoSpec":
        d = dict(d)
        for k in ("u_names", "w_names", "y_names", "u_units", "w_units", "y_units"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def from_episodes(cls, episodes, with_grade: bool | None = None) -> "IoSpec":
        """Per-channel mean/std normalisation fitted on training episodes."""
        if with_grade is None:
            with_grade = all(ep.w_dim == 1 for ep in episodes)
        u = np.concatenate([ep.u for ep in episodes])
        y = np.concatenate([ep.y for ep in episodes])

        def stats(x):
            sd = x.std(axis=0)
            return x.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)

        uo, us = stats(u)
        yo, ys = stats(y)
        kw = dict(dt=float(episodes[0].dt), u_offset=uo, u_scale=us, y_offset=yo, y_scale=ys)
        if with_grade:
            wo, ws = stats(np.concatenate([ep.w for ep in episodes]))
            return cls(w_dim=1, w_offset=wo, w_scale=ws, **kw)
        return cls(w_dim=0, w_offset=np.zeros(0), w_scale=np.ones(0), **kw)


@dataclass
class HiddenState:
    cell: np.ndarray
    hidden: np.ndarray

    @classmethod
    def zeros(cls, size: int, batch: int | None = None) -> "HiddenState":
        shape = (size,) if batch is None else (batch, size)
        return cls(np.zeros(shape), np.zeros(shape))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class DeepTruckModel:
    """Parameters of the replica: LSTM weights, decoder layers and normalisation.

    ``params`` maps names to float64 arrays.  LSTM gates are stacked in the
    column order input, forget, output, candidate, using the row-vector
    convention ``z = x @ W_x + h @ W_h + b``.
    """

    kind = "deeptruck-model"

    def __init__(self, io: IoSpec, params: dict[str, np.ndarray], hidden_size: int, decoder_sizes=(64, 64)):
        self.io = io
        self.hidden_size = int(hidden_size)
        self.decoder_sizes = tuple(int(s) for s in decoder_sizes)
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self._check_shapes()

    @classmethod
    def initialize(cls, io: IoSpec, rng: np.random.Generator, hidden_size: int = 64, decoder_sizes=(64, 64)):
        h = hidden_size
        params = {}

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        params["W_x"] = uniform(io.n_in, (io.n_in, 4 * h))
        params["W_h"] = uniform(h, (h, 4 * h))
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        params["b"] = b
        sizes = (h,) + tuple(decoder_sizes) + (io.y_dim,)
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"D{i}_W"] = uniform(n_in, (n_in, n_out))
            params[f"D{i}_b"] = np.zeros(n_out)
        return cls(io, params, h, decoder_sizes)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        h, io = self.hidden_size, self.io
        shapes = {"W_x": (io.n_in, 4 * h), "W_h": (h, 4 * h), "b": (4 * h,)}
        sizes = (h,) + self.decoder_sizes + (io.y_dim,)
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"D{i}_W"] = (n_in, n_out)
            shapes[f"D{i}_b"] = (n_out,)
        return shapes

    def _check_shapes(self):
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name}: non-finite entries")

    @property
    def n_decoder_layers(self) -> int:
        return len(self.decoder_sizes) + 1

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def expected_n_params(self) -> int:
        h, n_in = self.hidden_size, self.io.n_in
        sizes = (h,) + self.decoder_sizes + (self.io.y_dim,)
        return 4 * h * (h + n_in) + 4 * h + sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def with_params(self, params: dict[str, np.ndarray]) -> "DeepTruckModel":
        return DeepTruckModel(self.io, params, self.hidden_size, self.decoder_sizes)

    def copy(self) -> "DeepTruckModel":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "io_spec": self.io.to_dict(),
            "hidden_size": self.hidden_size,
            "decoder_sizes": list(self.decoder_sizes),
        }
        save_container(path, self.kind, meta, self.params)

    @classmethod
    def load(cls, path) -> "DeepTruckModel":
        _, meta, arrays = load_container(path, expect_kind=cls.kind)
        return cls(IoSpec.from_dict(meta["io_spec"]), arrays, meta["hidden_size"], meta["decoder_sizes"])

    # -- building blocks -----------------------------------------------------

    def normalize_inputs(self, u, w, y):
        x = np.concatenate([np.asarray(u, float), np.asarray(w, float), np.asarray(y, float)], axis=-1)
        return (x - self.io.in_offset) / self.io.in_scale

    def cell(self, zx, state: HiddenState) -> tuple[HiddenState, tuple]:
        """One LSTM update from the input projection ``zx = x @ W_x + b``."""
        h = self.hidden_size
        z = zx + state.hidden @ self.params["W_h"]
        i = sigmoid(z[..., :h])
        f = sigmoid(z[..., h : 2 * h])
        o = sigmoid(z[..., 2 * h : 3 * h])
        g = np.tanh(z[..., 3 * h :])
        c = f * state.cell + i * g
        tc = np.tanh(c)
        return HiddenState(c, o * tc), (i, f, o, g, tc)

    def decoder(self, hidden):
        """Normalised decoder output and the per-layer activations (for backprop)."""
        acts = [hidden]
        z = hidden
        last = self.n_decoder_layers - 1
        for i in range(self.n_decoder_layers):
            z = z @ self.params[f"D{i}_W"] + self.params[f"D{i}_b"]
            if i < last:
                z = np.tanh(z)
            acts.append(z)
        return z, acts

    def constrain(self, out_n, prev_v):
        """Map normalised decoder output to physical (a, v, f_rate).

        The truck cannot roll backwards: ``a`` is floored at ``-prev_v / dt``
        so ``v = prev_v + a * dt`` stays nonnegative (the same convention the
        plant uses when it reports acceleration at standstill).
        """
        io = self.io
        a = np.maximum(out_n[..., A] * io.y_scale[A] + io.y_offset[A], -prev_v / io.dt)
        f = np.maximum(out_n[..., F] * io.y_scale[F] + io.y_offset[F], 0.0)
        v = prev_v + a * io.dt
        return np.stack([a, v, f], axis=-1)


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite input")


def lstm_step(x: HiddenState, u, w, y_in, model: DeepTruckModel) -> HiddenState:
    """State update ``x(k+1) = H(u(k), w(k) | x(k), y(k))``."""
    _check_finite(u, w, y_in, x.cell, x.hidden)
    xn = model.normalize_inputs(u, w, y_in)
    new, _ = model.cell(xn @ model.params["W_x"] + model.params["b"], x)
    return new


def decode(x: HiddenState, prev_y, model: DeepTruckModel) -> np.ndarray:
    """Output ``y(k+1)`` from hidden state ``x(k+1)``; speed is integrated from ``prev_y``."""
    out, _ = model.decoder(x.hidden)
    return model.constrain(out, np.asarray(prev_y, float)[..., V])


def _batched(arr, ndim):
    arr = np.asarray(arr, dtype=float)
    return (arr[:, None] if arr.ndim == ndim else arr), arr.ndim == ndim


def forward_training(model: DeepTruckModel, episode, k0: int, K: int) -> np.ndarray:
    """Teacher-forced predictions ``ŷ(k0+1 .. k0+K)`` for one episode slice.

    The state model sees the measured ``y(k)`` at every step while its hidden
    state recurses from zero at ``k0``.  Returns shape ``(K, 3)``.
    """
    if K < 1 or k0 < 0 or k0 + K + 1 > len(episode):
        raise IndexError(f"slice k0={k0}, K={K} out of range for episode of length {len(episode)}")
    u = episode.u[k0 : k0 + K]
    w = episode.w[k0 : k0 + K] if model.io.w_dim else np.zeros((K, 0))
    y = episode.y[k0 : k0 + K]
    return teacher_forced(model, u, w, y)


def teacher_forced(model: DeepTruckModel, u, w, y) -> np.ndarray:
    """Teacher-forced outputs for input arrays ``(K[, B], dim)``; ``y`` are the measured y(k)."""
    u, single = _batched(u, 2)
    w, _ = _batched(w, 2)
    y, _ = _batched(y, 2)
    zx = model.normalize_inputs(u, w, y) @ model.params["W_x"] + model.params["b"]
    state = HiddenState.zeros(model.hidden_size, u.shape[1])
    hs = np.empty(zx.shape[:2] + (model.hidden_size,))
    for j in range(len(zx)):
        state, _ = model.cell(zx[j], state)
        hs[j] = state.hidden
    out, _ = model.decoder(hs)
    yhat = model.constrain(out, y[..., V])
    return yhat[:, 0] if single else yhat


def forward_deployment(model: DeepTruckModel, u, w, y0, steps: int) -> np.ndarray:
    """Closed-loop simulation: the model's own outputs feed back into the state model.

    Parameters
    ----------
    u, w : array_like, shape (>= steps[, B], dim)
        Commands and exogenous inputs; ``w`` may have zero columns.
    y0 : array_like, shape ([B,] 3)
        Observed initial response ``(a, v, f_rate)``.

    Returns
    -------
    ndarray, shape (steps + 1[, B], 3)
        Row 0 is ``y0``.

    Raises
    ------
    ModelDivergedError
        If any output becomes non-finite; carries the step index.
    """
    u, single = _batched(u, 2)
    w, _ = _batched(w, 2)
    y0 = np.asarray(y0, dtype=float)
    y0 = y0[None] if y0.ndim == 1 else y0
    if len(u) < steps or len(w) < steps:
        raise IndexError("input series shorter than requested steps")
    if w.shape[-1] != model.io.w_dim:
        w = np.zeros(u.shape[:2] + (model.io.w_dim,))
    batch = u.shape[1]
    sim = DeploymentState.start(model, np.broadcast_to(y0, (batch, 3)))
    out = np.empty((steps + 1, batch, 3))
    out[0] = sim.y
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            sim = deployment_step(model, sim, u[k], w[k])
            if not np.all(np.isfinite(sim.y)):
                raise ModelDivergedError(k + 1)
            out[k + 1] = sim.y
    return out[:, 0] if single else out


@dataclass
class DeploymentState:
    """Hidden state and last output of a closed-loop simulation."""

    x: HiddenState
    y: np.ndarray

    @classmethod
    def start(cls, model: DeepTruckModel, y0) -> "DeploymentState":
        y0 = np.array(y0, dtype=float)
        batch = None if y0.ndim == 1 else y0.shape[0]
        return cls(HiddenState.zeros(model.hidden_size, batch), y0)


def deployment_step(model: DeepTruckModel, sim: DeploymentState, u, w) -> DeploymentState:
    zx = model.normalize_inputs(u, w, sim.y) @ model.params["W_x"] + model.params["b"]
    x, _ = model.cell(zx, sim.x)
    out, _ = model.decoder(x.hidden)
    return DeploymentState(x, model.constrain(out, sim.y[..., V]))
