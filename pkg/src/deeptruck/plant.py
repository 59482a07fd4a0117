"""Parametric longitudinal truck model used as ground truth.

The plant is deliberately low order but hybrid: first-order actuator lags,
a gearbox with hysteresis shift logic, quadratic aerodynamic drag, rolling
resistance and road grade.  One call to :func:`plant_step` advances the
truck by ``cfg.dt`` seconds.

All state fields may be scalars or equally shaped numpy arrays, so the same
code steps one truck or a whole batch of independent trucks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

GRAVITY = 9.81
AIR_DENSITY = 1.225


def _default_ratios() -> list[float]:
    # geometric ladder, first gear 12.0 down to top gear 2.8 (final drive folded in)
    return [round(12.0 * (2.8 / 12.0) ** (g / 9), 4) for g in range(10)]


def _shift_speeds(ratios: list[float], rpm_up: float, rpm_down: float, radius: float):
    up = [rpm_up * 2 * math.pi / 60 * radius / r for r in ratios[:-1]]
    down = [rpm_down * 2 * math.pi / 60 * radius / r for r in ratios[1:]]
    return [round(x, 4) for x in up], [round(x, 4) for x in down]


_RATIOS = _default_ratios()
_UP, _DOWN = _shift_speeds(_RATIOS, 1700.0, 1150.0, 0.5)


@dataclass(frozen=True)
class PlantConfig:
    """Physical constants of the surrogate truck.

    ``shift_up_speeds[g]`` is the speed above which gear ``g`` shifts up to
    ``g + 1``; ``shift_down_speeds[g]`` is the speed below which gear ``g + 1``
    shifts back down to ``g``.  Both lists have ``len(gear_ratios) - 1``
    entries and every down speed must sit below the matching up speed.
    """

    mass: float = 15000.0
    max_engine_torque: float = 2000.0
    gear_ratios: tuple[float, ...] = tuple(_RATIOS)
    shift_up_speeds: tuple[float, ...] = tuple(_UP)
    shift_down_speeds: tuple[float, ...] = tuple(_DOWN)
    wheel_radius: float = 0.5
    drag_coefficient: float = 0.6
    frontal_area: float = 8.0
    rolling_resistance_coefficient: float = 0.007
    max_brake_decel: float = 6.0
    brake_lag_time_constant: float = 0.3
    engine_lag_time_constant: float = 0.5
    idle_fuel_rate: float = 0.3
    fuel_per_torque: float = 0.012
    dt: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "gear_ratios", tuple(float(r) for r in self.gear_ratios))
        object.__setattr__(self, "shift_up_speeds", tuple(float(s) for s in self.shift_up_speeds))
        object.__setattr__(self, "shift_down_speeds", tuple(float(s) for s in self.shift_down_speeds))
        self.validate()

    def validate(self) -> None:
        scalars = {
            "mass": self.mass,
            "max_engine_torque": self.max_engine_torque,
            "wheel_radius": self.wheel_radius,
            "drag_coefficient": self.drag_coefficient,
            "frontal_area": self.frontal_area,
            "rolling_resistance_coefficient": self.rolling_resistance_coefficient,
            "max_brake_decel": self.max_brake_decel,
            "brake_lag_time_constant": self.brake_lag_time_constant,
            "engine_lag_time_constant": self.engine_lag_time_constant,
            "idle_fuel_rate": self.idle_fuel_rate,
            "fuel_per_torque": self.fuel_per_torque,
            "dt": self.dt,
        }
        for name, value in scalars.items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        n = len(self.gear_ratios)
        if n < 2:
            raise ValueError("need at least two gears")
        if any(r <= 0 for r in self.gear_ratios):
            raise ValueError("gear ratios must be positive")
        if any(b >= a for a, b in zip(self.gear_ratios, self.gear_ratios[1:])):
            raise ValueError("gear_ratios must be strictly decreasing")
        if len(self.shift_up_speeds) != n - 1 or len(self.shift_down_speeds) != n - 1:
            raise ValueError(f"expected {n - 1} shift speeds per direction")
        for g, (up, down) in enumerate(zip(self.shift_up_speeds, self.shift_down_speeds)):
            if not 0 < down < up:
                raise ValueError(
                    f"gear {g}: need 0 < shift_down_speed ({down}) < shift_up_speed ({up})"
                )

    @property
    def n_gears(self) -> int:
        return len(self.gear_ratios)


@dataclass
class PlantState:
    v: np.ndarray | float = 0.0
    gear: np.ndarray | int = 0
    engine_torque: np.ndarray | float = 0.0
    brake_decel: np.ndarray | float = 0.0


@dataclass
class Response:
    """Measured truck response, ordered (a, v, f_rate) when stacked."""

    a: np.ndarray | float
    v: np.ndarray | float
    f_rate: np.ndarray | float

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.a, self.v, self.f_rate), axis=-1)


def gear_for_speed(v, cfg: PlantConfig):
    """Lowest gear whose upshift speed has not been reached (initial gear choice)."""
    up = np.asarray(cfg.shift_up_speeds)
    g = np.searchsorted(up, np.asarray(v, dtype=float), side="right")
    return g if np.ndim(g) else int(g)


def initial_state(v, cfg: PlantConfig) -> PlantState:
    """Plant at speed ``v`` with released pedals and a speed-consistent gear."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("initial speed must be finite and >= 0")
    zero = np.zeros_like(v)
    if v.ndim == 0:
        return PlantState(float(v), gear_for_speed(float(v), cfg), 0.0, 0.0)
    return PlantState(v.copy(), gear_for_speed(v, cfg), zero.copy(), zero.copy())


def _lag_gain(tau: float, dt: float) -> float:
    return 1.0 - math.exp(-dt / tau)


def resistive_accel(v, grade, cfg: PlantConfig):
    """Deceleration from drag, rolling resistance and grade (m/s^2, positive opposes motion)."""
    drag = 0.5 * AIR_DENSITY * cfg.drag_coefficient * cfg.frontal_area * np.square(v)
    rolling = cfg.rolling_resistance_coefficient * cfg.mass * GRAVITY
    slope = cfg.mass * GRAVITY * np.sin(np.arctan(np.asarray(grade) / 100.0))
    return (drag + rolling + slope) / cfg.mass


def traction_accel(torque, gear, cfg: PlantConfig):
    ratio = np.asarray(cfg.gear_ratios)[gear]
    return torque * ratio / cfg.wheel_radius / cfg.mass


def _shift(v, gear, cfg: PlantConfig):
    up = np.append(cfg.shift_up_speeds, np.inf)
    down = np.insert(cfg.shift_down_speeds, 0, -np.inf)
    gear = np.asarray(gear)
    return np.where(v > up[gear], gear + 1, np.where(v < down[gear], gear - 1, gear))


def plant_step(state: PlantState, u, grade, cfg: PlantConfig) -> tuple[PlantState, Response]:
    """Advance the truck one sample.

    Parameters
    ----------
    state : PlantState
        Current speed, gear and actuator outputs.
    u : array_like, shape (..., 2)
        Engine command and brake command, both in percent [0, 100].
    grade : float or ndarray
        Road grade in percent.
    cfg : PlantConfig

    Returns
    -------
    (PlantState, Response)
        ``Response.a`` is the acceleration actually applied over the step, so
        ``v_next == v + a * dt`` holds exactly even when the speed clamp at
        zero is active.
    """
    u = np.asarray(u, dtype=float)
    grade_arr = np.asarray(grade, dtype=float)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(grade_arr))):
        raise ValueError("plant_step: non-finite input")
    if u.shape[-1] != 2:
        raise ValueError("plant_step: u must have 2 components (engine, brake)")
    e_cmd = np.clip(u[..., 0], 0.0, 100.0)
    b_cmd = np.clip(u[..., 1], 0.0, 100.0)

    ke = _lag_gain(cfg.engine_lag_time_constant, cfg.dt)
    kb = _lag_gain(cfg.brake_lag_time_constant, cfg.dt)
    torque = state.engine_torque + ke * (e_cmd / 100.0 * cfg.max_engine_torque - state.engine_torque)
    brake = state.brake_decel + kb * (b_cmd / 100.0 * cfg.max_brake_decel - state.brake_decel)

    v = np.asarray(state.v, dtype=float)
    accel = traction_accel(torque, state.gear, cfg) - resistive_accel(v, grade_arr, cfg) - brake
    v_next = np.maximum(v + accel * cfg.dt, 0.0)
    a_applied = (v_next - v) / cfg.dt
    gear = _shift(v_next, state.gear, cfg)
    f_rate = cfg.idle_fuel_rate + cfg.fuel_per_torque * torque

    if v_next.ndim == 0:
        new = PlantState(float(v_next), int(gear), float(torque), float(brake))
        return new, Response(float(a_applied), float(v_next), float(f_rate))
    return PlantState(v_next, gear, torque, brake), Response(a_applied, v_next, f_rate)


def simulate(cfg: PlantConfig, u, grade, v0: float = 0.0, state: PlantState | None = None):
    """Run the plant over an input sequence.

    Returns an array of shape (n + 1, 3) of responses (a, v, f_rate); row 0
    is the response at the initial state (a = 0, idle-consistent fuel).
    """
    u = np.asarray(u, dtype=float)
    grade = np.broadcast_to(np.asarray(grade, dtype=float), u.shape[:1])
    st = state if state is not None else initial_state(v0, cfg)
    out = np.empty((len(u) + 1, 3))
    out[0] = (0.0, st.v, cfg.idle_fuel_rate + cfg.fuel_per_torque * st.engine_torque)
    for k in range(len(u)):
        st, resp = plant_step(st, u[k], grade[k], cfg)
        out[k + 1] = (resp.a, resp.v, resp.f_rate)
    return out


def with_overrides(cfg: PlantConfig, **kwargs) -> PlantConfig:
    return replace(cfg, **kwargs)


def linear_config(dt: float = 0.1) -> PlantConfig:
    """Single-gear, drag-free, lag-free-ish variant used as an easy identification target."""
    return PlantConfig(
        gear_ratios=(6.0, 5.999),
        shift_up_speeds=(1e6,),
        shift_down_speeds=(1e5,),
        drag_coefficient=1e-9,
        engine_lag_time_constant=1e-6,
        brake_lag_time_constant=1e-6,
        dt=dt,
    )
