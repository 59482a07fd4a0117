"""Time-aligned driving records and their CSV representation.

File layout::

    # dt=0.1
    # kind=spanning
    # seed=3
    t,E_cmd,B_cmd,theta_rdg,v,a,f_rate
    0,12.5,0,0.25,14.2,0,0.3
    ...

Comment lines carry scalar metadata.  The ``theta_rdg`` column is optional;
without it the episode has no exogenous input (``w_dim == 0``).  Numbers are
written with 17 significant digits so doubles survive the round trip.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REQUIRED_COLUMNS = ("t", "E_cmd", "B_cmd", "v", "a", "f_rate")
COLUMN_ORDER = ("t", "E_cmd", "B_cmd", "theta_rdg", "v", "a", "f_rate")


class EpisodeFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Episode:
    """One driving record sampled every ``dt`` seconds.

    Row ``k`` holds the commands applied at sample ``k`` and the response
    measured at sample ``k`` (acceleration in m/s^2, speed in m/s, fuel rate
    in cm^3/s, grade in percent).
    """

    dt: float
    t: np.ndarray
    E_cmd: np.ndarray
    B_cmd: np.ndarray
    v: np.ndarray
    a: np.ndarray
    f_rate: np.ndarray
    theta_rdg: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for name in ("E_cmd", "B_cmd", "v", "a", "f_rate") + (("theta_rdg",) if self.theta_rdg is not None else ()):
            col = np.asarray(getattr(self, name), dtype=float)
            if col.shape != (n,):
                raise ValueError(f"column {name} has shape {col.shape}, expected ({n},)")
            setattr(self, name, col)
        self.t = np.asarray(self.t, dtype=float)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    @property
    def w_dim(self) -> int:
        return 0 if self.theta_rdg is None else 1

    @property
    def u(self) -> np.ndarray:
        return np.stack([self.E_cmd, self.B_cmd], axis=1)

    @property
    def w(self) -> np.ndarray:
        if self.theta_rdg is None:
            return np.zeros((len(self), 0))
        return self.theta_rdg[:, None]

    @property
    def y(self) -> np.ndarray:
        """Responses stacked in model channel order (a, v, f_rate)."""
        return np.stack([self.a, self.v, self.f_rate], axis=1)

    def without_grade(self) -> "Episode":
        return Episode(self.dt, self.t, self.E_cmd, self.B_cmd, self.v, self.a, self.f_rate, None, dict(self.meta))

    def columns(self) -> list[str]:
        return [c for c in COLUMN_ORDER if c != "theta_rdg" or self.theta_rdg is not None]

    def equals(self, other: "Episode") -> bool:
        if self.columns() != other.columns() or self.dt != other.dt:
            return False
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in self.columns())


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_episode(episode: Episode, path) -> None:
    cols = episode.columns()
    buf = io.StringIO()
    buf.write(f"# dt={_fmt(episode.dt)}\n")
    for key, value in sorted(episode.meta.items()):
        if isinstance(value, (str, int, float)) and key != "dt":
            buf.write(f"# {key}={value}\n")
    buf.write(",".join(cols) + "\n")
    data = np.stack([getattr(episode, c) for c in cols], axis=1)
    for row in data:
        buf.write(",".join(_fmt(x) for x in row) + "\n")
    Path(path).write_text(buf.getvalue())


def _parse_meta(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def read_episode(path) -> Episode:
    meta: dict = {}
    header = None
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, _, value = line[1:].strip().partition("=")
                    meta[key.strip()] = _parse_meta(value.strip())
                continue
            if header is None:
                header = [h.strip() for h in line.split(",")]
                for col in REQUIRED_COLUMNS:
                    if col not in header:
                        raise EpisodeFormatError(f"missing required column '{col}'", lineno)
                unknown = set(header) - set(COLUMN_ORDER)
                if unknown:
                    raise EpisodeFormatError(f"unknown columns {sorted(unknown)}", lineno)
                if len(set(header)) != len(header):
                    raise EpisodeFormatError("duplicate column names", lineno)
                continue
            fields = line.split(",")
            if len(fields) != len(header):
                raise EpisodeFormatError(f"expected {len(header)} fields, got {len(fields)}", lineno)
            try:
                values = [float(x) for x in fields]
            except ValueError as exc:
                raise EpisodeFormatError(f"bad number: {exc}", lineno) from None
            if not all(math.isfinite(x) for x in values):
                raise EpisodeFormatError("non-finite value", lineno)
            rows.append((lineno, values))
    if header is None:
        raise EpisodeFormatError("no header row found")
    if not rows:
        raise EpisodeFormatError("episode has no samples")
    data = np.array([r for _, r in rows])
    cols = {name: data[:, i] for i, name in enumerate(header)}
    t = cols["t"]
    dt = float(meta.pop("dt", t[1] - t[0] if len(t) > 1 else 0.0))
    if len(t) > 1:
        if dt <= 0:
            raise EpisodeFormatError("time step must be positive")
        expected = t[0] + np.arange(len(t)) * dt
        bad = np.flatnonzero(np.abs(t - expected) > 1e-6 * max(dt, 1.0) + 1e-9 * np.abs(expected))
        if bad.size:
            raise EpisodeFormatError("non-uniform time grid", rows[bad[0]][0])
    return Episode(
        dt=dt,
        t=t,
        E_cmd=cols["E_cmd"],
        B_cmd=cols["B_cmd"],
        v=cols["v"],
        a=cols["a"],
        f_rate=cols["f_rate"],
        theta_rdg=cols.get("theta_rdg"),
        meta=meta,
    )


def write_dataset(episodes, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ep in enumerate(episodes):
        p = directory / f"episode_{i:05d}.csv"
        write_episode(ep, p)
        paths.append(p)
    return paths


def read_dataset(directory) -> list[Episode]:
    paths = sorted(Path(directory).glob("episode_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no episode_*.csv files in {directory}")
    return [read_episode(p) for p in paths]
