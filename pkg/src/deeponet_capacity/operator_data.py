"""Synthetic operator-learning datasets.

Two tasks map a random forcing function ``f`` on ``[0, T]`` to a scalar
label at a query time: the angle of a forced pendulum
``y'' = -k sin(y) + f(t)`` and the antiderivative ``int_0^x f``.
Forcing functions are truncated Fourier series with i.i.d. uniform
coefficients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .network import atomic_write_text
from .seeding import substream


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int, sample: Optional[int] = None, index=None):
        super().__init__(message)
        self.step = step
        self.sample = sample
        self.index = index


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ForcingFunction:
    """``f(t) = a0 + sum_j a_j cos(j w t) + b_j sin(j w t)``."""

    a0: float
    a: tuple
    b: tuple
    omega: float
    amplitude: float = 1.0

    def __post_init__(self):
        if len(self.a) != len(self.b):
            raise ValueError("cosine and sine coefficient counts differ")

    @property
    def J(self) -> int:
        return len(self.a)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        out = np.full(t.shape, float(self.a0))
        for j, (aj, bj) in enumerate(zip(self.a, self.b), start=1):
            out = out + aj * np.cos(j * self.omega * t) + bj * np.sin(j * self.omega * t)
        return out

    def integral(self, x):
        """Closed-form ``int_0^x f(t) dt``."""
        x = np.asarray(x, dtype=np.float64)
        out = self.a0 * x
        for j, (aj, bj) in enumerate(zip(self.a, self.b), start=1):
            jw = j * self.omega
            out = out + aj * np.sin(jw * x) / jw + bj * (1 - np.cos(jw * x)) / jw
        return out

    def sup_bound(self) -> float:
        return abs(self.a0) + sum(abs(v) for v in self.a) + sum(abs(v) for v in self.b)


@dataclass(frozen=True)
class ForcingLaw:
    J: int = 5
    A: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if self.J < 0 or self.A < 0 or self.T <= 0:
            raise ValueError("need J >= 0, A >= 0, T > 0")

    @property
    def omega(self) -> float:
        return 2 * math.pi / self.T


def sample_forcing(law: ForcingLaw, rng: np.random.Generator) -> ForcingFunction:
    c = rng.uniform(-law.A, law.A, size=2 * law.J + 1) if law.A > 0 else np.zeros(2 * law.J + 1)
    return ForcingFunction(float(c[0]), tuple(c[1 : law.J + 1].tolist()), tuple(c[law.J + 1 :].tolist()), law.omega, law.A)


def discretize(f: Callable, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("sensor grid is empty")
    return np.asarray(f(grid), dtype=np.float64)


def rk4_solve(rhs: Callable, y0, t_grid) -> np.ndarray:
    """Classical RK4 on ``t_grid``; returns states of shape ``(len(t_grid),) + y0.shape``.

    ``rhs(t, y)`` must accept the state array as given, so a batch of
    independent systems can be integrated together by stacking states.
    """
    t = np.asarray(t_grid, dtype=np.float64)
    if t.ndim != 1 or t.size < 1 or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    y = np.asarray(y0, dtype=np.float64).copy()
    out = np.empty((t.size,) + y.shape)
    out[0] = y
    for i in range(t.size - 1):
        h = t[i + 1] - t[i]
        k1 = rhs(t[i], y)
        k2 = rhs(t[i] + h / 2, y + h / 2 * k1)
        k3 = rhs(t[i] + h / 2, y + h / 2 * k2)
        k4 = rhs(t[i + 1], y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            bad = tuple(int(v) for v in np.argwhere(~np.isfinite(y))[0])
            raise DivergenceError(f"non-finite state at step {i + 1}", i + 1, index=bad)
        out[i + 1] = y
    return out


@dataclass(frozen=True)
class TaskConfig:
    """Shared settings; ``sensors`` is the number of equispaced sensor points on ``[0, T]``."""

    T: float = 1.0
    J: int = 5
    A: float = 1.0
    sensors: int = 16
    constant_feature: bool = True

    @property
    def law(self) -> ForcingLaw:
        return ForcingLaw(self.J, self.A, self.T)

    @property
    def grid(self) -> np.ndarray:
        if self.sensors < 1:
            raise ValueError("need at least one sensor")
        return np.linspace(0.0, self.T, self.sensors)


@dataclass(frozen=True)
class PendulumConfig(TaskConfig):
    k: float = 1.0
    y0: float = 0.0
    v0: float = 0.0
    steps: int = 1000  # solver step h = T / steps

    @property
    def h(self) -> float:
        return self.T / self.steps

    def op_bound(self) -> float:
        """A priori bound on ``|y(t)|`` over the forcing class."""
        return abs(self.y0) + abs(self.v0) * self.T + (abs(self.k) + self.A * (2 * self.J + 1)) * self.T**2 / 2


@dataclass(frozen=True)
class AntiderivativeConfig(TaskConfig):
    def op_bound(self) -> float:
        return self.T * self.A * (2 * self.J + 1)


@dataclass
class OperatorDataset:
    x_B: np.ndarray
    x_T: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_B = np.asarray(self.x_B, dtype=np.float64)
        self.x_T = np.asarray(self.x_T, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x_B.ndim != 2 or self.x_T.ndim != 2:
            raise ValueError("x_B and x_T must be 2-D")
        if not (self.x_B.shape[0] == self.x_T.shape[0] == self.y.shape[0]):
            raise ValueError("x_B, x_T and y have different sample counts")

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def d1(self) -> int:
        return self.x_B.shape[1]

    @property
    def d2(self) -> int:
        return self.x_T.shape[1]

    def subset(self, idx) -> "OperatorDataset":
        return OperatorDataset(self.x_B[idx], self.x_T[idx], self.y[idx], dict(self.meta))


def _inputs(cfg: TaskConfig, forcings, t_query):
    grid = cfg.grid
    x_B = np.stack([discretize(f, grid) for f in forcings])
    x_T = np.asarray(t_query, dtype=np.float64)[:, None]
    if cfg.constant_feature:
        one = np.ones((x_B.shape[0], 1))
        x_B = np.hstack([x_B, one])
        x_T = np.hstack([x_T, one])
    return x_B, x_T


def _meta(task: str, cfg: TaskConfig, seed: int, x_B, x_T) -> dict:
    return {
        "task": task,
        "d1": int(x_B.shape[1]),
        "d2": int(x_T.shape[1]),
        "grid": cfg.grid.tolist(),
        "constant_feature": cfg.constant_feature,
        "seed": int(seed),
        "config": asdict(cfg),
        "op_bound": cfg.op_bound(),
    }


def _draw(cfg: TaskConfig, m: int, seed: int):
    if m <= 0:
        raise ValueError("m must be positive")
    forcings = [sample_forcing(cfg.law, substream(seed, "data", i)) for i in range(m)]
    t_query = np.array([substream(seed, "data", i, 1).uniform(0.0, cfg.T) for i in range(m)])
    return forcings, t_query


def pendulum_labels(cfg: PendulumConfig, forcings, t_query) -> np.ndarray:
    """Integrate every pendulum at once and read the angle at ``t_query`` by linear interpolation."""
    m = len(forcings)
    J = max(f.J for f in forcings)
    if len({f.omega for f in forcings}) > 1:
        raise ValueError("forcing functions must share the base frequency")
    a0 = np.array([f.a0 for f in forcings])
    a = np.zeros((m, J))
    b = np.zeros((m, J))
    for i, f in enumerate(forcings):
        a[i, : f.J], b[i, : f.J] = f.a, f.b
    jw = forcings[0].omega * np.arange(1, J + 1)

    def rhs(t, s):
        force = a0 + a @ np.cos(jw * t) + b @ np.sin(jw * t)
        return np.stack([s[1], -cfg.k * np.sin(s[0]) + force])

    t_grid = np.linspace(0.0, cfg.T, cfg.steps + 1)
    s0 = np.stack([np.full(m, cfg.y0), np.full(m, cfg.v0)])
    try:
        traj = rk4_solve(rhs, s0, t_grid)[:, 0, :]
    except DivergenceError as e:
        sample = e.index[-1]
        raise DivergenceError(f"sample {sample}: {e}", e.step, sample, e.index) from None
    idx = np.clip(np.searchsorted(t_grid, t_query, side="right") - 1, 0, cfg.steps - 1)
    w = (t_query - t_grid[idx]) / (t_grid[idx + 1] - t_grid[idx])
    cols = np.arange(m)
    return (1 - w) * traj[idx, cols] + w * traj[idx + 1, cols]


def make_pendulum_dataset(cfg: PendulumConfig, m: int, seed: int) -> OperatorDataset:
    forcings, t_query = _draw(cfg, m, seed)
    y = pendulum_labels(cfg, forcings, t_query)
    x_B, x_T = _inputs(cfg, forcings, t_query)
    return OperatorDataset(x_B, x_T, y, _meta("pendulum", cfg, seed, x_B, x_T))


def make_antiderivative_dataset(cfg: AntiderivativeConfig, m: int, seed: int) -> OperatorDataset:
    forcings, t_query = _draw(cfg, m, seed)
    y = np.array([float(f.integral(t)) for f, t in zip(forcings, t_query)])
    x_B, x_T = _inputs(cfg, forcings, t_query)
    return OperatorDataset(x_B, x_T, y, _meta("antiderivative", cfg, seed, x_B, x_T))


# ---------------------------------------------------------------------------
# JSON Lines files


def _num(v: float) -> str:
    return format(float(v), ".17g")


def dataset_text(ds: OperatorDataset) -> str:
    lines = [json.dumps({"meta": ds.meta}, sort_keys=True)]
    for xb, xt, y in zip(ds.x_B, ds.x_T, ds.y):
        lines.append(
            '{"x_B": [' + ", ".join(map(_num, xb)) + '], "x_T": [' + ", ".join(map(_num, xt)) + '], "y": ' + _num(y) + "}"
        )
    return "\n".join(lines) + "\n"


def save_dataset(ds: OperatorDataset, path) -> None:
    atomic_write_text(path, dataset_text(ds))


def load_dataset(path) -> OperatorDataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        head = json.loads(lines[0])
        meta = head["meta"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetFormatError(f"{path}:1: bad header ({e})") from None
    xb, xt, ys = [], [], []
    for no, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
            xb.append([float(v) for v in rec["x_B"]])
            xt.append([float(v) for v in rec["x_T"]])
            ys.append(float(rec["y"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}:{no}: bad record ({e})") from None
    if not ys:
        raise DatasetFormatError(f"{path}: no samples")
    if len({len(r) for r in xb}) != 1 or len({len(r) for r in xt}) != 1:
        raise DatasetFormatError(f"{path}: samples do not share input dims")
    ds = OperatorDataset(np.array(xb), np.array(xt), np.array(ys), meta)
    if "d1" in meta and meta["d1"] != ds.d1:
        raise DatasetFormatError(f"{path}: header d1={meta['d1']} but records have {ds.d1}")
    return ds
