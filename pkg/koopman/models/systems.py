from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


# Floor applied to per-axis standard deviations so normalization stays invertible
STD_FLOOR = 1e-6


class SystemName:
    """Closed-form planar systems available for data generation."""

    VDP = 'vdp'
    PENDULUM = 'pendulum'
    DUFFING = 'duffing'
    HOPF_BAUTIN = 'hopf_bautin'

    choices = (VDP, PENDULUM, DUFFING, HOPF_BAUTIN)


@dataclass(frozen=True)
class OdeSystem:
    """
    A continuous-time planar system x' = F(x).

    `delta` is the Duffing damping and is ignored by the other systems.
    """

    name: str
    delta: float = 0.0
    state_dim: int = 2

    def __post_init__(self):
        if self.name not in SystemName.choices:
            raise ValueError(
                f"Unknown system '{self.name}'. Supported: {', '.join(SystemName.choices)}"
            )


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered states (T x n) sampled every `dt` seconds from `t0`."""

    states: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2:
            raise ValueError(f"Trajectory states must be T x n, got shape {states.shape}")
        if states.shape[0] < 2:
            raise ValueError("Trajectory needs at least two states")
        if not np.all(np.isfinite(states)):
            raise ValueError("Trajectory contains non-finite states")
        states.setflags(write=False)
        object.__setattr__(self, 'states', states)

    def __len__(self):
        return self.states.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self))


@dataclass(frozen=True)
class NormStats:
    """Per-axis affine normalization, frozen once computed."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        std = np.maximum(np.array(self.std, dtype=np.float64), STD_FLOOR)
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'std', std)

    @classmethod
    def identity(cls, n):
        return cls(mean=np.zeros(n), std=np.ones(n))

    def to_dict(self):
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}

    @classmethod
    def from_dict(cls, payload):
        return cls(mean=np.array(payload['mean']), std=np.array(payload['std']))


class RunningStats:
    """Welford accumulator for the running per-axis mean and standard deviation."""

    def __init__(self, n):
        self.count = 0
        self.mean = np.zeros(n)
        self._m2 = np.zeros(n)

    def update(self, batch):
        for x in np.atleast_2d(batch):
            self.count += 1
            delta = x - self.mean
            self.mean = self.mean + delta / self.count
            self._m2 = self._m2 + delta * (x - self.mean)

    @property
    def std(self):
        if self.count == 0:
            return np.zeros_like(self.mean)
        return np.sqrt(self._m2 / self.count)

    def freeze(self):
        return NormStats(mean=self.mean.copy(), std=self.std)


@dataclass(frozen=True)
class Dataset:
    """Trajectories sharing n and dt, plus the normalization they were generated with."""

    trajectories: Tuple[Trajectory, ...]
    stats: NormStats
    system: Optional[OdeSystem] = None
    seed: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        trajectories = tuple(self.trajectories)
        if trajectories:
            dims = {traj.state_dim for traj in trajectories}
            dts = {traj.dt for traj in trajectories}
            if len(dims) != 1 or len(dts) != 1:
                raise ValueError("All trajectories in a dataset must share state dimension and dt")
        object.__setattr__(self, 'trajectories', trajectories)

    def __len__(self):
        return len(self.trajectories)

    @property
    def norm_mean(self):
        return self.stats.mean

    @property
    def norm_std(self):
        return self.stats.std

    @property
    def dt(self):
        return self.trajectories[0].dt if self.trajectories else None

    @property
    def state_dim(self):
        return self.trajectories[0].state_dim if self.trajectories else None
