import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
from django.conf import settings

from koopman.exceptions import DivergenceError, OrbitNotFound
from koopman.models.systems import Dataset, NormStats, OdeSystem, RunningStats, SystemName, Trajectory

logger = logging.getLogger(__name__)

# Any state component beyond this magnitude aborts an integration
DIVERGENCE_BOUND = 1e6

MAX_RESAMPLES = 10

DEFAULT_DT = 0.05

# Axis-aligned sampling boxes for initial conditions, per system
DEFAULT_INIT_BOX = {
    SystemName.VDP: ((-3.0, 3.0), (-3.0, 3.0)),
    SystemName.DUFFING: ((-3.0, 3.0), (-3.0, 3.0)),
    SystemName.PENDULUM: ((-np.pi, np.pi), (-2.0, 2.0)),
}

# Hopf-Bautin initial conditions are drawn in polar form
HOPF_RADIUS_RANGE = (0.1, 1.2)


class SimulationService:
    """
    Ground-truth data from the closed-form planar systems.

    All systems are integrated in Cartesian coordinates with classical RK4.
    """

    @staticmethod
    def vector_field(system: OdeSystem, x) -> np.ndarray:
        """
        Evaluate dx/dt for `system` at state `x`.

        Hopf-Bautin is defined in polar form (r' = r exp((1 - 2r^2)/2)(r^2 - r^4 - 3/16),
        theta' = 1) and converted with the chain rule; the origin maps to zero.
        """
        x1, x2 = float(x[0]), float(x[1])
        name = system.name

        if name == SystemName.VDP:
            return np.array([x1 - x1 ** 3 / 3.0 - x2, x1])
        if name == SystemName.PENDULUM:
            return np.array([x2, np.sin(x1)])
        if name == SystemName.DUFFING:
            return np.array([x2, x1 - system.delta * x2 - x1 ** 3])

        r2 = x1 * x1 + x2 * x2
        if r2 == 0.0:
            return np.zeros(2)
        # r'/r, which stays finite as r -> 0
        radial = np.exp((1.0 - 2.0 * r2) / 2.0) * (r2 - r2 * r2 - 3.0 / 16.0)
        return np.array([radial * x1 - x2, radial * x2 + x1])

    @staticmethod
    def _rk4_step(system, x, dt):
        f = SimulationService.vector_field
        k1 = f(system, x)
        k2 = f(system, x + 0.5 * dt * k1)
        k3 = f(system, x + 0.5 * dt * k2)
        k4 = f(system, x + dt * k3)
        return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    @staticmethod
    def _rollout(system, x0, dt, steps):
        states = np.empty((steps + 1, system.state_dim))
        states[0] = x0
        x = states[0]
        for step in range(1, steps + 1):
            x = SimulationService._rk4_step(system, x, dt)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_BOUND:
                raise DivergenceError(
                    f"{system.name} diverged at step {step} from x0={np.asarray(x0).tolist()} "
                    f"(dt={dt}, |x| > {DIVERGENCE_BOUND:g})"
                )
            states[step] = x
        return states

    @staticmethod
    def integrate_rk4(system: OdeSystem, x0, dt: float, steps: int) -> Trajectory:
        """
        Integrate `steps` RK4 steps from x0.

        Returns:
            Trajectory with steps + 1 states, states[0] = x0

        Raises:
            ValueError: If dt <= 0 or steps < 1
            DivergenceError: If any state component exceeds 1e6 in magnitude
        """
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if steps < 1:
            raise ValueError(f"steps must be at least 1, got {steps}")
        x0 = np.asarray(x0, dtype=np.float64)
        if not np.all(np.isfinite(x0)):
            raise ValueError("Initial state must be finite")
        return Trajectory(states=SimulationService._rollout(system, x0, dt, steps), dt=dt)

    @staticmethod
    def integrate_backward(system: OdeSystem, x_end, dt: float, steps: int) -> Trajectory:
        """Trajectory of steps + 1 states that ends exactly at x_end (integrated in reverse time)."""
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        x_end = np.asarray(x_end, dtype=np.float64)
        states = SimulationService._rollout(system, x_end, -dt, steps)[::-1]
        return Trajectory(states=states.copy(), dt=dt, t0=-steps * dt)

    @staticmethod
    def default_init_box(system: OdeSystem):
        return DEFAULT_INIT_BOX.get(system.name)

    @staticmethod
    def _draw_initial_state(system, rng, init_box):
        if init_box is None and system.name == SystemName.HOPF_BAUTIN:
            radius = rng.uniform(*HOPF_RADIUS_RANGE)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            return np.array([radius * np.cos(angle), radius * np.sin(angle)])
        box = init_box if init_box is not None else DEFAULT_INIT_BOX[system.name]
        return np.array([rng.uniform(low, high) for low, high in box])

    @staticmethod
    def _sample_trajectory(system, seed_seq, dt, steps, init_box, index):
        rng = np.random.default_rng(seed_seq)
        for attempt in range(MAX_RESAMPLES + 1):
            x0 = SimulationService._draw_initial_state(system, rng, init_box)
            try:
                return SimulationService.integrate_rk4(system, x0, dt, steps)
            except DivergenceError as exc:
                logger.warning(f"Trajectory {index}: resampling after divergence ({exc})")
        raise DivergenceError(
            f"Trajectory {index} of {system.name} diverged on all {MAX_RESAMPLES + 1} initial conditions"
        )

    @staticmethod
    def sample_dataset(system: OdeSystem, n_traj: int, steps: int, dt: float = DEFAULT_DT,
                       seed: int = 0, init_box: Optional[Sequence[Sequence[float]]] = None) -> Dataset:
        """
        Generate `n_traj` trajectories from uniform random initial conditions.

        Each trajectory draws from its own child of SeedSequence(seed), so the
        result does not depend on thread scheduling. Normalization statistics
        are a running mean/std over every emitted state, in trajectory order.

        Raises:
            DivergenceError: If a trajectory diverges on every resample
        """
        children = np.random.SeedSequence(seed).spawn(n_traj)
        with ThreadPoolExecutor(max_workers=settings.KALIKO_THREADS) as pool:
            trajectories = list(pool.map(
                lambda job: SimulationService._sample_trajectory(system, job[1], dt, steps, init_box, job[0]),
                enumerate(children),
            ))

        running = RunningStats(system.state_dim)
        for trajectory in trajectories:
            running.update(trajectory.states)
        stats = running.freeze()

        logger.info(f"Sampled {n_traj} {system.name} trajectories of {steps + 1} states (dt={dt}, seed={seed})")
        return Dataset(
            trajectories=tuple(trajectories),
            stats=stats,
            system=system,
            seed=seed,
            metadata={'steps': steps, 'init_box': None if init_box is None else [list(b) for b in init_box]},
        )

    @staticmethod
    def normalize(x, stats: NormStats) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std

    @staticmethod
    def denormalize(x_hat, stats: NormStats) -> np.ndarray:
        return np.asarray(x_hat, dtype=np.float64) * stats.std + stats.mean

    @staticmethod
    def duffing_energy(x) -> np.ndarray:
        """Hamiltonian of the undamped Duffing oscillator, x2^2/2 - x1^2/2 + x1^4/4."""
        x = np.asarray(x, dtype=np.float64)
        x1, x2 = x[..., 0], x[..., 1]
        return 0.5 * x2 ** 2 - 0.5 * x1 ** 2 + 0.25 * x1 ** 4

    @staticmethod
    def periodic_orbit(system: OdeSystem, x0, dt: float = DEFAULT_DT, transient: int = 0,
                       max_steps: int = 20000) -> Trajectory:
        """
        One period of the orbit through (or attracting) x0.

        Integrates past `transient` steps, then returns the states from one
        upward crossing of x2 = 0 up to (excluding) the next one.

        Raises:
            OrbitNotFound: If two upward crossings do not occur within max_steps
        """
        states = SimulationService.integrate_rk4(system, x0, dt, transient + max_steps).states[transient:]
        x2 = states[:, 1]
        crossings = np.flatnonzero((x2[:-1] < 0.0) & (x2[1:] >= 0.0)) + 1
        if crossings.size < 2:
            raise OrbitNotFound(
                f"No closed orbit of {system.name} found from {np.asarray(x0).tolist()} within {max_steps} steps"
            )
        start, stop = crossings[0], crossings[1]
        return Trajectory(states=states[start:stop].copy(), dt=dt, t0=(transient + start) * dt)
