import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from django.conf import settings
from scipy import linalg

from koopman.exceptions import InsufficientData
from koopman.models.results import Forecast, LocalDmdModel
from koopman.services.inference_service import InferenceService
from koopman.services.simulation_service import SimulationService

logger = logging.getLogger(__name__)

# Tikhonov term used when the Hankel matrix is rank deficient
RIDGE = 1e-8


class DmdService:
    """Local DMD baseline: a delay-embedded linear operator refitted on every context window."""

    @staticmethod
    def hankel(states, delay: int) -> np.ndarray:
        """Columns are delay-stacked states [x_t; ...; x_{t+d-1}], oldest block first."""
        states = np.asarray(states, dtype=np.float64)
        columns = states.shape[0] - delay + 1
        return np.stack([states[t:t + delay].reshape(-1) for t in range(columns)], axis=1)

    @staticmethod
    def fit_local_dmd(context, delay: int) -> LocalDmdModel:
        """
        Least-squares operator mapping each Hankel column to the next.

        Uses the pseudo-inverse when the snapshot matrix has full row rank and
        ridge-regularized normal equations otherwise.

        Raises:
            InsufficientData: If the context has fewer than delay + 2 states
        """
        context = np.asarray(context, dtype=np.float64)
        if delay < 1:
            raise ValueError(f"delay must be positive, got {delay}")
        if context.shape[0] < delay + 2:
            raise InsufficientData(
                f"Local DMD with delay {delay} needs at least {delay + 2} context states, got {context.shape[0]}"
            )
        state_dim = context.shape[1]
        snapshots = DmdService.hankel(context, delay)
        current, following = snapshots[:, :-1], snapshots[:, 1:]

        size = current.shape[0]
        if np.linalg.matrix_rank(current) == size:
            operator = following @ linalg.pinv(current)
        else:
            gram = current @ current.T + RIDGE * np.eye(size)
            operator = linalg.solve(gram, current @ following.T, assume_a='pos').T

        residual = float(np.linalg.norm(following - operator @ current))
        return LocalDmdModel(
            delay=delay,
            operator=operator,
            tail=snapshots[:, -1].copy(),
            state_dim=state_dim,
            residual=residual,
        )

    @staticmethod
    def dmd_predict(model: LocalDmdModel, t_out: int) -> np.ndarray:
        """Iterate the operator from the last context column; each step emits the newest block."""
        n = model.state_dim
        predictions = np.empty((t_out, n))
        column = model.tail
        for step in range(t_out):
            column = model.operator @ column
            predictions[step] = column[-n:]
        return predictions

    @staticmethod
    def forecast(trajectory, index, stats, t_in, t_out, delay) -> Forecast:
        states = trajectory.states
        truth = states[t_in:t_in + t_out]
        pred = DmdService.dmd_predict(DmdService.fit_local_dmd(states[:t_in], delay), t_out)
        return Forecast(
            index=index,
            truth=truth,
            pred=pred,
            truth_normalized=SimulationService.normalize(truth, stats),
            pred_normalized=SimulationService.normalize(pred, stats),
        )

    @staticmethod
    def evaluate(trajectories, stats, t_in: int, t_out: int, delay: int, raw_units=False):
        """
        Same protocol and summary schema as InferenceService.evaluate.

        Raises:
            InsufficientData: If t_in cannot hold delay + 2 states
        """
        if t_in < delay + 2:
            raise InsufficientData(f"Context t_in={t_in} is too short for delay {delay} (needs {delay + 2})")
        jobs = [
            (index, trajectory) for index, trajectory in enumerate(trajectories)
            if len(trajectory) >= t_in + t_out
        ]
        if len(jobs) < len(trajectories):
            logger.warning(
                f"Skipped {len(trajectories) - len(jobs)} trajectories shorter than t_in + t_out = {t_in + t_out}"
            )
        with ThreadPoolExecutor(max_workers=settings.KALIKO_THREADS) as pool:
            forecasts = list(pool.map(
                lambda job: DmdService.forecast(job[1], job[0], stats, t_in, t_out, delay), jobs
            ))
        return InferenceService.summarize(forecasts, t_in, t_out, raw_units), forecasts
