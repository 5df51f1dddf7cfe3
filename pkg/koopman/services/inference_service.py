import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Sequence, Tuple

import numpy as np
from django.conf import settings

from koopman.autodiff import Tensor
from koopman.models.results import Forecast, PredictionResult, Reconstruction
from koopman.models.systems import Trajectory
from koopman.services.chunking_service import ChunkingService
from koopman.services.kalman_service import KalmanService
from koopman.services.simulation_service import SimulationService

logger = logging.getLogger(__name__)


class InferenceService:
    """Open-loop prediction, filtered reconstruction and prediction metrics for a frozen model."""

    @staticmethod
    def _decode(model, mean) -> np.ndarray:
        # Detached: inference never needs gradients
        return model.decode_flat(Tensor(mean.data)).data.reshape(-1, model.state_dim)

    @staticmethod
    def encode(model, states):
        """
        Filter raw `states` (normalized with the model's frozen statistics) and
        return the trace. Leading states are dropped so that the last window
        ends at the last state.
        """
        normalized = SimulationService.normalize(states, model.stats)
        trimmed = ChunkingService.trim_head(normalized, model.chunk_spec)
        measurements = ChunkingService.chunk(trimmed, model.chunk_spec)
        return KalmanService.filter(measurements, model)

    @staticmethod
    def predict(model, context, t_out: int) -> PredictionResult:
        """
        Filter the context, then roll the final belief forward `t_out` chunks.

        Args:
            model: Trained KalikoModel
            context: Raw context states, L x n
            t_out: Number of chunks (c raw steps each) to predict

        Returns:
            PredictionResult with t_out * c predicted raw states

        Raises:
            InsufficientData: If the context is shorter than one window
        """
        trace = InferenceService.encode(model, context)
        n = model.state_dim
        if t_out == 0:
            empty = np.empty((0, n))
            return PredictionResult(states=empty, normalized=empty.copy())

        A = model.transition()
        beliefs = KalmanService.rollout(trace.final, A, model.process_noise(), t_out)
        windows = [InferenceService._decode(model, belief.mean) for belief in beliefs]
        assembled = ChunkingService.unchunk(windows, model.chunk_spec, n)
        normalized = assembled[-t_out * model.config.chunk:]
        return PredictionResult(
            states=SimulationService.denormalize(normalized, model.stats),
            normalized=normalized,
            windows=windows,
            beliefs=beliefs,
        )

    @staticmethod
    def reconstruct(model, states) -> Reconstruction:
        """
        Decode every filtered mean mu_{t|t} and reassemble the trajectory.

        The reconstruction covers the trimmed trajectory (leading states that
        do not fill a chunk are dropped from both truth and reconstruction).
        """
        states = np.asarray(getattr(states, 'states', states), dtype=np.float64)
        trace = InferenceService.encode(model, states)
        windows = [InferenceService._decode(model, belief.mean) for belief in trace.filtered]
        normalized = ChunkingService.unchunk(windows, model.chunk_spec, model.state_dim)
        truth = ChunkingService.trim_head(states, model.chunk_spec)
        return Reconstruction(
            truth=truth,
            states=SimulationService.denormalize(normalized, model.stats),
            normalized=normalized,
        )

    @staticmethod
    def eval_metrics(pred, truth) -> Dict[str, float]:
        """
        MSE and MAE over every entry.

        Raises:
            ValueError: If the shapes differ
        """
        pred = np.asarray(pred, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        if pred.shape != truth.shape:
            raise ValueError(f"Prediction shape {pred.shape} does not match truth shape {truth.shape}")
        error = pred - truth
        return {'mse': float(np.mean(error ** 2)), 'mae': float(np.mean(np.abs(error)))}

    @staticmethod
    def summarize(forecasts: Sequence[Forecast], t_in: int, t_out: int, raw_units=False) -> Dict:
        """
        Aggregate metrics over all forecasts (normalized units).

        Metric keys are omitted when nothing was predicted. With `raw_units`
        the same metrics in raw units are added as mse_raw / mae_raw.
        """
        summary = {'T_in': t_in, 'T_out': t_out, 'trajectories': len(forecasts)}
        if t_out == 0 or not forecasts:
            return summary
        summary.update(InferenceService.eval_metrics(
            np.concatenate([f.pred_normalized for f in forecasts]),
            np.concatenate([f.truth_normalized for f in forecasts]),
        ))
        if raw_units:
            raw = InferenceService.eval_metrics(
                np.concatenate([f.pred for f in forecasts]),
                np.concatenate([f.truth for f in forecasts]),
            )
            summary['mse_raw'] = raw['mse']
            summary['mae_raw'] = raw['mae']
        return summary

    @staticmethod
    def forecast(model, trajectory: Trajectory, index: int, t_in: int, t_out: int) -> Forecast:
        """Predict raw steps t_in .. t_in + t_out - 1 of `trajectory` from its first t_in states."""
        states = trajectory.states
        truth = states[t_in:t_in + t_out]
        chunks = -(-t_out // model.config.chunk)
        result = InferenceService.predict(model, states[:t_in], chunks)
        pred = result.states[:t_out]
        return Forecast(
            index=index,
            truth=truth,
            pred=pred,
            truth_normalized=SimulationService.normalize(truth, model.stats),
            pred_normalized=result.normalized[:t_out],
        )

    @staticmethod
    def evaluate(model, trajectories, t_in: int, t_out: int, raw_units=False) -> Tuple[Dict, List[Forecast]]:
        """
        Benchmark protocol: for every trajectory holding t_in + t_out states,
        predict t_out raw steps from the first t_in.

        Returns:
            (summary dict, per-trajectory forecasts)
        """
        jobs = [
            (index, trajectory) for index, trajectory in enumerate(trajectories)
            if len(trajectory) >= t_in + t_out
        ]
        skipped = len(trajectories) - len(jobs)
        if skipped:
            logger.warning(f"Skipped {skipped} trajectories shorter than t_in + t_out = {t_in + t_out}")

        with ThreadPoolExecutor(max_workers=settings.KALIKO_THREADS) as pool:
            forecasts = list(pool.map(
                lambda job: InferenceService.forecast(model, job[1], job[0], t_in, t_out), jobs
            ))
        return InferenceService.summarize(forecasts, t_in, t_out, raw_units), forecasts
