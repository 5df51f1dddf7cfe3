import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from django.conf import settings
from tqdm import tqdm

from koopman.autodiff import Tensor, backward, ops
from koopman.exceptions import InsufficientData, KalikoError, NonFiniteGradient, SingularMatrix, TrainingDiverged
from koopman.models.results import TrainReport, TrainStep
from koopman.services.chunking_service import ChunkingService
from koopman.services.checkpoint_service import CheckpointService
from koopman.services.dataset_service import DatasetService
from koopman.services.inference_service import InferenceService
from koopman.services.kalman_service import KalmanService
from koopman.services.simulation_service import SimulationService

logger = logging.getLogger(__name__)


@dataclass
class LossTerms:
    """Replay-overshoot loss on the tape plus its two (weighted) terms as floats."""

    total: Tensor
    filter_term: float
    pred_term: float


class AdamOptimizer:
    """Adam with optional global gradient-norm clipping, keyed by parameter name."""

    def __init__(self, parameters, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=10.0):
        self.parameters = list(parameters)
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.first_moments = {p.name: np.zeros_like(p.data) for p in self.parameters}
        self.second_moments = {p.name: np.zeros_like(p.data) for p in self.parameters}

    def load_state(self, state):
        """Restore moments saved in a checkpoint; moments for unknown parameters are ignored."""
        self.t = state['t']
        for name in self.first_moments:
            if name in state['m']:
                self.first_moments[name] = np.array(state['m'][name])
                self.second_moments[name] = np.array(state['v'][name])

    def zero_grad(self):
        for param in self.parameters:
            param.zero_grad()

    def grad_norm(self):
        return float(np.sqrt(sum(np.sum(p.grad ** 2) for p in self.parameters)))

    def step(self):
        """Apply one update from the accumulated gradients; returns the pre-clip gradient norm."""
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm

        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for param in self.parameters:
            grad = param.grad * factor
            m = self.beta1 * self.first_moments[param.name] + (1.0 - self.beta1) * grad
            v = self.beta2 * self.second_moments[param.name] + (1.0 - self.beta2) * grad * grad
            self.first_moments[param.name] = m
            self.second_moments[param.name] = v
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.data = param.data - update
        return norm


class TrainingService:

    @staticmethod
    def replay_overshoot_loss(model, measurements, alpha_f=1.0, alpha_p=1.0) -> LossTerms:
        """
        Replay-overshoot loss over one window of T chunked measurements.

        Filters x_1..x_T, smooths back to (mu_{0|T}, Sigma_{0|T}), rolls that
        belief forward T steps and decodes both the pre-measurement filter
        means and the open-loop means:

            loss = sum_t alpha_f ||g(mu_{t|t-1}) - x_t||^2 + alpha_p ||g(mu_bar_t) - x_t||^2

        Args:
            model: KalikoModel (or any object the KalmanService accepts that also has decode_flat)
            measurements: T x p normalized measurements
        """
        measurements = np.asarray(measurements, dtype=np.float64)
        p = measurements.shape[1]

        trace = KalmanService.filter(measurements, model)
        A = model.transition()
        smoothed = KalmanService.smooth(trace, A)
        rollout = KalmanService.rollout(smoothed[0], A, model.process_noise(), len(measurements))

        filter_terms = []
        pred_terms = []
        for decoded, belief, x in zip(trace.decoded, rollout, measurements):
            filter_terms.append(ops.scale(ops.mse(decoded, x), alpha_f * p))
            pred_terms.append(ops.scale(ops.mse(model.decode_flat(belief.mean), x), alpha_p * p))

        filter_loss = filter_terms[0]
        for term in filter_terms[1:]:
            filter_loss = ops.add(filter_loss, term)
        pred_loss = pred_terms[0]
        for term in pred_terms[1:]:
            pred_loss = ops.add(pred_loss, term)

        return LossTerms(
            total=ops.add(filter_loss, pred_loss),
            filter_term=filter_loss.item(),
            pred_term=pred_loss.item(),
        )

    @staticmethod
    def measurement_sequences(model, trajectories, window: Optional[int] = None) -> List[np.ndarray]:
        """Normalized, chunked measurement sequences; trajectories too short for `window` are skipped."""
        sequences = []
        for index, trajectory in enumerate(trajectories):
            normalized = SimulationService.normalize(trajectory.states, model.stats)
            try:
                sequence = ChunkingService.chunk(normalized, model.chunk_spec)
            except InsufficientData:
                logger.warning(f"Skipping trajectory {index}: shorter than one measurement window")
                continue
            if window is not None and len(sequence) < window:
                logger.warning(
                    f"Skipping trajectory {index}: {len(sequence)} measurements < training window {window}"
                )
                continue
            sequences.append(sequence)
        return sequences

    @staticmethod
    def _sample_batch(rng, sequences, window, batch_size):
        batch = []
        for _ in range(batch_size):
            sequence = sequences[rng.integers(len(sequences))]
            offset = rng.integers(len(sequence) - window + 1)
            batch.append(sequence[offset:offset + window])
        return batch

    @staticmethod
    def train(model, dataset, config, checkpoint_path=None, progress=False):
        """
        Train `model` on `dataset` with Adam and replay-overshoot loss.

        Windows of `config.window` measurements are drawn with replacement,
        uniformly over trajectories and then over start offsets. The last
        `val_fraction` of the trajectories is held out for final metrics.
        A model carrying optimizer state (from a checkpoint) resumes with it.

        Returns:
            (model, TrainReport)

        Raises:
            InsufficientData: If no training trajectory holds one window
            TrainingDiverged: On a non-finite loss or gradient, after saving
                the last good parameters to `checkpoint_path` (when given)
        """
        if len(dataset) == 0:
            raise InsufficientData("Training dataset is empty")
        train_set, val_set = DatasetService.split(dataset, config.val_fraction)
        sequences = TrainingService.measurement_sequences(model, train_set.trajectories, config.window)
        if not sequences:
            raise InsufficientData(
                f"No training trajectory holds a window of {config.window} measurements"
            )

        optimizer = AdamOptimizer(
            model.parameters(),
            learning_rate=config.learning_rate,
            betas=config.betas,
            eps=config.eps,
            clip_norm=config.grad_clip_norm,
        )
        if model.optimizer_state is not None:
            optimizer.load_state(model.optimizer_state)

        rng = np.random.default_rng([config.seed, model.step])
        report = TrainReport()
        logger.info(
            f"Training from step {model.step} for {config.steps} steps on "
            f"{len(sequences)} trajectories (window {config.window}, batch {config.batch_size})"
        )

        def window_loss(window):
            return TrainingService.replay_overshoot_loss(model, window, config.alpha_f, config.alpha_p)

        with ThreadPoolExecutor(max_workers=settings.KALIKO_THREADS) as pool:
            for _ in tqdm(range(config.steps), desc='train', disable=not progress):
                started = time.perf_counter()
                batch = TrainingService._sample_batch(rng, sequences, config.window, config.batch_size)
                optimizer.zero_grad()
                try:
                    losses = list(pool.map(window_loss, batch))
                    for terms in losses:
                        if not np.isfinite(terms.total.item()):
                            raise TrainingDiverged(model.step + 1, reason='non-finite loss')
                    # Gradient accumulation stays serial so the sum is order-stable
                    for terms in losses:
                        backward(ops.scale(terms.total, 1.0 / len(batch)))
                except (NonFiniteGradient, SingularMatrix, TrainingDiverged) as exc:
                    saved = None
                    if checkpoint_path is not None:
                        saved = CheckpointService.save(model, checkpoint_path, optimizer)
                    logger.error(f"Training diverged at step {model.step + 1}: {exc}")
                    raise TrainingDiverged(model.step + 1, checkpoint_path=saved, reason=str(exc)) from exc

                grad_norm = optimizer.step()
                model.step += 1
                report.append(TrainStep(
                    step=model.step,
                    loss_filter=float(np.mean([terms.filter_term for terms in losses])),
                    loss_pred=float(np.mean([terms.pred_term for terms in losses])),
                    grad_norm=grad_norm,
                    wall_ms=1000.0 * (time.perf_counter() - started),
                ))
                logger.debug(f"step {model.step}: {report.steps[-1]}")

        model.optimizer_state = {
            't': optimizer.t,
            'm': dict(optimizer.first_moments),
            'v': dict(optimizer.second_moments),
        }
        evaluation_set = val_set if len(val_set) else train_set
        report.final_metrics = TrainingService.final_metrics(model, evaluation_set.trajectories)
        logger.info(f"Training finished at step {model.step}: {report.final_metrics}")
        return model, report

    @staticmethod
    def final_metrics(model, trajectories, t_in=128, t_out=64):
        """
        Held-out metrics: filtered-reconstruction MAE over whole trajectories
        and open-loop prediction MAE (t_in context, t_out predicted raw steps)
        on the trajectories long enough for it. Both in normalized units.
        """
        metrics = {'trajectories': len(trajectories)}
        try:
            reconstructions = [
                InferenceService.reconstruct(model, trajectory.states) for trajectory in trajectories
            ]
        except KalikoError as exc:
            logger.warning(f"Could not compute reconstruction metrics: {exc}")
            reconstructions = []
        if reconstructions:
            errors = np.concatenate([
                np.abs(recon.normalized - SimulationService.normalize(recon.truth, model.stats)).ravel()
                for recon in reconstructions
            ])
            metrics['recon_mae'] = float(np.mean(errors))

        long_enough = [traj for traj in trajectories if len(traj) >= t_in + t_out]
        if long_enough and t_out > 0:
            try:
                summary, _ = InferenceService.evaluate(model, long_enough, t_in, t_out)
                metrics['pred_mae'] = summary['mae']
                metrics['pred_mse'] = summary['mse']
            except KalikoError as exc:
                logger.warning(f"Could not compute prediction metrics: {exc}")
        return metrics
