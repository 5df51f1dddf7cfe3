import logging
from typing import Callable, List, Tuple

from koopman.autodiff import Tensor, ops
from koopman.exceptions import SingularMatrix
from koopman.models.beliefs import FilterTrace, GaussianBelief

logger = logging.getLogger(__name__)

DecoderFn = Callable[[Tensor], Tuple[Tensor, Tensor]]


class KalmanService:
    """
    Differentiable extended Kalman filter, RTS smoother and open-loop rollout.

    Every quantity stays on the autodiff tape, so a loss built from the
    outputs can be backpropagated into the dynamics, decoder, noise and prior.
    Inverses are never formed: gains are linear solves against SPD matrices.

    `model` arguments are duck-typed: anything exposing transition(),
    process_noise(), measurement_noise(), prior_belief() and
    decode_with_jacobian(z) works (KalikoModel in production).
    """

    @staticmethod
    def predict_update(belief: GaussianBelief, A, Q) -> GaussianBelief:
        """mean' = A mean; cov' = A cov A^T + Q (symmetrized)."""
        A, Q = ops.as_tensor(A), ops.as_tensor(Q)
        mean = ops.matmul(A, belief.mean)
        cov = ops.add(ops.matmul(ops.matmul(A, belief.cov), ops.transpose(A)), Q)
        return GaussianBelief(mean=mean, cov=ops.symmetrize(cov))

    @staticmethod
    def measurement_update(belief: GaussianBelief, decoder_fn: DecoderFn, R, x):
        """
        Condition `belief` on measurement x through the linearized decoder.

        decoder_fn(z) returns the decoded measurement and its Jacobian H at z.
        The gain K = Sigma H^T S^-1 is obtained as K^T = S^-1 (H Sigma), with
        S = H Sigma H^T + R.

        Returns:
            (posterior belief, decoded prior mean g(mu))

        Raises:
            SingularMatrix: If the innovation covariance S is numerically singular
        """
        R, x = ops.as_tensor(R), ops.as_tensor(x)
        decoded, H = decoder_fn(belief.mean)
        h_sigma = ops.matmul(H, belief.cov)
        innovation_cov = ops.add(ops.matmul(h_sigma, ops.transpose(H)), R)
        gain_t = ops.linear_solve(ops.symmetrize(innovation_cov), h_sigma)
        innovation = ops.sub(x, decoded)
        mean = ops.add(belief.mean, ops.matmul(ops.transpose(gain_t), innovation))
        cov = ops.sub(belief.cov, ops.matmul(ops.transpose(gain_t), h_sigma))
        return GaussianBelief(mean=mean, cov=ops.symmetrize(cov)), decoded

    @staticmethod
    def filter(measurements, model) -> FilterTrace:
        """
        Run predict/measurement updates over measurements x_1..x_T from the model prior.

        Raises:
            SingularMatrix: With the failing timestep (1-based) attached
        """
        A = model.transition()
        Q = model.process_noise()
        R = model.measurement_noise()
        trace = FilterTrace(prior=model.prior_belief())

        belief = trace.prior
        for t, x in enumerate(measurements, start=1):
            try:
                predicted = KalmanService.predict_update(belief, A, Q)
                belief, decoded = KalmanService.measurement_update(
                    predicted, model.decode_with_jacobian, R, x
                )
            except SingularMatrix as exc:
                raise SingularMatrix(str(exc), timestep=t) from exc
            trace.predicted.append(predicted)
            trace.filtered.append(belief)
            trace.decoded.append(decoded)
        return trace

    @staticmethod
    def smooth(trace: FilterTrace, A) -> List[GaussianBelief]:
        """
        Rauch-Tung-Striebel backward pass.

        Returns:
            Smoothed beliefs for t = 0..T; index 0 is (mu_{0|T}, Sigma_{0|T}) and
            index T is the final filtered belief

        Raises:
            SingularMatrix: If a predicted covariance is degenerate
        """
        A = ops.as_tensor(A)
        filtered = [trace.prior] + list(trace.filtered)
        T = len(trace)
        smoothed = [None] * (T + 1)
        smoothed[T] = filtered[T]

        for t in range(T - 1, -1, -1):
            current = filtered[t]
            predicted = trace.predicted[t]
            # J^T = Sigma_{t+1|t}^-1 A Sigma_{t|t}
            try:
                gain_t = ops.linear_solve(predicted.cov, ops.matmul(A, current.cov))
            except SingularMatrix as exc:
                raise SingularMatrix(str(exc), timestep=t) from exc
            gain = ops.transpose(gain_t)
            later = smoothed[t + 1]
            mean = ops.add(current.mean, ops.matmul(gain, ops.sub(later.mean, predicted.mean)))
            correction = ops.matmul(ops.matmul(gain, ops.sub(later.cov, predicted.cov)), gain_t)
            cov = ops.symmetrize(ops.add(current.cov, correction))
            smoothed[t] = GaussianBelief(mean=mean, cov=cov)
        return smoothed

    @staticmethod
    def rollout(belief: GaussianBelief, A, Q, steps: int) -> List[GaussianBelief]:
        """Open-loop predictions (mu_bar_k, Sigma_bar_k) for k = 1..steps."""
        beliefs = []
        for _ in range(steps):
            belief = KalmanService.predict_update(belief, A, Q)
            beliefs.append(belief)
        return beliefs
