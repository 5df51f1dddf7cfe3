from dataclasses import dataclass

import numpy as np

from koopman.autodiff import Parameter, Tensor, ops
from koopman.models.beliefs import GaussianBelief
from koopman.models.decoder import DecoderNet
from koopman.models.dynamics import BlockCompanionDynamics
from koopman.models.systems import NormStats

# Added to the diagonal noise covariances so they stay SPD for any parameter value
COVARIANCE_FLOOR = 1e-8

INITIAL_LOG_VARIANCE = np.log(1e-2)


@dataclass(frozen=True)
class ChunkSpec:
    """c raw steps per sub-latent, n_d sub-latents per measurement window."""

    chunk: int
    delays: int

    def __post_init__(self):
        if self.chunk < 1 or self.delays < 1:
            raise ValueError(f"Chunk size and delay count must be positive, got {self}")

    @property
    def window(self):
        return self.chunk * self.delays


class NoiseParams:
    """Diagonal process (Q) and measurement (R) covariances in log-variance form."""

    def __init__(self, latent_size, measurement_size):
        self.log_q = Parameter('noise.log_q', np.full(latent_size, INITIAL_LOG_VARIANCE))
        self.log_r = Parameter('noise.log_r', np.full(measurement_size, INITIAL_LOG_VARIANCE))

    def parameters(self):
        return [self.log_q, self.log_r]

    @staticmethod
    def _covariance(log_var):
        floor = Tensor(COVARIANCE_FLOOR * np.eye(log_var.shape[0]))
        return ops.add(ops.diag(ops.exp(log_var)), floor)

    def process_noise(self):
        return self._covariance(self.log_q)

    def measurement_noise(self):
        return self._covariance(self.log_r)


class LatentPrior:
    """Belief over z_0: learnable mean and diagonal log-variance."""

    def __init__(self, latent_size, fixed=False):
        self.fixed = fixed
        log_s0 = np.zeros(latent_size) if fixed else np.full(latent_size, INITIAL_LOG_VARIANCE)
        self.mu0 = Parameter('prior.mu0', np.zeros(latent_size))
        self.log_s0 = Parameter('prior.log_s0', log_s0)

    def parameters(self):
        return [] if self.fixed else [self.mu0, self.log_s0]

    def belief(self):
        return GaussianBelief(mean=self.mu0, cov=ops.diag(ops.exp(self.log_s0)))


class KalikoModel:
    """
    Everything learnable: latent dynamics, decoder, noise covariances, prior.

    Also carries the frozen normalization statistics of the data it was
    trained on and free-form metadata (system, dt) for analysis.
    """

    def __init__(self, config, state_dim, stats=None, metadata=None):
        self.config = config
        self.state_dim = state_dim
        self.stats = stats if stats is not None else NormStats.identity(state_dim)
        self.metadata = dict(metadata or {})
        self.step = 0
        # Adam moments restored from a checkpoint, consumed when training resumes
        self.optimizer_state = None

        rng = np.random.default_rng(config.seed)
        self.chunk_spec = ChunkSpec(chunk=config.chunk, delays=config.delays)
        self.dynamics = BlockCompanionDynamics(config.delays, config.latent_dim)
        self.decoder = DecoderNet(
            delays=config.delays,
            latent_dim=config.latent_dim,
            chunk=config.chunk,
            state_dim=state_dim,
            hidden=config.hidden,
            variant=config.decoder_variant,
            rng=rng,
        )
        self.noise = NoiseParams(self.latent_size, self.measurement_size)
        self.prior = LatentPrior(self.latent_size, fixed=config.fixed_prior)

    @property
    def latent_size(self):
        return self.config.delays * self.config.latent_dim

    @property
    def measurement_size(self):
        return self.config.delays * self.config.chunk * self.state_dim

    def parameters(self):
        """Trainable parameters (the prior is excluded when fixed)."""
        return (
            self.dynamics.parameters()
            + self.decoder.parameters()
            + self.noise.parameters()
            + self.prior.parameters()
        )

    def named_tensors(self):
        """Every stored tensor, trainable or not, keyed by name."""
        params = (
            self.dynamics.parameters()
            + self.decoder.parameters()
            + self.noise.parameters()
            + [self.prior.mu0, self.prior.log_s0]
        )
        return {param.name: param for param in params}

    def zero_grad(self):
        for param in self.named_tensors().values():
            param.zero_grad()

    def transition(self):
        return self.dynamics.materialize()

    def process_noise(self):
        return self.noise.process_noise()

    def measurement_noise(self):
        return self.noise.measurement_noise()

    def prior_belief(self):
        return self.prior.belief()

    def decode_with_jacobian(self, z):
        return self.decoder.decode_with_jacobian(z)

    def decode_flat(self, z):
        return self.decoder.decode_flat(z)
