import numpy as np

from koopman.autodiff import Parameter, Tensor, ops


class BlockCompanionDynamics:
    """
    Delay-embedded latent dynamics in block-companion form.

    The latent z = (zbar_1, ..., zbar_{n_d}) stacks n_d sub-latents of size
    ell. One step shifts every sub-latent up one slot and writes
    sum_i B_i zbar_i into the last slot. Only the blocks B_i are learnable;
    the shift rows are constants and never receive gradients.
    """

    def __init__(self, delays, latent_dim, blocks=None):
        self.delays = delays
        self.latent_dim = latent_dim
        if blocks is None:
            blocks = np.zeros((delays, latent_dim, latent_dim))
            blocks[-1] = 0.99 * np.eye(latent_dim)
        self.blocks = Parameter('dynamics.blocks', blocks)
        self._shift = self._shift_rows()

    @property
    def size(self):
        return self.delays * self.latent_dim

    def parameters(self):
        return [self.blocks]

    def _shift_rows(self):
        m, ell = self.size, self.latent_dim
        shift = np.zeros((m - ell, m))
        shift[:, ell:] = np.eye(m - ell)
        return Tensor(shift)

    def bottom_row(self):
        """[B_1 ... B_{n_d}] as an ell x m tensor."""
        stacked = ops.transpose(self.blocks, (1, 0, 2))
        return ops.reshape(stacked, (self.latent_dim, self.size))

    def materialize(self):
        """Dense m x m operator A."""
        if self.delays == 1:
            return ops.reshape(self.blocks, (self.latent_dim, self.latent_dim))
        return ops.concat([self._shift, self.bottom_row()], axis=0)

    def matrix(self):
        """Dense operator as a plain array (analysis, no tape)."""
        return self.materialize().data.copy()

    def apply(self, z):
        """Sparse A z: shift the sub-latents and append the companion combination."""
        z = ops.as_tensor(z)
        newest = ops.matmul(self.bottom_row(), z)
        if self.delays == 1:
            return newest
        return ops.concat([z[self.latent_dim:], newest], axis=0)
