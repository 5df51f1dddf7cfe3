from dataclasses import dataclass, field
from typing import List

import numpy as np

from koopman.autodiff import Tensor


@dataclass
class GaussianBelief:
    """Latent mean (m) and covariance (m x m), kept on the autodiff tape."""

    mean: Tensor
    cov: Tensor

    @property
    def dim(self):
        return self.mean.shape[0]

    def numpy(self):
        return self.mean.data.copy(), self.cov.data.copy()


@dataclass
class FilterTrace:
    """
    Output of one filtering pass over T measurements.

    `predicted[t-1]` is (mu_{t|t-1}, Sigma_{t|t-1}) and `filtered[t-1]` is
    (mu_{t|t}, Sigma_{t|t}) for t = 1..T. `decoded[t-1]` is g(mu_{t|t-1}),
    the pre-measurement reconstruction the filtering loss compares with x_t.
    """

    prior: GaussianBelief
    predicted: List[GaussianBelief] = field(default_factory=list)
    filtered: List[GaussianBelief] = field(default_factory=list)
    decoded: List[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.filtered)

    @property
    def final(self):
        return self.filtered[-1] if self.filtered else self.prior

    def filtered_means(self):
        return np.stack([belief.mean.data for belief in self.filtered])
