from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from koopman.models.beliefs import GaussianBelief


@dataclass
class PredictionResult:
    """
    Open-loop prediction from a context window.

    `normalized` holds the T_out * c predicted raw states in normalized
    coordinates and `states` the same rows in raw units. `windows[k]` is the
    decoded window g(mu_bar) of rollout step k and `beliefs[k]` its latent
    belief.
    """

    states: np.ndarray
    normalized: np.ndarray
    windows: List[np.ndarray] = field(default_factory=list)
    beliefs: List[GaussianBelief] = field(default_factory=list)

    def __len__(self):
        return self.states.shape[0]


@dataclass
class TrainStep:
    step: int
    loss_filter: float
    loss_pred: float
    grad_norm: float
    wall_ms: float


@dataclass
class TrainReport:
    """Per-step training log plus held-out metrics computed at the end of the run."""

    steps: List[TrainStep] = field(default_factory=list)
    final_metrics: Dict[str, float] = field(default_factory=dict)

    COLUMNS = ('step', 'loss_filter', 'loss_pred', 'grad_norm', 'wall_ms')

    def __len__(self):
        return len(self.steps)

    def append(self, row: TrainStep):
        self.steps.append(row)

    def to_frame(self):
        rows = [[getattr(row, column) for column in self.COLUMNS] for row in self.steps]
        frame = pd.DataFrame(rows, columns=list(self.COLUMNS))
        return frame.astype({'step': 'int64'})


@dataclass
class EigenPair:
    """
    Eigenvalue with right (v) and left (w) eigenvectors of the latent operator.

    w is scaled so that w^H v = 1 unless the pair is defective.
    """

    value: complex
    right: np.ndarray
    left: np.ndarray
    defective: bool = False

    @property
    def modulus(self):
        return abs(self.value)

    def scaled(self, factor):
        """Same pair with the left vector multiplied by `factor`."""
        return EigenPair(self.value, self.right, self.left * factor, self.defective)


@dataclass
class ScalarField:
    """Values sampled on a rectangular grid; NaN marks points that could not be evaluated."""

    axes: List[np.ndarray]
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def points(self):
        """Grid points in row-major order (x1 varies slowest)."""
        mesh = np.meshgrid(*self.axes, indexing='ij')
        return np.stack([axis.ravel() for axis in mesh], axis=1)

    @property
    def missing(self):
        return int(np.count_nonzero(np.isnan(self.values)))


@dataclass
class CycleTrace:
    values: np.ndarray
    winding: int

    @property
    def modulus_cv(self):
        modulus = np.abs(self.values)
        return float(np.std(modulus) / np.mean(modulus))


@dataclass
class LocalDmdModel:
    """Delay-embedded least-squares operator fitted on a single context window."""

    delay: int
    operator: np.ndarray
    tail: np.ndarray
    state_dim: int
    residual: Optional[float] = None


@dataclass
class Reconstruction:
    """Decoded filtered means over a whole trajectory next to the states they reconstruct."""

    truth: np.ndarray
    states: np.ndarray
    normalized: np.ndarray


@dataclass
class Forecast:
    """Prediction for one evaluation trajectory; raw and normalized views of the same rows."""

    index: int
    truth: np.ndarray
    pred: np.ndarray
    truth_normalized: np.ndarray
    pred_normalized: np.ndarray
