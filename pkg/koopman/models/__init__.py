from .systems import OdeSystem, Trajectory, Dataset, NormStats, RunningStats, SystemName
from .beliefs import GaussianBelief, FilterTrace
from .dynamics import BlockCompanionDynamics
from .decoder import DecoderNet, DecoderVariant
from .kaliko_model import KalikoModel, NoiseParams, LatentPrior, ChunkSpec
from .results import (
    PredictionResult,
    TrainStep,
    TrainReport,
    EigenPair,
    ScalarField,
    CycleTrace,
    LocalDmdModel,
    Reconstruction,
    Forecast,
)

__all__ = [
    'OdeSystem',
    'Trajectory',
    'Dataset',
    'NormStats',
    'RunningStats',
    'SystemName',
    'GaussianBelief',
    'FilterTrace',
    'BlockCompanionDynamics',
    'DecoderNet',
    'DecoderVariant',
    'KalikoModel',
    'NoiseParams',
    'LatentPrior',
    'ChunkSpec',
    'PredictionResult',
    'TrainStep',
    'TrainReport',
    'EigenPair',
    'ScalarField',
    'CycleTrace',
    'LocalDmdModel',
    'Reconstruction',
    'Forecast',
]
