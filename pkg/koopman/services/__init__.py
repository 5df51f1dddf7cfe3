from .simulation_service import SimulationService
from .dataset_service import DatasetService
from .chunking_service import ChunkingService
from .checkpoint_service import CheckpointService
from .kalman_service import KalmanService
from .inference_service import InferenceService
from .training_service import TrainingService, AdamOptimizer
from .analysis_service import AnalysisService
from .dmd_service import DmdService
from .export_service import ExportService

__all__ = [
    'SimulationService',
    'DatasetService',
    'ChunkingService',
    'CheckpointService',
    'KalmanService',
    'InferenceService',
    'TrainingService',
    'AdamOptimizer',
    'AnalysisService',
    'DmdService',
    'ExportService',
]
