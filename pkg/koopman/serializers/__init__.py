from .config_serializer import (
    SystemConfig,
    DatasetConfig,
    ModelConfig,
    TrainConfig,
    InferenceConfig,
    AnalysisConfig,
    RunConfig,
)

__all__ = [
    'SystemConfig',
    'DatasetConfig',
    'ModelConfig',
    'TrainConfig',
    'InferenceConfig',
    'AnalysisConfig',
    'RunConfig',
]
