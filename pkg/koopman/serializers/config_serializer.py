import json
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from koopman.models.decoder import DecoderVariant
from koopman.models.systems import SystemName


class ConfigSection(BaseModel):
    """Base for every configuration section: unknown keys are rejected."""

    model_config = ConfigDict(extra='forbid')


def _validate_box(value):
    if value is None:
        return value
    if len(value) != 2 or any(len(pair) != 2 for pair in value):
        raise ValueError("Box must be [[x1_min, x1_max], [x2_min, x2_max]]")
    for low, high in value:
        if low > high:
            raise ValueError(f"Box lower bound {low} exceeds upper bound {high}")
    return value


class SystemConfig(ConfigSection):
    name: str = SystemName.VDP
    delta: float = 0.0

    @field_validator('name')
    @classmethod
    def validate_name(cls, value):
        """Ensure the system is one of the supported planar systems"""
        if value not in SystemName.choices:
            raise ValueError(f"Unknown system '{value}'. Supported: {', '.join(SystemName.choices)}")
        return value


class DatasetConfig(ConfigSection):
    n_traj: int = Field(64, ge=1)
    steps: int = Field(512, ge=1)
    dt: float = Field(0.05, gt=0)
    seed: int = 0
    # None selects the per-system default sampling region
    init_box: Optional[List[List[float]]] = None

    @field_validator('init_box')
    @classmethod
    def validate_init_box(cls, value):
        return _validate_box(value)


class ModelConfig(ConfigSection):
    delays: int = Field(4, ge=1)
    latent_dim: int = Field(16, ge=1)
    chunk: int = Field(4, ge=1)
    hidden: int = Field(64, ge=1)
    decoder_variant: str = DecoderVariant.CONV
    fixed_prior: bool = False
    seed: int = 0

    @field_validator('decoder_variant')
    @classmethod
    def validate_decoder_variant(cls, value):
        if value not in DecoderVariant.choices:
            raise ValueError(
                f"Unknown decoder variant '{value}'. Supported: {', '.join(DecoderVariant.choices)}"
            )
        return value


class TrainConfig(ConfigSection):
    """Optimizer and loss settings. `window` is the training length in chunked measurements."""

    alpha_f: float = Field(1.0, ge=0)
    alpha_p: float = Field(1.0, ge=0)
    window: int = Field(32, ge=2)
    batch_size: int = Field(4, ge=1)
    steps: int = Field(2000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    grad_clip_norm: Optional[float] = Field(10.0, gt=0)
    val_fraction: float = Field(0.125, ge=0, lt=1)

    @field_validator('betas')
    @classmethod
    def validate_betas(cls, value):
        """Ensure both Adam decay rates lie in [0, 1)"""
        if not all(0.0 <= beta < 1.0 for beta in value):
            raise ValueError("Adam betas must lie in [0, 1)")
        return value


class InferenceConfig(ConfigSection):
    t_in: int = Field(128, ge=1)
    t_out: int = Field(64, ge=0)
    raw_units: bool = False


class AnalysisConfig(ConfigSection):
    grid: int = Field(100, ge=1)
    bounds: Optional[List[List[float]]] = None
    # Raw steps simulated before each encoded state; None means two windows
    warmup: Optional[int] = Field(None, ge=1)
    eig_index: int = Field(0, ge=0)
    svg: bool = False
    color_range: Optional[Tuple[float, float]] = None

    @field_validator('bounds')
    @classmethod
    def validate_bounds(cls, value):
        return _validate_box(value)

    @field_validator('color_range')
    @classmethod
    def validate_color_range(cls, value):
        if value is not None and value[0] >= value[1]:
            raise ValueError("color_range must be increasing")
        return value


class RunConfig(ConfigSection):
    """Everything a command needs, resolved and written next to its outputs."""

    system: SystemConfig = Field(default_factory=SystemConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    out_dir: Optional[str] = None

    @classmethod
    def from_file(cls, path):
        with open(path, 'r', encoding='utf-8') as handle:
            payload = json.load(handle)
        return cls.model_validate(payload)

    def write(self, directory):
        path = Path(directory) / 'run_config.json'
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding='utf-8')
        return path
