"""Environment settings and the validated run configuration.

A run is described by one TOML file; ``--set a.b=value`` flags override its keys
before validation. Unknown keys are rejected.
"""

import toml
from pathlib import Path
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Any, Dict, List, Optional, Sequence

from tncompress.errors import ConfigError
from tncompress.models import Activation, CompressionOrder, DType, ModelName, OptimizerKind


class Settings(BaseSettings):
    data_dir: str = "data/mnist"
    output_dir: str = "runs"
    log_level: str = "INFO"
    dtype: DType = DType.F32
    progress: bool = False  # tqdm bars for training loops

    model_config = SettingsConfigDict(env_prefix="TNCOMPRESS_", env_file=".env", extra="ignore")


settings = Settings()


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(StrictModel):
    name: ModelName = ModelName.FC2
    width: Optional[int] = Field(default=None, ge=1)  # s of the lenet5 sweep model


class DataConfig(StrictModel):
    dataset: str = Field(default="mnist", pattern="^(mnist|cifar10)$")
    data_dir: Optional[str] = None  # defaults to settings.data_dir
    train_size: Optional[int] = Field(default=None, ge=1)  # subset of the training split
    test_size: Optional[int] = Field(default=None, ge=1)


class TrainConfig(StrictModel):
    epochs: int = Field(default=5, ge=0)
    batch_size: int = Field(default=64, ge=1)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    lr: float = Field(default=1e-3, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    progress: Optional[bool] = None  # defaults to settings.progress


class PretrainConfig(StrictModel):
    """Stage 1: fit each ADTN chunk to its weight slice under L^E"""

    lr: float = Field(default=1e-3, gt=0)
    max_steps: int = Field(default=5000, ge=0)
    window: int = Field(default=50, ge=1)
    min_rel_improvement: float = 1e-4
    squared: bool = False  # optimise |T' - T|^2 instead of |T' - T|


class FinetuneConfig(StrictModel):
    """Stage 2: end-to-end task-loss optimisation"""

    epochs: int = Field(default=1, ge=0)
    lr: float = Field(default=1e-4, ge=0)
    batch_size: int = Field(default=64, ge=1)
    freeze_residual: bool = False  # freeze T^res and never-compressed layers


class CompressionConfig(StrictModel):
    layers: List[str] = Field(default_factory=list)
    M: int = Field(default=1, ge=1)
    d: int = Field(default=2, ge=2)
    activation: Activation = Activation.RELU
    min_chunk: int = Field(default=256, ge=1)
    order: CompressionOrder = CompressionOrder.BACKWARD
    num_adtn: Optional[int] = Field(default=None, ge=1)  # N override: equal chunks per layer
    max_chunks: Optional[int] = Field(default=None, ge=1)  # keep the largest k greedy chunks
    init_noise: float = Field(default=0.01, ge=0)
    pretrain_workers: int = Field(default=1, ge=1)
    continue_on_error: bool = True
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)


class ExperimentConfig(StrictModel):
    widths: List[int] = Field(default_factory=lambda: [32, 128, 512])
    num_adtn: List[int] = Field(default_factory=lambda: [1, 2])
    train_sizes: List[int] = Field(default_factory=lambda: [1000, 5000, 25000])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    depths: List[int] = Field(default_factory=lambda: [1, 2, 3])


class RunConfig(StrictModel):
    seed: int = 0
    dtype: Optional[DType] = None  # defaults to settings.dtype
    output_dir: Optional[str] = None  # defaults to settings.output_dir
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    compression: CompressionConfig = Field(default_factory=CompressionConfig)
    experiments: ExperimentConfig = Field(default_factory=ExperimentConfig)

    @property
    def resolved_dtype(self) -> DType:
        return self.dtype or settings.dtype

    @property
    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or settings.output_dir)

    @property
    def resolved_data_dir(self) -> Path:
        return Path(self.data.data_dir or settings.data_dir)


def parse_override_value(raw: str) -> Any:
    """Parse a flag value with TOML literal rules, falling back to a bare string"""
    try:
        return toml.loads(f"value = {raw}")["value"]
    except toml.TomlDecodeError:
        return raw


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"Override must look like key.sub=value, got {override!r}")
        key, value = override.split("=", 1)
        target = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = target.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Cannot override {key}: {part} is not a table")
            target = node
        target[parts[-1]] = parse_override_value(value.strip())
    return raw


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read, override and validate a run config. Raises ConfigError on any problem."""
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = toml.load(Path(path))
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except toml.TomlDecodeError as e:
            raise ConfigError(f"Invalid TOML in {path}: {e}") from e
    raw = apply_overrides(raw, overrides)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
