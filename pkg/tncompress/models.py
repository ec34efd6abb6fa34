from enum import Enum
from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Any, Dict, List, Optional


class DType(str, Enum):
    """Floating point precision of tensor storage"""

    F32 = "f32"  # training default
    F64 = "f64"  # verification (finite differences)


class Activation(str, Enum):
    """Activation applied between consecutive TN layers of an ADTN"""

    RELU = "relu"
    IDENTITY = "identity"


class LayerKind(str, Enum):
    LINEAR = "linear"
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    ADAPTIVE_AVGPOOL2D = "adaptive_avgpool2d"
    RELU = "relu"
    FLATTEN = "flatten"


class CompressionOrder(str, Enum):
    BACKWARD = "backward"  # nearest-output layer first
    FORWARD = "forward"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class ModelName(str, Enum):
    FC2 = "fc2"  # 784 -> 256 -> 10
    LENET5_MNIST = "lenet5-mnist"
    LENET5 = "lenet5"  # width-s variant used by the over/under-fitting sweep


class LayerSpec(BaseModel):
    """One entry of a Network's ordered layer list.

    Attributes:
        name: Unique layer id, used as parameter prefix ("fc1" -> "fc1.weight")
        kind: Layer type
        in_features/out_features: linear sizes
        in_channels/out_channels/kernel/stride/padding: conv2d geometry
        pool: window size for maxpool2d, output size for adaptive_avgpool2d
        pool_stride: maxpool2d stride (defaults to pool)
    """

    name: str
    kind: LayerKind
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    padding: int = 0
    pool: Optional[int] = None
    pool_stride: Optional[int] = None

    @property
    def has_weight(self) -> bool:
        return self.kind in (LayerKind.LINEAR, LayerKind.CONV2D)

    def weight_shape(self) -> Optional[tuple]:
        if self.kind == LayerKind.LINEAR:
            return (self.in_features, self.out_features)
        if self.kind == LayerKind.CONV2D:
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return None

    def bias_shape(self) -> Optional[tuple]:
        if self.kind == LayerKind.LINEAR:
            return (self.out_features,)
        if self.kind == LayerKind.CONV2D:
            return (self.out_channels,)
        return None

    @model_validator(mode="after")
    def check_hyper(self) -> "LayerSpec":
        required = {
            LayerKind.LINEAR: ("in_features", "out_features"),
            LayerKind.CONV2D: ("in_channels", "out_channels", "kernel"),
            LayerKind.MAXPOOL2D: ("pool",),
            LayerKind.ADAPTIVE_AVGPOOL2D: ("pool",),
        }.get(self.kind, ())
        missing = [field for field in required if getattr(self, field) is None]
        if missing:
            raise ValueError(f"Layer {self.name} ({self.kind.value}) is missing {missing}")
        return self


class AdtnSpec(BaseModel):
    """Hyper-parameters of one brick-wall ADTN.

    Attributes:
        Q: Number of unshared output indexes (lines)
        d: Dimension of every index
        M: Number of TN layers (two brick columns each)
        activation: Applied to the state between TN layers, never after the last one
        dtype: Storage precision of the tensors
    """

    Q: int = Field(..., ge=2)
    d: int = Field(default=2, ge=2)
    M: int = Field(default=1, ge=1)
    activation: Activation = Activation.RELU
    dtype: DType = DType.F32

    @property
    def encoded_size(self) -> int:
        return self.d**self.Q

    @property
    def num_tensors(self) -> int:
        return self.M * (self.Q - 1)


class ChunkPlan(BaseModel):
    """One ADTN-encoded segment [offset, offset + d^Q) of a flat parameter vector"""

    offset: int = Field(..., ge=0)
    spec: AdtnSpec

    @property
    def size(self) -> int:
        return self.spec.encoded_size


class CompressionPlan(BaseModel):
    """Partition of a layer's flattened weight into ADTN chunks plus residual T^res"""

    layer: Optional[str] = None
    num_params: int = Field(..., ge=1)
    chunks: List[ChunkPlan] = Field(default_factory=list)

    @property
    def compressed_size(self) -> int:
        return sum(chunk.size for chunk in self.chunks)

    @property
    def residual_offset(self) -> int:
        return self.compressed_size

    @property
    def residual_size(self) -> int:
        return self.num_params - self.compressed_size

    @property
    def num_adtn(self) -> int:
        return len(self.chunks)

    @model_validator(mode="after")
    def check_tiling(self) -> "CompressionPlan":
        offset = 0
        for chunk in self.chunks:
            if chunk.offset != offset:
                raise ValueError(f"Chunk at offset {chunk.offset} does not tile (expected {offset})")
            offset += chunk.size
        if offset > self.num_params:
            raise ValueError(f"Chunks cover {offset} entries but the layer has {self.num_params}")
        return self


class EpochMetrics(BaseModel):
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: Optional[float] = None


class PretrainResult(BaseModel):
    """Stage-1 outcome for one chunk"""

    layer: Optional[str] = None
    chunk: int = 0
    steps: int
    initial_loss: float
    final_loss: float  # best-seen L^E
    relative_loss: float  # final_loss / |T|
    converged: bool
    seconds: float
    loss_curve: List[float] = Field(default_factory=list, repr=False)


class LayerReport(BaseModel):
    """Ratios and accuracies for one compressed layer"""

    layer: str
    P: int  # parameters of the compressed slice(s)
    adtn_params: int  # calligraphic P
    rho: float
    N: int
    residual: int
    eta_nn: Optional[float] = None
    eta: Optional[float] = None
    eta_train: Optional[float] = None
    stage1_losses: List[float] = Field(default_factory=list)
    pretrain_seconds: float = 0.0
    finetune_seconds: float = 0.0
    failed: bool = False
    error: Optional[str] = None

    @field_validator("eta_nn", "eta", "eta_train")
    @classmethod
    def check_accuracy(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValueError(f"Accuracy {value} outside [0, 1]")
        return value


class CompressionReport(BaseModel):
    """Per-layer rows plus the whole-network summary of one compression run"""

    order: CompressionOrder
    layers: List[LayerReport] = Field(default_factory=list)
    num_adtn: int = 0
    adtn_params: int = 0
    residual_params: int = 0
    network_params: int = 0
    rho_tot: Optional[float] = None
    rho_tot_approx: Optional[float] = None  # #(T^res)/#(NN)
    eta_nn: Optional[float] = None
    eta: Optional[float] = None
    eta_train: Optional[float] = None
    # eta after each compressed layer, in visiting order
    eta_curve: List[float] = Field(default_factory=list)


class GradcheckEntry(BaseModel):
    name: str
    max_rel_error: float
    checked: int
    skipped: int  # entries sitting on a kink
    passed: bool


class GradcheckReport(BaseModel):
    scope: str
    tol: float
    entries: List[GradcheckEntry] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    @property
    def failures(self) -> List[GradcheckEntry]:
        return [entry for entry in self.entries if not entry.passed]

    def merge(self, other: "GradcheckReport") -> "GradcheckReport":
        return GradcheckReport(scope=self.scope, tol=self.tol, entries=self.entries + other.entries)


class ManifestFile(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    """Everything needed to re-run a CLI command exactly"""

    command: str
    config: Dict
    config_sha256: str
    seeds: Dict[str, int]
    options: Dict[str, Any] = Field(default_factory=dict)  # command-line options outside the run config
    inputs: List[ManifestFile] = Field(default_factory=list)
    outputs: List[ManifestFile] = Field(default_factory=list)
    started_at: str
    finished_at: Optional[str] = None
