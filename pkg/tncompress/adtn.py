"""Brick-wall automatically differentiable tensor networks (ADTN).

Lines 0..Q-1 run top to bottom. Every line starts from the constant boundary
vector v. One TN layer is two brick columns: column A couples line pairs
(0,1), (2,3), ...; column B couples (1,2), (3,4), ... Together they hold Q-1
order-4 tensors A[a, b, c, d] with (a, b) the incoming and (c, d) the outgoing
indexes of the two lines. Lines a column does not cover pass through.

The encoded tensor is obtained by sweeping the order-Q state through the layers
left to right, one brick at a time, applying the activation between consecutive
layers only. Layer matrices are never materialized.
"""

from dataclasses import dataclass
from loguru import logger
from typing import List, Optional, Sequence, Tuple

import numpy as np

from tncompress import autodiff as ad
from tncompress.autodiff import Tape, Var
from tncompress.errors import ShapeError
from tncompress.models import Activation, AdtnSpec, ChunkPlan, CompressionPlan, DType
from tncompress.nn import Parameter
from tncompress.tensor import Tensor, numpy_dtype


@dataclass(frozen=True)
class Brick:
    index: int  # k in {A^[k]}
    layer: int  # TN layer m, 0-based
    column: int  # 0 = column A, 1 = column B
    lines: Tuple[int, int]


def brick_wall_wiring(Q: int, M: int) -> List[Brick]:
    bricks: List[Brick] = []
    for layer in range(M):
        for column in (0, 1):
            for top in range(column, Q - 1, 2):
                bricks.append(Brick(len(bricks), layer, column, (top, top + 1)))
    return bricks


class Adtn:
    """Spec, trainable tensors {A^[k]}, constant boundary vector v and the wiring"""

    def __init__(
        self,
        spec: AdtnSpec,
        params: Sequence[Parameter],
        boundary: Optional[np.ndarray] = None,
        wiring: Optional[Sequence[Brick]] = None,
    ):
        self.spec = spec
        self.params = list(params)
        d = spec.d
        if boundary is None:
            boundary = np.zeros(d)
            boundary[0] = 1.0
        self.boundary = np.asarray(boundary, dtype=numpy_dtype(spec.dtype))
        self.wiring = list(wiring) if wiring is not None else brick_wall_wiring(spec.Q, spec.M)
        self.validate()

    def validate(self) -> None:
        spec, d = self.spec, self.spec.d
        if len(self.params) != spec.num_tensors or len(self.wiring) != spec.num_tensors:
            raise ShapeError(
                f"ADTN with Q={spec.Q}, M={spec.M} needs {spec.num_tensors} tensors, "
                f"got {len(self.params)} tensors and {len(self.wiring)} bricks"
            )
        for param in self.params:
            if param.shape != (d, d, d, d):
                raise ShapeError(f"{param.name} has shape {list(param.shape)}, expected {[d] * 4}")
        for brick in self.wiring:
            top, bottom = brick.lines
            if bottom != top + 1 or not 0 <= top < spec.Q - 1:
                raise ShapeError(f"Brick {brick.index} couples lines {brick.lines}, not a neighbouring pair")
        if sorted(brick.index for brick in self.wiring) != list(range(spec.num_tensors)):
            raise ShapeError("Brick indexes must cover every tensor exactly once")
        layers = [brick.layer for brick in self.wiring]
        if layers != sorted(layers) or (layers and layers[-1] >= spec.M):
            raise ShapeError(f"Bricks must be ordered by TN layer within 0..{spec.M - 1}")
        if self.boundary.shape != (d,):
            raise ShapeError(f"Boundary vector has shape {list(self.boundary.shape)}, expected [{d}]")

    @property
    def tensors(self) -> List[np.ndarray]:
        return [param.data for param in self.params]

    @property
    def num_params(self) -> int:
        return adtn_param_count(self)

    def __repr__(self) -> str:
        spec = self.spec
        return f"Adtn(Q={spec.Q}, d={spec.d}, M={spec.M}, activation={spec.activation.value}, params={self.num_params})"


def build_brick_wall(
    spec: AdtnSpec,
    seed: int = 0,
    noise: float = 0.01,
    prefix: str = "adtn",
    identity: bool = True,
) -> Adtn:
    """Allocate M*(Q-1) tensors, each the reshaped d^2 x d^2 identity plus N(0, noise^2)"""
    d = spec.d
    rng = np.random.default_rng(seed)
    base = np.eye(d * d).reshape(d, d, d, d) if identity else np.zeros((d, d, d, d))
    params = [
        Parameter(f"{prefix}.A{k}", (base + rng.normal(0.0, noise, size=(d, d, d, d))).astype(numpy_dtype(spec.dtype)))
        for k in range(spec.num_tensors)
    ]
    return Adtn(spec, params)


def _restore_lines(Q: int, top: int) -> List[int]:
    """Permutation moving the two trailing outgoing indexes back to lines (top, top + 1)"""
    perm = []
    for line in range(Q):
        if line < top:
            perm.append(line)
        elif line == top:
            perm.append(Q - 2)
        elif line == top + 1:
            perm.append(Q - 1)
        else:
            perm.append(line - 2)
    return perm


def contract_network(adtn: Adtn, tensors: Sequence[Var]) -> Var:
    """Differentiable contraction of the ADTN into its order-Q encoded tensor"""
    spec = adtn.spec
    if len(tensors) != len(adtn.wiring):
        raise ShapeError(f"{len(tensors)} tensors supplied for {len(adtn.wiring)} bricks")
    tape = tensors[0].tape
    v = tape.constant(Tensor.wrap(adtn.boundary))
    state = v
    for _ in range(spec.Q - 1):
        state = ad.outer(state, v)

    layer = 0
    for brick in adtn.wiring:
        top = brick.lines[0]
        if brick.layer != layer:
            state = _activate(state, spec.activation)
            layer = brick.layer
        state = ad.contract(state, tensors[brick.index], [top, top + 1], [0, 1])
        if top != spec.Q - 2:
            state = ad.permute(state, _restore_lines(spec.Q, top))
    return state


def _activate(state: Var, activation: Activation) -> Var:
    if activation == Activation.RELU:
        return ad.relu(state)
    return state


def contract_adtn(adtn: Adtn) -> Tensor:
    """Encoded tensor of shape (d,)*Q, row-major over lines 0..Q-1"""
    tape = Tape()
    tensors = [tape.constant(Tensor.wrap(param.data)) for param in adtn.params]
    return contract_network(adtn, tensors).value


def adtn_param_count(adtn: Adtn) -> int:
    return sum(param.size for param in adtn.params)


def encoded_size(spec: AdtnSpec) -> int:
    return spec.d**spec.Q


def _largest_exponent(limit: int, d: int) -> int:
    """Largest Q with d**Q <= limit (0 when limit < d)"""
    Q, size = 0, 1
    while size * d <= limit:
        size *= d
        Q += 1
    return Q


def plan_partition(
    num_params: int,
    d: int = 2,
    min_chunk: int = 256,
    M: int = 1,
    activation: Activation = Activation.RELU,
    dtype: DType = DType.F32,
    max_chunks: Optional[int] = None,
    layer: Optional[str] = None,
) -> CompressionPlan:
    """Greedy decomposition into strictly decreasing powers of d, one ADTN per power.

    Chunks tile the flat vector from offset 0; whatever is left (anything below
    min_chunk, or past max_chunks) stays in the residual T^res.
    """
    if num_params < 1:
        raise ValueError(f"num_params must be positive, got {num_params}")
    min_chunk = max(min_chunk, d**2)
    Q = _largest_exponent(num_params, d)
    remaining, offset, chunks = num_params, 0, []
    while Q >= 2 and d**Q >= min_chunk and remaining > 0:
        if max_chunks is not None and len(chunks) >= max_chunks:
            break
        size = d**Q
        if size <= remaining:
            spec = AdtnSpec(Q=Q, d=d, M=M, activation=activation, dtype=dtype)
            chunks.append(ChunkPlan(offset=offset, spec=spec))
            offset += size
            remaining -= size
        Q -= 1
    return CompressionPlan(layer=layer, num_params=num_params, chunks=chunks)


def plan_uniform(
    num_params: int,
    num_adtn: int,
    d: int = 2,
    min_chunk: int = 256,
    M: int = 1,
    activation: Activation = Activation.RELU,
    dtype: DType = DType.F32,
    layer: Optional[str] = None,
) -> CompressionPlan:
    """N equal chunks of the largest d^Q with N * d^Q <= num_params"""
    if num_params < 1 or num_adtn < 1:
        raise ValueError(f"Need positive sizes, got num_params={num_params}, num_adtn={num_adtn}")
    Q = _largest_exponent(num_params // num_adtn, d)
    if Q < 2 or d**Q < max(min_chunk, d**2):
        logger.warning(f"Layer {layer}: {num_params} parameters cannot hold {num_adtn} ADTN chunks")
        return CompressionPlan(layer=layer, num_params=num_params, chunks=[])
    spec = AdtnSpec(Q=Q, d=d, M=M, activation=activation, dtype=dtype)
    chunks = [ChunkPlan(offset=i * d**Q, spec=spec) for i in range(num_adtn)]
    return CompressionPlan(layer=layer, num_params=num_params, chunks=chunks)


class AdtnWeight:
    """ADTN-backed layer weight: concat(flattened chunk decodes) ++ residual, reshaped to the layer shape"""

    def __init__(self, name: str, shape: Tuple[int, ...], plan: CompressionPlan, adtns: Sequence[Adtn], residual: Optional[Parameter]):
        self.name = name
        self.shape = tuple(shape)
        self.plan = plan
        self.adtns = list(adtns)
        self.residual = residual
        if len(self.adtns) != plan.num_adtn:
            raise ShapeError(f"{name}: plan has {plan.num_adtn} chunks but {len(self.adtns)} ADTNs were given")
        residual_size = 0 if residual is None else residual.size
        if residual_size != plan.residual_size:
            raise ShapeError(f"{name}: residual holds {residual_size} entries, plan needs {plan.residual_size}")

    @classmethod
    def from_dense(
        cls, name: str, weight: np.ndarray, plan: CompressionPlan, seed: int = 0, noise: float = 0.01
    ) -> "AdtnWeight":
        """Fresh (untrained) ADTNs per chunk; the residual keeps the trailing dense entries"""
        flat = np.asarray(weight).reshape(-1)
        adtns = [
            build_brick_wall(chunk.spec, seed=seed + index, noise=noise, prefix=f"{name}.adtn{index}")
            for index, chunk in enumerate(plan.chunks)
        ]
        residual = None
        if plan.residual_size:
            residual = Parameter(f"{name}.residual", flat[plan.residual_offset :].copy())
        return cls(name, weight.shape, plan, adtns, residual)

    def materialize(self, tape: Tape) -> Var:
        parts = []
        for adtn in self.adtns:
            tensors = [param.leaf(tape) for param in adtn.params]
            parts.append(ad.flatten(contract_network(adtn, tensors)))
        if self.residual is not None:
            parts.append(self.residual.leaf(tape))
        flat = parts[0] if len(parts) == 1 else ad.concat(parts)
        return ad.reshape(flat, self.shape)

    def parameters(self) -> List[Parameter]:
        params = [param for adtn in self.adtns for param in adtn.params]
        if self.residual is not None:
            params.append(self.residual)
        return params

    def adtn_parameters(self) -> List[Parameter]:
        return [param for adtn in self.adtns for param in adtn.params]

    @property
    def adtn_param_count(self) -> int:
        return sum(adtn.num_params for adtn in self.adtns)

    def decode(self) -> np.ndarray:
        """Eager reconstruction of the dense weight"""
        tape = Tape()
        return self.materialize(tape).value.array.copy()
