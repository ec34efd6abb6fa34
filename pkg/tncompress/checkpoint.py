"""Versioned binary checkpoints of networks, plain or ADTN-compressed.

Layout (all integers little-endian):

    magic b"TNCK" | u16 version | u32 header length | header JSON (UTF-8)
    u32 block count | blocks ... | 32-byte SHA-256 of everything before it

A block is a u8 kind followed by its UTF-8 name (u16 length). Plain blocks hold
one array record. ADTN blocks hold a JSON descriptor (shape, plan, wiring and
boundary of every ADTN) and then the array records of every ADTN tensor and of
the residual. An array record is name, u8 dtype code, u8 ndim, u32 dims and the
raw little-endian payload.
"""

import hashlib
import io
import json
import struct
from loguru import logger
from pathlib import Path
from pydantic import BaseModel, Field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from tncompress.adtn import Adtn, AdtnWeight, Brick
from tncompress.errors import CheckpointError
from tncompress.models import CompressionPlan, DType, LayerSpec
from tncompress.nn import Network, Parameter, PlainWeight

MAGIC = b"TNCK"
VERSION = 1
CHECKSUM_SIZE = 32

BLOCK_PLAIN = 0
BLOCK_ADTN = 1

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


class CheckpointHeader(BaseModel):
    version: int = VERSION
    model: str
    seed: int
    dtype: DType
    input_shape: List[int]
    layers: List[LayerSpec]
    meta: Dict[str, Any] = Field(default_factory=dict)  # eta_NN, training config hash, ...


# Encoding


def _write_name(buffer: io.BytesIO, name: str) -> None:
    encoded = name.encode("utf-8")
    buffer.write(struct.pack("<H", len(encoded)))
    buffer.write(encoded)


def _write_array(buffer: io.BytesIO, name: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise CheckpointError(f"{name}: cannot store dtype {array.dtype}")
    _write_name(buffer, name)
    buffer.write(struct.pack("<BB", DTYPE_CODES[dtype], array.ndim))
    buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buffer.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _write_json(buffer: io.BytesIO, data: Dict) -> None:
    encoded = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buffer.write(struct.pack("<I", len(encoded)))
    buffer.write(encoded)


def _adtn_descriptor(weight: AdtnWeight) -> Dict:
    return {
        "shape": list(weight.shape),
        "plan": weight.plan.model_dump(mode="json"),
        "adtns": [
            {
                "params": [param.name for param in adtn.params],
                "wiring": [
                    {"index": brick.index, "layer": brick.layer, "column": brick.column, "lines": list(brick.lines)}
                    for brick in adtn.wiring
                ],
                "boundary": adtn.boundary.tolist(),
            }
            for adtn in weight.adtns
        ],
        "residual": None if weight.residual is None else weight.residual.name,
    }


def serialize_checkpoint(net: Network, seed: int, meta: Optional[Dict[str, Any]] = None) -> bytes:
    header = CheckpointHeader(
        model=net.model,
        seed=seed,
        dtype=net.dtype,
        input_shape=list(net.input_shape),
        layers=net.layers,
        meta=meta or {},
    )
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<H", VERSION))
    _write_json(buffer, header.model_dump(mode="json"))
    buffer.write(struct.pack("<I", len(net.param_store)))
    for name, source in net.param_store.items():
        if isinstance(source, AdtnWeight):
            buffer.write(struct.pack("<B", BLOCK_ADTN))
            _write_name(buffer, name)
            _write_json(buffer, _adtn_descriptor(source))
            for param in source.parameters():
                _write_array(buffer, param.name, param.data)
        elif isinstance(source, PlainWeight):
            buffer.write(struct.pack("<B", BLOCK_PLAIN))
            _write_name(buffer, name)
            _write_array(buffer, source.param.name, source.param.data)
        else:
            raise CheckpointError(f"{name}: unsupported parameter source {type(source).__name__}")
    payload = buffer.getvalue()
    return payload + hashlib.sha256(payload).digest()


# Decoding


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.position = 0

    def take(self, size: int) -> bytes:
        if self.position + size > len(self.payload):
            raise CheckpointError(f"Checkpoint truncated at byte {self.position}, needed {size} more")
        chunk = self.payload[self.position : self.position + size]
        self.position += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf-8")

    def json(self) -> Dict:
        (length,) = self.unpack("<I")
        return json.loads(self.take(length).decode("utf-8"))

    def array(self) -> Tuple[str, np.ndarray]:
        name = self.name()
        code, ndim = self.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dtype = CODE_DTYPES[code]
        shape = self.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(self.take(size * dtype.itemsize), dtype=dtype).reshape(shape)
        return name, array.astype(dtype.newbyteorder("="))


def _read_adtn_weight(reader: _Reader, name: str, seen: set) -> AdtnWeight:
    descriptor = reader.json()
    plan = CompressionPlan.model_validate(descriptor["plan"])
    arrays = {}
    expected = [param for adtn in descriptor["adtns"] for param in adtn["params"]]
    if descriptor["residual"] is not None:
        expected.append(descriptor["residual"])
    for _ in expected:
        param_name, array = reader.array()
        if param_name in seen or param_name in arrays:
            raise CheckpointError(f"Parameter {param_name} stored twice")
        arrays[param_name] = array
    if set(arrays) != set(expected):
        raise CheckpointError(f"{name}: ADTN block holds {sorted(arrays)}, descriptor lists {sorted(expected)}")
    seen.update(arrays)

    adtns = []
    for chunk, entry in zip(plan.chunks, descriptor["adtns"]):
        wiring = [Brick(b["index"], b["layer"], b["column"], tuple(b["lines"])) for b in entry["wiring"]]
        params = [Parameter(param_name, arrays[param_name]) for param_name in entry["params"]]
        adtns.append(Adtn(chunk.spec, params, boundary=np.asarray(entry["boundary"]), wiring=wiring))
    residual = None
    if descriptor["residual"] is not None:
        residual = Parameter(descriptor["residual"], arrays[descriptor["residual"]])
    return AdtnWeight(name, tuple(descriptor["shape"]), plan, adtns, residual)


def parse_checkpoint(payload: bytes) -> Tuple[Network, CheckpointHeader]:
    if len(payload) < len(MAGIC) + CHECKSUM_SIZE or payload[: len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a tncompress checkpoint (bad magic)")
    body, checksum = payload[:-CHECKSUM_SIZE], payload[-CHECKSUM_SIZE:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError("Checkpoint checksum mismatch, file is corrupted")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {VERSION}")
    try:
        header = CheckpointHeader.model_validate(reader.json())
        net = Network(header.layers, tuple(header.input_shape), model=header.model, dtype=header.dtype)
        (count,) = reader.unpack("<I")
        seen: set = set()
        for _ in range(count):
            (kind,) = reader.unpack("<B")
            name = reader.name()
            if name in net.param_store:
                raise CheckpointError(f"Block {name} stored twice")
            if kind == BLOCK_PLAIN:
                param_name, array = reader.array()
                if param_name in seen:
                    raise CheckpointError(f"Parameter {param_name} stored twice")
                seen.add(param_name)
                net.param_store[name] = PlainWeight(Parameter(param_name, array))
            elif kind == BLOCK_ADTN:
                net.param_store[name] = _read_adtn_weight(reader, name, seen)
            else:
                raise CheckpointError(f"Block {name} has unknown kind {kind}")
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, struct.error) as e:
        raise CheckpointError(f"Malformed checkpoint: {e}") from e
    if reader.position != len(body):
        raise CheckpointError(f"{len(body) - reader.position} unexpected bytes before the checksum")

    for layer in net.layers:
        for suffix, shape in (("weight", layer.weight_shape()), ("bias", layer.bias_shape())):
            if shape is None:
                continue
            source = net.param_store.get(f"{layer.name}.{suffix}")
            if source is None:
                raise CheckpointError(f"Checkpoint has no {layer.name}.{suffix}")
            if tuple(source.shape) != tuple(shape):
                raise CheckpointError(f"{layer.name}.{suffix} has shape {list(source.shape)}, layer needs {list(shape)}")
    return net, header


def save_checkpoint(net: Network, path: Path, seed: int, meta: Optional[Dict[str, Any]] = None) -> str:
    """Write the checkpoint and return its SHA-256"""
    payload = serialize_checkpoint(net, seed, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    digest = hashlib.sha256(payload).hexdigest()
    logger.info(f"Saved {net.model} checkpoint to {path} ({len(payload)} bytes, sha256 {digest[:12]})")
    return digest


def load_checkpoint(path: Path) -> Tuple[Network, CheckpointHeader]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    net, header = parse_checkpoint(path.read_bytes())
    logger.debug(f"Loaded {header.model} checkpoint from {path}")
    return net, header


def inspect_checkpoint(path: Path) -> Dict[str, Any]:
    """Header plus one row per parameter block, with plans and ratios for ADTN blocks"""
    net, header = load_checkpoint(path)
    blocks = []
    for name, source in net.param_store.items():
        row: Dict[str, Any] = {"name": name, "shape": list(source.shape), "dense_params": int(np.prod(source.shape))}
        if isinstance(source, AdtnWeight):
            row.update(
                kind="adtn",
                num_adtn=source.plan.num_adtn,
                chunks=[{"offset": chunk.offset, "Q": chunk.spec.Q, "M": chunk.spec.M} for chunk in source.plan.chunks],
                adtn_params=source.adtn_param_count,
                residual=source.plan.residual_size,
                stored_params=sum(param.size for param in source.parameters()),
            )
        else:
            row.update(kind="plain", stored_params=row["dense_params"])
        blocks.append(row)
    return {
        "header": header.model_dump(mode="json", exclude={"layers"}),
        "layers": [layer.name for layer in header.layers],
        "blocks": blocks,
        "dense_params": net.dense_num_params(),
        "stored_params": net.num_params(),
        "sha256": hashlib.sha256(Path(path).read_bytes()).hexdigest(),
    }
