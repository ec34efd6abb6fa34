"""Layers, losses, optimizers and the training loop for FC-2 and LeNet-5 networks.

Weights of a Network come from parameter sources: a plain trainable array, or an
ADTN-backed source (see adtn.AdtnWeight) that rebuilds the weight on every forward.
"""

import time
from loguru import logger
from tqdm import tqdm
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tncompress import autodiff as ad
from tncompress.autodiff import Op, Tape, Var
from tncompress.config import TrainConfig, settings
from tncompress.data import Dataset, batches, num_batches
from tncompress.errors import MissingGradError, NumericError, ShapeError
from tncompress.models import DType, EpochMetrics, LayerKind, LayerSpec, ModelName, OptimizerKind
from tncompress.tensor import Tensor, numpy_dtype


class Parameter:
    """A named trainable array. Updates replace ``data``; arrays handed to tapes are never mutated."""

    __slots__ = ("name", "data", "requires_grad", "grad")

    def __init__(self, name: str, data: np.ndarray, requires_grad: bool = True):
        self.name = name
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def leaf(self, tape: Tape) -> Var:
        """Bind to the tape; a leaf already registered under this name (e.g. by gradcheck) is reused"""
        if self.name in tape.leaves:
            return tape.leaves[self.name]
        return tape.leaf(self.name, Tensor.wrap(self.data), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={list(self.shape)}, requires_grad={self.requires_grad})"


class ParamSource(Protocol):
    """Where a layer tensor comes from at forward time"""

    shape: Tuple[int, ...]

    def materialize(self, tape: Tape) -> Var: ...

    def parameters(self) -> List[Parameter]: ...


class PlainWeight:
    def __init__(self, param: Parameter):
        self.param = param
        self.shape = tuple(param.shape)

    def materialize(self, tape: Tape) -> Var:
        return self.param.leaf(tape)

    def parameters(self) -> List[Parameter]:
        return [self.param]


# Layer primitives


class AddBias(Op):
    """x[:, c, ...] + b[c]"""

    name = "add_bias"

    def forward(self, ctx, x, b):
        if x.order < 2 or x.shape[1] != b.shape[0] or b.order != 1:
            raise ShapeError(f"Bias of shape {list(b.shape)} does not match input {list(x.shape)}")
        ctx["axes"] = tuple(axis for axis in range(x.order) if axis != 1)
        view = (1, -1) + (1,) * (x.order - 2)
        return Tensor.wrap(x.array + b.array.reshape(view))

    def backward(self, ctx, grad):
        return grad, grad.sum(axis=ctx["axes"])


class Conv2d(Op):
    """Cross-correlation with zero padding: x [B, C, H, W] * w [O, C, k, k] -> [B, O, Ho, Wo]"""

    name = "conv2d"

    def __init__(self, stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding

    def forward(self, ctx, x, w):
        if x.order != 4 or w.order != 4:
            raise ShapeError(f"conv2d needs 4-d input and weight, got {list(x.shape)} and {list(w.shape)}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        k, p, s = w.shape[2], self.padding, self.stride
        if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
            raise ShapeError(f"conv2d: kernel {k} larger than padded input {list(x.shape[2:])}")
        padded = np.pad(x.array, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ctx.update(windows=windows, w=w.array, padded_shape=padded.shape)
        out = np.tensordot(windows, w.array, axes=([1, 4, 5], [1, 2, 3]))
        return Tensor.wrap(out.transpose(0, 3, 1, 2))

    def backward(self, ctx, grad):
        windows, w = ctx["windows"], ctx["w"]
        k, p, s = w.shape[2], self.padding, self.stride
        h_out, w_out = grad.shape[2], grad.shape[3]
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros(ctx["padded_shape"], dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_padded[:, :, i : i + s * (h_out - 1) + 1 : s, j : j + s * (w_out - 1) + 1 : s] += contribution
        height, width = grad_padded.shape[2] - 2 * p, grad_padded.shape[3] - 2 * p
        return grad_padded[:, :, p : p + height, p : p + width], grad_w


class MaxPool2d(Op):
    """Window max; ties go to the first element in row-major window order"""

    name = "maxpool2d"

    def __init__(self, size: int, stride: Optional[int] = None):
        self.size = size
        self.stride = stride or size

    def forward(self, ctx, x):
        k, s = self.size, self.stride
        if x.order != 4 or x.shape[2] < k or x.shape[3] < k:
            raise ShapeError(f"maxpool2d: window {k} does not fit input {list(x.shape)}")
        windows = sliding_window_view(x.array, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = windows.reshape(windows.shape[:4] + (k * k,))
        argmax = flat.argmax(axis=-1)
        ctx.update(argmax=argmax, shape=x.shape)
        return Tensor.wrap(np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0])

    def backward(self, ctx, grad):
        k, s = self.size, self.stride
        argmax = ctx["argmax"]
        h_out, w_out = grad.shape[2], grad.shape[3]
        grad_x = np.zeros(ctx["shape"], dtype=grad.dtype)
        for index in range(k * k):
            i, j = divmod(index, k)
            grad_x[:, :, i : i + s * (h_out - 1) + 1 : s, j : j + s * (w_out - 1) + 1 : s] += grad * (argmax == index)
        return (grad_x,)


def adaptive_bins(size: int, out: int) -> List[Tuple[int, int]]:
    """Cell i covers [floor(i*size/out), ceil((i+1)*size/out))"""
    return [((i * size) // out, -(-((i + 1) * size) // out)) for i in range(out)]


class AdaptiveAvgPool2d(Op):
    name = "adaptive_avgpool2d"

    def __init__(self, out: int):
        self.out = out

    def forward(self, ctx, x):
        if x.order != 4 or x.shape[2] < self.out or x.shape[3] < self.out:
            raise ShapeError(f"adaptive_avgpool2d: cannot pool {list(x.shape)} to {self.out}x{self.out}")
        rows, cols = adaptive_bins(x.shape[2], self.out), adaptive_bins(x.shape[3], self.out)
        out = np.empty(x.shape[:2] + (self.out, self.out), dtype=x.array.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                out[:, :, i, j] = x.array[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
        ctx.update(rows=rows, cols=cols, shape=x.shape)
        return Tensor.wrap(out)

    def backward(self, ctx, grad):
        grad_x = np.zeros(ctx["shape"], dtype=grad.dtype)
        for i, (r0, r1) in enumerate(ctx["rows"]):
            for j, (c0, c1) in enumerate(ctx["cols"]):
                area = (r1 - r0) * (c1 - c0)
                grad_x[:, :, r0:r1, c0:c1] += grad[:, :, i, j][:, :, None, None] / area
        return (grad_x,)


class SoftmaxCrossEntropy(Op):
    """Mean over the batch of -log softmax(logits)[label], max-subtracted"""

    name = "softmax_cross_entropy"

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels, dtype=np.int64)

    def forward(self, ctx, logits):
        if logits.order != 2 or logits.shape[0] != len(self.labels):
            raise ShapeError(f"Logits {list(logits.shape)} do not match {len(self.labels)} labels")
        classes = logits.shape[1]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= classes):
            raise ValueError(f"Labels must lie in [0, {classes})")
        shifted = logits.array - logits.array.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(len(self.labels))
        losses = log_norm - shifted[rows, self.labels]
        ctx["softmax"] = np.exp(shifted - log_norm[:, None])
        return Tensor.wrap(np.asarray(losses.mean(), dtype=logits.array.dtype))

    def backward(self, ctx, grad):
        delta = ctx["softmax"].copy()
        delta[np.arange(len(self.labels)), self.labels] -= 1
        return (grad * delta / len(self.labels),)


def add_bias(x: Var, b: Var) -> Var:
    return x.tape.record(AddBias(), x, b)


def forward_linear(x: Var, weight: Var, bias: Optional[Var] = None) -> Var:
    """x [batch, in] @ W [in, out] + b [out]"""
    if x.order != 2 or weight.order != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {list(x.shape)} does not match weight {list(weight.shape)}")
    out = ad.contract(x, weight, [1], [0])
    return add_bias(out, bias) if bias is not None else out


def forward_conv2d(x: Var, weight: Var, bias: Optional[Var] = None, stride: int = 1, padding: int = 0) -> Var:
    out = x.tape.record(Conv2d(stride, padding), x, weight)
    return add_bias(out, bias) if bias is not None else out


def forward_maxpool2d(x: Var, size: int, stride: Optional[int] = None) -> Var:
    return x.tape.record(MaxPool2d(size, stride), x)


def forward_adaptive_avgpool2d(x: Var, out: int) -> Var:
    return x.tape.record(AdaptiveAvgPool2d(out), x)


def flatten(x: Var) -> Var:
    """[batch, ...] -> [batch, features]"""
    return ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:], dtype=np.int64))))


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    return logits.tape.record(SoftmaxCrossEntropy(labels), logits)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def layer_output_shape(layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Per-sample output shape of a layer, raising ShapeError on inconsistent wiring"""
    kind = layer.kind
    if kind == LayerKind.LINEAR:
        if shape != (layer.in_features,):
            raise ShapeError(f"{layer.name}: expects ({layer.in_features},) input, got {shape}")
        return (layer.out_features,)
    if kind == LayerKind.CONV2D:
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"{layer.name}: expects {layer.in_channels} input channels, got {shape}")
        h = conv_output_size(shape[1], layer.kernel, layer.stride, layer.padding)
        w = conv_output_size(shape[2], layer.kernel, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise ShapeError(f"{layer.name}: kernel {layer.kernel} does not fit {shape}")
        return (layer.out_channels, h, w)
    if kind == LayerKind.MAXPOOL2D:
        stride = layer.pool_stride or layer.pool
        if len(shape) != 3 or shape[1] < layer.pool or shape[2] < layer.pool:
            raise ShapeError(f"{layer.name}: pool {layer.pool} does not fit {shape}")
        return (shape[0], (shape[1] - layer.pool) // stride + 1, (shape[2] - layer.pool) // stride + 1)
    if kind == LayerKind.ADAPTIVE_AVGPOOL2D:
        if len(shape) != 3 or shape[1] < layer.pool or shape[2] < layer.pool:
            raise ShapeError(f"{layer.name}: cannot pool {shape} to {layer.pool}x{layer.pool}")
        return (shape[0], layer.pool, layer.pool)
    if kind == LayerKind.FLATTEN:
        return (int(np.prod(shape, dtype=np.int64)),)
    return shape


class Network:
    """Ordered layer list with a parameter store keyed "<layer>.weight" / "<layer>.bias"."""

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        input_shape: Tuple[int, ...],
        model: str = "custom",
        dtype: DType = DType.F32,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.model = model
        self.dtype = DType(dtype)
        self.param_store: Dict[str, ParamSource] = {}
        self.output_shapes()

    def output_shapes(self) -> List[Tuple[int, ...]]:
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer_output_shape(layer, shape)
            shapes.append(shape)
        return shapes

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"No layer named {name}")

    def layer_position(self, name: str) -> int:
        return [layer.name for layer in self.layers].index(name)

    def weight_layers(self) -> List[str]:
        return [layer.name for layer in self.layers if layer.has_weight]

    def init_parameters(self, seed: int) -> "Network":
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases"""
        rng = np.random.default_rng(seed)
        np_dtype = numpy_dtype(self.dtype)
        for layer in self.layers:
            if not layer.has_weight:
                continue
            weight_shape = layer.weight_shape()
            fan_in = layer.in_features if layer.kind == LayerKind.LINEAR else int(np.prod(weight_shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            for suffix, shape in (("weight", weight_shape), ("bias", layer.bias_shape())):
                data = rng.uniform(-bound, bound, size=shape).astype(np_dtype)
                self.param_store[f"{layer.name}.{suffix}"] = PlainWeight(Parameter(f"{layer.name}.{suffix}", data))
        return self

    def parameters(self) -> List[Parameter]:
        params = []
        for source in self.param_store.values():
            params.extend(source.parameters())
        return params

    def trainable_parameters(self) -> List[Parameter]:
        return [param for param in self.parameters() if param.requires_grad]

    def set_trainable(self, trainable: bool, names: Optional[Iterable[str]] = None) -> None:
        names = None if names is None else set(names)
        for param in self.parameters():
            if names is None or param.name in names:
                param.requires_grad = trainable

    def num_params(self) -> int:
        """Stored scalars: ADTN tensors + residuals + plain parameters"""
        return sum(param.size for param in self.parameters())

    def dense_num_params(self) -> int:
        """#(NN): parameter count of the uncompressed network"""
        return sum(int(np.prod(source.shape)) for source in self.param_store.values())

    def forward(self, tape: Tape, x: Var) -> Var:
        for layer in self.layers:
            kind = layer.kind
            if kind == LayerKind.LINEAR:
                x = forward_linear(x, self._tensor(tape, layer, "weight"), self._tensor(tape, layer, "bias"))
            elif kind == LayerKind.CONV2D:
                weight, bias = self._tensor(tape, layer, "weight"), self._tensor(tape, layer, "bias")
                x = forward_conv2d(x, weight, bias, layer.stride, layer.padding)
            elif kind == LayerKind.MAXPOOL2D:
                x = forward_maxpool2d(x, layer.pool, layer.pool_stride)
            elif kind == LayerKind.ADAPTIVE_AVGPOOL2D:
                x = forward_adaptive_avgpool2d(x, layer.pool)
            elif kind == LayerKind.RELU:
                x = ad.relu(x)
            elif kind == LayerKind.FLATTEN:
                x = flatten(x)
        return x

    def _tensor(self, tape: Tape, layer: LayerSpec, suffix: str) -> Var:
        return self.param_store[f"{layer.name}.{suffix}"].materialize(tape)

    def logits(self, images: np.ndarray) -> np.ndarray:
        tape = Tape()
        x = tape.constant(Tensor(images, self.dtype))
        return self.forward(tape, x).value.array


def fc2_layers(hidden: int = 256, in_features: int = 784, classes: int = 10) -> List[LayerSpec]:
    return [
        LayerSpec(name="flatten", kind=LayerKind.FLATTEN),
        LayerSpec(name="fc1", kind=LayerKind.LINEAR, in_features=in_features, out_features=hidden),
        LayerSpec(name="relu1", kind=LayerKind.RELU),
        LayerSpec(name="fc2", kind=LayerKind.LINEAR, in_features=hidden, out_features=classes),
    ]


def lenet5_mnist_layers(classes: int = 10) -> List[LayerSpec]:
    return [
        LayerSpec(name="conv1", kind=LayerKind.CONV2D, in_channels=1, out_channels=6, kernel=5, padding=2),
        LayerSpec(name="relu1", kind=LayerKind.RELU),
        LayerSpec(name="pool1", kind=LayerKind.MAXPOOL2D, pool=2),
        LayerSpec(name="conv2", kind=LayerKind.CONV2D, in_channels=6, out_channels=16, kernel=5),
        LayerSpec(name="relu2", kind=LayerKind.RELU),
        LayerSpec(name="pool2", kind=LayerKind.MAXPOOL2D, pool=2),
        LayerSpec(name="conv3", kind=LayerKind.CONV2D, in_channels=16, out_channels=120, kernel=5),
        LayerSpec(name="flatten", kind=LayerKind.FLATTEN),
        LayerSpec(name="fc1", kind=LayerKind.LINEAR, in_features=120, out_features=84),
        LayerSpec(name="relu3", kind=LayerKind.RELU),
        LayerSpec(name="fc2", kind=LayerKind.LINEAR, in_features=84, out_features=classes),
    ]


def lenet5_layers(width: int = 256, in_channels: int = 1, classes: int = 10) -> List[LayerSpec]:
    """LeNet-5 with first linear layer (512 x s) and second (s x 128)"""
    return [
        LayerSpec(name="conv1", kind=LayerKind.CONV2D, in_channels=in_channels, out_channels=16, kernel=5),
        LayerSpec(name="relu1", kind=LayerKind.RELU),
        LayerSpec(name="pool1", kind=LayerKind.MAXPOOL2D, pool=2),
        LayerSpec(name="conv2", kind=LayerKind.CONV2D, in_channels=16, out_channels=32, kernel=5),
        LayerSpec(name="relu2", kind=LayerKind.RELU),
        LayerSpec(name="pool2", kind=LayerKind.ADAPTIVE_AVGPOOL2D, pool=4),
        LayerSpec(name="flatten", kind=LayerKind.FLATTEN),
        LayerSpec(name="fc1", kind=LayerKind.LINEAR, in_features=512, out_features=width),
        LayerSpec(name="relu3", kind=LayerKind.RELU),
        LayerSpec(name="fc2", kind=LayerKind.LINEAR, in_features=width, out_features=128),
        LayerSpec(name="relu4", kind=LayerKind.RELU),
        LayerSpec(name="fc3", kind=LayerKind.LINEAR, in_features=128, out_features=classes),
    ]


def build_model(
    name: ModelName,
    seed: int = 0,
    dtype: DType = DType.F32,
    width: Optional[int] = None,
    input_shape: Tuple[int, ...] = (1, 28, 28),
    classes: int = 10,
) -> Network:
    name = ModelName(name)
    if name == ModelName.FC2:
        layers = fc2_layers(hidden=width or 256, in_features=int(np.prod(input_shape)), classes=classes)
    elif name == ModelName.LENET5_MNIST:
        layers = lenet5_mnist_layers(classes)
    else:
        layers = lenet5_layers(width or 256, in_channels=input_shape[0], classes=classes)
    return Network(layers, input_shape, model=name.value, dtype=dtype).init_parameters(seed)


class Optimizer:
    """SGD (p <- p - lr*g) or Adam with bias-corrected moments; state per parameter name"""

    def __init__(
        self,
        kind: OptimizerKind = OptimizerKind.ADAM,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.kind = OptimizerKind(kind)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: Dict[str, Dict] = {}

    @classmethod
    def from_config(cls, config: TrainConfig, lr: Optional[float] = None) -> "Optimizer":
        return cls(config.optimizer, config.lr if lr is None else lr, config.beta1, config.beta2, config.eps)

    def zero_grad(self, params: Iterable[Parameter]) -> None:
        for param in params:
            param.grad = None

    def step(self, params: Iterable[Parameter]) -> None:
        for param in params:
            if not param.requires_grad:
                continue
            if param.grad is None:
                raise MissingGradError(f"Parameter {param.name} has no gradient")
            grad = param.grad.astype(param.data.dtype, copy=False)
            if grad.shape != param.shape:
                raise ShapeError(f"Gradient {list(grad.shape)} does not match {param.name} {list(param.shape)}")
            if self.kind == OptimizerKind.SGD:
                param.data = param.data - param.data.dtype.type(self.lr) * grad
                continue
            state = self.state.setdefault(
                param.name, {"t": 0, "m": np.zeros_like(param.data), "v": np.zeros_like(param.data)}
            )
            state["t"] += 1
            state["m"] = self.beta1 * state["m"] + (1 - self.beta1) * grad
            state["v"] = self.beta2 * state["v"] + (1 - self.beta2) * grad * grad
            m_hat = state["m"] / (1 - self.beta1 ** state["t"])
            v_hat = state["v"] / (1 - self.beta2 ** state["t"])
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            param.data = (param.data - update).astype(param.data.dtype)


def step(opt: Optimizer, params: Sequence[Parameter], grads: Dict[str, Tensor]) -> List[Parameter]:
    """Attach grads by parameter name and apply one optimizer update"""
    for param in params:
        if param.requires_grad:
            grad = grads.get(param.name)
            param.grad = None if grad is None else grad.array
    opt.step(params)
    return list(params)


def accuracy(net: Network, dataset: Dataset, batch_size: int = 1000) -> float:
    """Fraction of correctly classified samples"""
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate on an empty dataset")
    correct = 0
    for images, labels in batches(dataset, batch_size):
        correct += int((net.logits(images).argmax(axis=1) == labels).sum())
    return correct / len(dataset)


def run_epoch(
    net: Network,
    dataset: Dataset,
    optimizer: Optimizer,
    batch_size: int,
    seed: int,
    progress: bool = False,
    description: str = "train",
) -> Tuple[float, float]:
    """One shuffled pass with cross entropy; returns (mean loss, train accuracy)"""
    params = net.trainable_parameters()
    total_loss, correct = 0.0, 0
    iterator = batches(dataset, batch_size, seed=seed)
    for images, labels in tqdm(iterator, total=num_batches(dataset, batch_size), desc=description, disable=not progress):
        tape = Tape()
        logits = net.forward(tape, tape.constant(Tensor(images, net.dtype)))
        loss = softmax_cross_entropy(logits, labels)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"Non-finite training loss {value} ({description})")
        step(optimizer, params, tape.backward(loss))
        total_loss += value * len(labels)
        correct += int((logits.value.array.argmax(axis=1) == labels).sum())
    return total_loss / len(dataset), correct / len(dataset)


def train(
    net: Network,
    dataset: Dataset,
    config: TrainConfig,
    test_set: Optional[Dataset] = None,
    seed: int = 0,
) -> Tuple[Network, List[EpochMetrics]]:
    """Train in place; per-epoch train loss/accuracy and test accuracy are recorded"""
    if dataset.sample_shape != net.input_shape:
        raise ShapeError(f"Dataset samples {dataset.sample_shape} do not match network input {net.input_shape}")
    optimizer = Optimizer.from_config(config)
    progress = settings.progress if config.progress is None else config.progress
    history = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        train_loss, train_accuracy = run_epoch(
            net, dataset, optimizer, config.batch_size, seed + epoch, progress, f"epoch {epoch + 1}"
        )
        test_accuracy = accuracy(net, test_set) if test_set is not None else None
        metrics = EpochMetrics(
            epoch=epoch + 1, train_loss=train_loss, train_accuracy=train_accuracy, test_accuracy=test_accuracy
        )
        history.append(metrics)
        logger.info(
            f"[{net.model}] epoch {epoch + 1}/{config.epochs}: loss {train_loss:.4f}, "
            f"train acc {train_accuracy:.4f}, test acc {test_accuracy}, {time.perf_counter() - started:.1f}s"
        )
    return net, history
