"""Tape-based reverse-mode automatic differentiation over tensor-core primitives.

A Tape records every primitive applied to its Vars in execution order, so the
recorded nodes are topologically sorted by construction. ``Tape.backward`` walks
them once in reverse and accumulates gradients additively on fan-out.
"""

from dataclasses import dataclass, field
from loguru import logger
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tncompress import tensor as tc
from tncompress.errors import ShapeError, TapeError
from tncompress.models import DType, GradcheckEntry, GradcheckReport
from tncompress.tensor import Tensor


class Op:
    """A differentiable primitive.

    ``forward`` maps input Tensors to the output Tensor and may stash what the
    backward pass needs in ``ctx``. ``backward`` maps the output gradient to one
    gradient (or None) per input.
    """

    name = "op"

    def forward(self, ctx: dict, *inputs: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, ctx: dict, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


@dataclass
class Node:
    op: Optional[Op]  # None for leaves and constants
    inputs: Tuple[int, ...]
    requires_grad: bool
    ctx: dict = field(default_factory=dict)


class Var:
    """A Tensor value living on a Tape"""

    __slots__ = ("tape", "node", "value", "requires_grad", "grad", "name")

    def __init__(self, tape: "Tape", node: int, value: Tensor, requires_grad: bool, name: Optional[str] = None):
        self.tape = tape
        self.node = node
        self.value = value
        self.requires_grad = requires_grad
        self.grad: Optional[Tensor] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def order(self) -> int:
        return self.value.order

    def item(self) -> float:
        return self.value.item()

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: Union["Var", float]) -> "Var":
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(node={self.node}, shape={list(self.shape)}, requires_grad={self.requires_grad})"


class Tape:
    """Append-only record of primitive applications. Single writer: not thread-safe."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: Dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, name: str, value: Tensor, requires_grad: bool = True) -> Var:
        """Register a named trainable input"""
        if name in self.leaves:
            raise TapeError(f"Leaf {name} already registered on this tape")
        node = self._append(Node(op=None, inputs=(), requires_grad=requires_grad))
        var = Var(self, node, value, requires_grad, name=name)
        self.leaves[name] = var
        return var

    def constant(self, value: Tensor) -> Var:
        node = self._append(Node(op=None, inputs=(), requires_grad=False))
        return Var(self, node, value, requires_grad=False)

    def record(self, op: Op, *inputs: Var) -> Var:
        """Apply op eagerly and record it"""
        for var in inputs:
            if var.tape is not self:
                raise TapeError(f"{op.name}: input {var!r} belongs to another tape")
        requires_grad = any(var.requires_grad for var in inputs)
        ctx: dict = {}
        value = op.forward(ctx, *(var.value for var in inputs))
        node = self._append(
            Node(op=op, inputs=tuple(var.node for var in inputs), requires_grad=requires_grad, ctx=ctx)
        )
        return Var(self, node, value, requires_grad)

    def backward(self, loss: Var) -> Dict[str, Tensor]:
        """Propagate d(loss)/d(node) back to every requires_grad leaf.

        Sets ``grad`` on the leaf Vars and returns them by leaf name. Leaves the
        loss does not depend on receive zeros.
        """
        if loss.tape is not self:
            raise TapeError("Loss belongs to another tape")
        if loss.order != 0:
            raise TapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")

        grads: Dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.value.array.dtype)}
        for index in range(loss.node, -1, -1):
            node = self.nodes[index]
            grad = grads.get(index)
            if grad is None or not node.requires_grad or node.op is None:
                continue
            input_grads = node.op.backward(node.ctx, grad)
            for input_node, input_grad in zip(node.inputs, input_grads):
                if input_grad is None or not self.nodes[input_node].requires_grad:
                    continue
                previous = grads.get(input_node)
                grads[input_node] = input_grad if previous is None else previous + input_grad

        result = {}
        for name, var in self.leaves.items():
            if not var.requires_grad:
                continue
            grad = grads.get(var.node)
            if grad is None:
                grad = np.zeros(var.shape, dtype=var.value.array.dtype)
            var.grad = Tensor.wrap(np.asarray(grad, dtype=var.value.array.dtype).reshape(var.shape))
            result[name] = var.grad
        return result


# Tensor-core primitives


class Contract(Op):
    name = "contract"

    def __init__(self, axes_a: Sequence[int], axes_b: Sequence[int]):
        self.axes_a = [int(axis) for axis in axes_a]
        self.axes_b = [int(axis) for axis in axes_b]

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a.array, b.array
        return tc.contract(a, b, self.axes_a, self.axes_b)

    def backward(self, ctx, grad):
        a, b = ctx["a"], ctx["b"]
        free_a = [axis for axis in range(a.ndim) if axis not in self.axes_a]
        free_b = [axis for axis in range(b.ndim) if axis not in self.axes_b]
        n_free_a = len(free_a)
        g_b_axes = list(range(n_free_a, n_free_a + len(free_b)))

        grad_a = np.tensordot(grad, b, axes=(g_b_axes, free_b))
        layout_a = free_a + [self.axes_a[self.axes_b.index(axis)] for axis in sorted(self.axes_b)]
        grad_a = np.transpose(grad_a, np.argsort(layout_a))

        grad_b = np.tensordot(a, grad, axes=(free_a, list(range(n_free_a))))
        layout_b = [self.axes_b[self.axes_a.index(axis)] for axis in sorted(self.axes_a)] + free_b
        grad_b = np.transpose(grad_b, np.argsort(layout_b))
        return grad_a, grad_b


class Reshape(Op):
    name = "reshape"

    def __init__(self, new_shape: Sequence[int]):
        self.new_shape = tuple(new_shape)

    def forward(self, ctx, t):
        ctx["shape"] = t.shape
        return tc.reshape(t, self.new_shape)

    def backward(self, ctx, grad):
        return (grad.reshape(ctx["shape"]),)


class Permute(Op):
    name = "permute"

    def __init__(self, perm: Sequence[int]):
        self.perm = [int(axis) for axis in perm]

    def forward(self, ctx, t):
        return tc.permute(t, self.perm)

    def backward(self, ctx, grad):
        return (np.transpose(grad, tc.inverse_permutation(self.perm)),)


class Relu(Op):
    name = "relu"

    def forward(self, ctx, t):
        ctx["mask"] = t.array > 0
        return tc.relu(t)

    def backward(self, ctx, grad):
        # subgradient 0 at x == 0
        return (grad * ctx["mask"],)


class Add(Op):
    name = "add"

    def forward(self, ctx, a, b):
        return tc.add(a, b)

    def backward(self, ctx, grad):
        return grad, grad


class Sub(Op):
    name = "sub"

    def forward(self, ctx, a, b):
        return tc.sub(a, b)

    def backward(self, ctx, grad):
        return grad, -grad


class Mul(Op):
    name = "mul"

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a.array, b.array
        return tc.mul(a, b)

    def backward(self, ctx, grad):
        return grad * ctx["b"], grad * ctx["a"]


class Scale(Op):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def forward(self, ctx, t):
        return tc.scale(t, self.factor)

    def backward(self, ctx, grad):
        return (grad * grad.dtype.type(self.factor),)


class Norm2(Op):
    name = "norm2"

    def forward(self, ctx, t):
        norm = tc.norm2(t)
        ctx["x"], ctx["norm"] = t.array, norm
        return Tensor.wrap(np.asarray(norm, dtype=t.array.dtype))

    def backward(self, ctx, grad):
        x, norm = ctx["x"], ctx["norm"]
        if norm == 0.0:
            # subgradient at the origin
            return (np.zeros_like(x),)
        return (grad * x / x.dtype.type(norm),)


class SumAll(Op):
    name = "sum"

    def forward(self, ctx, t):
        ctx["shape"], ctx["dtype"] = t.shape, t.array.dtype
        return tc.sum_all(t)

    def backward(self, ctx, grad):
        return (np.full(ctx["shape"], grad, dtype=ctx["dtype"]),)


class Concat(Op):
    name = "concat"

    def forward(self, ctx, *tensors):
        ctx["shapes"] = [t.shape for t in tensors]
        return tc.concat(tensors)

    def backward(self, ctx, grad):
        grads, offset = [], 0
        for shape in ctx["shapes"]:
            size = int(np.prod(shape, dtype=np.int64))
            grads.append(grad[offset : offset + size].reshape(shape))
            offset += size
        return tuple(grads)


def contract(a: Var, b: Var, axes_a: Sequence[int], axes_b: Sequence[int]) -> Var:
    return a.tape.record(Contract(axes_a, axes_b), a, b)


def outer(a: Var, b: Var) -> Var:
    return contract(a, b, [], [])


def reshape(t: Var, new_shape: Sequence[int]) -> Var:
    return t.tape.record(Reshape(new_shape), t)


def flatten(t: Var) -> Var:
    return reshape(t, (t.value.size,))


def permute(t: Var, perm: Sequence[int]) -> Var:
    return t.tape.record(Permute(perm), t)


def relu(t: Var) -> Var:
    return t.tape.record(Relu(), t)


def add(a: Var, b: Var) -> Var:
    return a.tape.record(Add(), a, b)


def sub(a: Var, b: Var) -> Var:
    return a.tape.record(Sub(), a, b)


def mul(a: Var, b: Var) -> Var:
    return a.tape.record(Mul(), a, b)


def scale(t: Var, factor: float) -> Var:
    return t.tape.record(Scale(factor), t)


def norm2(t: Var) -> Var:
    return t.tape.record(Norm2(), t)


def sum_all(t: Var) -> Var:
    return t.tape.record(SumAll(), t)


def concat(parts: Sequence[Var]) -> Var:
    if not parts:
        raise ShapeError("concat needs at least one input")
    return parts[0].tape.record(Concat(), *parts)


# Finite-difference validation

LossFn = Callable[[Dict[str, Var]], Var]


def _evaluate(f: LossFn, values: Dict[str, np.ndarray]) -> Tuple[Tape, Var]:
    tape = Tape()
    params = {name: tape.leaf(name, Tensor(value, DType.F64)) for name, value in values.items()}
    return tape, f(params)


def gradcheck(
    f: LossFn,
    params: Dict[str, Union[np.ndarray, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-6,
    scope: str = "custom",
    kink_tol: float = 1e-2,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1.0,
) -> GradcheckReport:
    """Compare backward() against central differences (f(p+h) - f(p-h)) / 2h in f64.

    Relative error per entry is |analytic - numeric| / max(floor, |analytic|, |numeric|).
    With the default floor of 1 the error is absolute for gradients below 1 in
    magnitude; a tiny floor makes it purely relative.
    Entries where the one-sided slopes disagree by more than ``kink_tol`` sit on a
    non-differentiable point (e.g. ReLU at 0) and are skipped. Failures are
    reported, never raised.
    """
    if floor <= 0:
        raise ValueError(f"Relative error floor must be positive, got {floor}")
    values = {
        name: np.array(value.array if isinstance(value, Tensor) else value, dtype=np.float64)
        for name, value in params.items()
    }
    tape, loss = _evaluate(f, values)
    grads = tape.backward(loss)
    f0 = loss.item()

    def loss_at(name: str, flat_index: int, delta: float) -> float:
        shifted = dict(values)
        shifted[name] = values[name].copy()
        shifted[name].flat[flat_index] += delta
        return _evaluate(f, shifted)[1].item()

    rng = np.random.default_rng(seed)
    entries = []
    for name, value in values.items():
        analytic = grads[name].array.reshape(-1)
        indices = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            indices = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        worst, checked, skipped = 0.0, 0, 0
        for flat_index in indices:
            f_plus = loss_at(name, int(flat_index), h)
            f_minus = loss_at(name, int(flat_index), -h)
            slope_right, slope_left = (f_plus - f0) / h, (f0 - f_minus) / h
            if abs(slope_right - slope_left) > kink_tol * max(1.0, abs(slope_right), abs(slope_left)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            exact = float(analytic[flat_index])
            error = abs(exact - numeric) / max(floor, abs(exact), abs(numeric))
            worst = max(worst, error)
            checked += 1
        entry = GradcheckEntry(
            name=name, max_rel_error=worst, checked=checked, skipped=skipped, passed=worst <= tol
        )
        if not entry.passed:
            logger.warning(f"gradcheck {scope}/{name}: max relative error {worst:.3e} > {tol:.1e}")
        entries.append(entry)
    return GradcheckReport(scope=scope, tol=tol, entries=entries)
