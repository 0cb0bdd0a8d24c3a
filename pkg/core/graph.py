"""
Annotated reverse-mode autodiff graphs.

Variables carry roles (INPUT, PARAMETER, WEIGHT, ...) and the path of the
brick that created them. A ComputationGraph is the set of everything
reachable from its outputs; it can be evaluated (forward), differentiated
symbolically (grad appends gradient subgraphs), queried (variable_filter)
and rewritten copy-on-write (apply_dropout, apply_weight_noise).

All arithmetic is float64. Shapes are static, except that the leading
(batch) axis may be None and is resolved when inputs are bound.

Usage:
    x = input("x", (None, 3))
    W = parameter("W", (3, 2), {Role.WEIGHT}, "/lin")
    cost = mean(square(matmul(x, W)))
    (gW,) = grad(cost, [W])
    values = forward(ComputationGraph([cost, gW]), {x: np.ones((4, 3))})
"""

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from core.errors import GraphError, ShapeError, UnboundInputError
from core.rng import Rng

Shape = Tuple[Optional[int], ...]


class Role(Enum):
    INPUT = "input"
    OUTPUT = "output"
    PARAMETER = "parameter"
    WEIGHT = "weight"
    BIAS = "bias"
    AUXILIARY = "auxiliary"
    COST = "cost"


_IMPLIED_ROLES = {Role.WEIGHT: Role.PARAMETER, Role.BIAS: Role.PARAMETER}

_ids: Iterator[int] = itertools.count(1)


@contextmanager
def id_scope() -> Iterator[None]:
    """
    Number the variables created inside the block from 1.

    Rebuilding a model inside a fresh scope reproduces its variable ids,
    and with them every (seed, id)-derived dropout or noise mask.
    """
    global _ids
    saved = _ids
    _ids = itertools.count(1)
    try:
        yield
    finally:
        _ids = saved


def _expand_roles(roles: Optional[Sequence[Role]]) -> Set[Role]:
    expanded = set(roles or ())
    for role in list(expanded):
        if role in _IMPLIED_ROLES:
            expanded.add(_IMPLIED_ROLES[role])
    return expanded


# =============================================================================
# Variables and nodes
# =============================================================================

@dataclass(eq=False)
class Node:
    """One op application; its single output is `output`."""
    op: str
    inputs: Tuple["Variable", ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    output: Optional["Variable"] = None


class Variable:
    """
    A graph value.

    Attributes:
        id: Unique id (creation order)
        shape: Static shape; only the leading axis may be None
        roles: Annotations (WEIGHT and BIAS imply PARAMETER)
        brick_path: Path of the owning brick, "" for free variables
        name: Human-readable name
        producer: Node computing this variable (None for leaves)
        leaf: "input", "parameter" or "constant" for leaves, else None
        value: Storage of parameters and constants
        gradient_of: The primal variable, for gradient variables
    """

    def __init__(
        self,
        shape: Sequence[Optional[int]],
        name: str = "",
        roles: Optional[Sequence[Role]] = None,
        brick_path: str = "",
        producer: Optional[Node] = None,
        leaf: Optional[str] = None,
        value: Optional[np.ndarray] = None,
    ):
        shape = tuple(None if d is None else int(d) for d in shape)
        if any(d is None for d in shape[1:]):
            raise ShapeError(f"only the leading axis may be unknown, got {shape}")
        if any(d is not None and d < 0 for d in shape):
            raise ShapeError(f"negative dimension in {shape}")
        self.id = next(_ids)
        self.shape: Shape = shape
        self.name = name
        self.roles: Set[Role] = _expand_roles(roles)
        self.brick_path = brick_path
        self.producer = producer
        self.leaf = leaf
        self.value = value
        self.gradient_of: Optional["Variable"] = None

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def add_role(self, role: Role) -> None:
        self.roles |= _expand_roles([role])

    def has_role(self, role: Role) -> bool:
        return role in self.roles

    def __hash__(self) -> int:
        return self.id

    def __repr__(self) -> str:
        roles = ",".join(sorted(r.value for r in self.roles))
        where = f" @{self.brick_path}" if self.brick_path else ""
        return f"Variable#{self.id}({self.name or '?'}, {list(self.shape)}, [{roles}]{where})"


# =============================================================================
# Op registry
# =============================================================================

GradFn = Callable[[Node, Variable], List[Optional[Variable]]]


@dataclass(frozen=True)
class OpDef:
    """
    Attributes:
        infer: shapes, attrs -> output shape (raises ShapeError)
        compute: values, attrs -> float64 array
        grad: node, output gradient -> per-input gradient (None = zero)
    """
    name: str
    infer: Callable[..., Shape]
    compute: Callable[..., np.ndarray]
    grad: Optional[GradFn]


OPS: Dict[str, OpDef] = {}


def _define(name: str, infer: Callable[..., Shape], compute: Callable[..., np.ndarray], grad: Optional[GradFn]) -> None:
    OPS[name] = OpDef(name, infer, compute, grad)


def _apply(op: str, inputs: Sequence[Variable], name: str = "", **attrs: Any) -> Variable:
    shape = OPS[op].infer([v.shape for v in inputs], attrs)
    node = Node(op, tuple(inputs), attrs)
    out = Variable(shape, name=name or op, producer=node)
    node.output = out
    return out


# --- shape rules -------------------------------------------------------------

def _same(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    return shapes[0]


def _elementwise(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    a, b = shapes
    if a == b:
        return a
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return a
    if len(a) == 1 and len(b) == 2 and b[1] == a[0]:
        return b
    raise ShapeError(f"incompatible shapes {list(a)} and {list(b)}")


def _equal_shapes(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    if len(set(shapes)) != 1:
        raise ShapeError(f"shapes must be equal, got {[list(s) for s in shapes]}")
    return shapes[0]


def _matmul_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    a, b = shapes
    if len(a) != 2 or len(b) != 2:
        raise ShapeError(f"matmul needs two matrices, got {list(a)} and {list(b)}")
    if a[1] != b[0] or b[0] is None:
        raise ShapeError(f"matmul inner dimensions differ: {list(a)} x {list(b)}")
    if b[1] is None:
        raise ShapeError("matmul right operand needs a known shape")
    return (a[0], b[1])


def _matmul_tn_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[0] != b[0]:
        raise ShapeError(f"cannot contract leading axes of {list(a)} and {list(b)}")
    return (a[1], b[1])


def _normalize_axis(axis: Optional[int], ndim: int) -> Optional[int]:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _reduce_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    (x,) = shapes
    axis = attrs["axis"]
    if axis is None:
        return ()
    if not 0 <= axis < len(x):
        raise ShapeError(f"axis {axis} out of range for shape {list(x)}")
    return x[:axis] + x[axis + 1 :]


def _broadcast_like_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    g, like = shapes
    if _reduce_shape([like], attrs) != g:
        raise ShapeError(f"cannot broadcast {list(g)} to {list(like)} along axis {attrs['axis']}")
    return like


def _probs_target(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    p, t = shapes
    if len(p) != 2:
        raise ShapeError(f"class probabilities must be [batch, classes], got {list(p)}")
    if t == p:
        return ()
    if t in ((p[0],), (p[0], 1)):
        return ()
    raise ShapeError(f"targets {list(t)} fit neither labels nor one-hot rows for {list(p)}")


# --- numeric helpers ---------------------------------------------------------

def _labels(target: np.ndarray, classes: int) -> np.ndarray:
    labels = target.reshape(-1).astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise GraphError(f"labels outside [0, {classes})")
    return labels


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _cross_entropy(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    if t.shape == p.shape:
        return np.asarray(-np.mean(np.sum(t * np.log(p), axis=1)))
    labels = _labels(t, p.shape[1])
    picked = p[np.arange(p.shape[0]), labels]
    return np.asarray(-np.mean(np.log(picked)))


def _cross_entropy_grad(p: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    batch = p.shape[0]
    if t.shape == p.shape:
        return -g * t / (batch * p)
    labels = _labels(t, p.shape[1])
    out = np.zeros_like(p)
    rows = np.arange(batch)
    out[rows, labels] = -g / (batch * p[rows, labels])
    return out


def _error_rate(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    labels = np.argmax(t, axis=1) if t.shape == p.shape else _labels(t, p.shape[1])
    return np.asarray(np.mean(np.argmax(p, axis=1) != labels), dtype=np.float64)


def _broadcast_like(g: np.ndarray, like: np.ndarray, axis: Optional[int], normalize: bool) -> np.ndarray:
    expanded = g if axis is None else np.expand_dims(g, axis)
    out = np.array(np.broadcast_to(expanded, like.shape), dtype=np.float64)
    if normalize:
        count = like.size if axis is None else like.shape[axis]
        out = out / count
    return out


def _take_grad(g: np.ndarray, like: np.ndarray, index: int, axis: int) -> np.ndarray:
    out = np.zeros(like.shape, dtype=np.float64)
    slicer = [slice(None)] * like.ndim
    slicer[axis] = index
    out[tuple(slicer)] = g
    return out


def _scalar_affine(x: np.ndarray, scale: float, shift: float) -> np.ndarray:
    y = x * scale
    if shift:
        y = y + shift
    return y


def _stack_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    if not shapes:
        raise ShapeError("stack needs at least one variable")
    first = _equal_shapes(shapes, attrs)
    axis = attrs["axis"]
    if not 0 <= axis <= len(first):
        raise ShapeError(f"stack axis {axis} out of range for shape {list(first)}")
    return first[:axis] + (len(shapes),) + first[axis:]


def _take_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    (x,) = shapes
    axis, index = attrs["axis"], attrs["index"]
    if not 0 <= axis < len(x):
        raise ShapeError(f"axis {axis} out of range for shape {list(x)}")
    if x[axis] is not None and not 0 <= index < x[axis]:
        raise ShapeError(f"index {index} out of range for axis of length {x[axis]}")
    return x[:axis] + x[axis + 1 :]


def _transpose_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    (x,) = shapes
    if len(x) != 2:
        raise ShapeError(f"transpose needs a matrix, got {list(x)}")
    if x[0] is None:
        raise ShapeError("cannot move an unknown batch axis to the trailing position")
    return (x[1], x[0])


def _scalar_shape(shapes: List[Shape], attrs: Dict[str, Any]) -> Shape:
    return ()


# --- gradient rules ------------------------------------------------------------

def _unbroadcast(g: Variable, target: Variable) -> Variable:
    """Sum a [batch, D] gradient back to a broadcast [D] operand."""
    if g.shape == target.shape:
        return g
    return sum(g, axis=0)


def _grad_add(node: Node, g: Variable) -> List[Optional[Variable]]:
    a, b = node.inputs
    return [_unbroadcast(g, a), _unbroadcast(g, b)]


def _grad_sub(node: Node, g: Variable) -> List[Optional[Variable]]:
    a, b = node.inputs
    return [_unbroadcast(g, a), _unbroadcast(scalar_affine(g, -1.0), b)]


def _grad_mul(node: Node, g: Variable) -> List[Optional[Variable]]:
    a, b = node.inputs
    return [_unbroadcast(mul(g, b), a), _unbroadcast(mul(g, a), b)]


def _grad_div(node: Node, g: Variable) -> List[Optional[Variable]]:
    a, b = node.inputs
    return [div(g, b), scalar_affine(div(mul(g, a), square(b)), -1.0)]


def _grad_matmul(node: Node, g: Variable) -> List[Optional[Variable]]:
    a, b = node.inputs
    return [matmul(g, transpose(b)), _apply("matmul_tn", [a, g])]


def _grad_matmul_tn(node: Node, g: Variable) -> List[Optional[Variable]]:
    a, b = node.inputs
    return [matmul(b, transpose(g)), matmul(a, g)]


def _grad_transpose(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [transpose(g)]


def _grad_tanh(node: Node, g: Variable) -> List[Optional[Variable]]:
    y = node.output
    return [mul(g, scalar_affine(square(y), -1.0, 1.0))]


def _grad_sigmoid(node: Node, g: Variable) -> List[Optional[Variable]]:
    y = node.output
    return [mul(g, mul(y, scalar_affine(y, -1.0, 1.0)))]


def _grad_relu(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [mul(g, step(node.inputs[0]))]


def _grad_softmax(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [_apply("softmax_grad", [node.output, g])]


def _grad_log(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [div(g, node.inputs[0])]


def _grad_square(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [mul(g, scalar_affine(node.inputs[0], 2.0))]


def _grad_sum(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [broadcast_like(g, node.inputs[0], node.attrs["axis"])]


def _grad_mean(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [broadcast_like(g, node.inputs[0], node.attrs["axis"], normalize=True)]


def _grad_broadcast_like(node: Node, g: Variable) -> List[Optional[Variable]]:
    reduce = mean if node.attrs["normalize"] else sum
    return [reduce(g, axis=node.attrs["axis"]), None]


def _grad_scalar_affine(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [scalar_affine(g, node.attrs["scale"])]


def _grad_identity(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [g]


def _grad_take(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [_apply("take_grad", [g, node.inputs[0]], index=node.attrs["index"], axis=node.attrs["axis"])]


def _grad_take_grad(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [take(g, node.attrs["index"], node.attrs["axis"]), None]


def _grad_stack(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [take(g, i, node.attrs["axis"]) for i in range(len(node.inputs))]


def _grad_cross_entropy(node: Node, g: Variable) -> List[Optional[Variable]]:
    p, t = node.inputs
    return [_apply("cross_entropy_grad", [p, t, g]), None]


def _grad_constant_zero(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [None] * len(node.inputs)


def _no_second_order(node: Node, g: Variable) -> List[Optional[Variable]]:
    raise GraphError(f"second-order gradients through {node.op!r} are not supported")


_define("add", _elementwise, lambda v, a: v[0] + v[1], _grad_add)
_define("sub", _elementwise, lambda v, a: v[0] - v[1], _grad_sub)
_define("mul", _elementwise, lambda v, a: v[0] * v[1], _grad_mul)
_define("div", _equal_shapes, lambda v, a: v[0] / v[1], _grad_div)
_define("matmul", _matmul_shape, lambda v, a: v[0] @ v[1], _grad_matmul)
_define("matmul_tn", _matmul_tn_shape, lambda v, a: v[0].T @ v[1], _grad_matmul_tn)
_define("transpose", _transpose_shape, lambda v, a: np.ascontiguousarray(v[0].T), _grad_transpose)
_define("tanh", _same, lambda v, a: np.tanh(v[0]), _grad_tanh)
_define("sigmoid", _same, lambda v, a: 1.0 / (1.0 + np.exp(-v[0])), _grad_sigmoid)
_define("relu", _same, lambda v, a: np.maximum(v[0], 0.0), _grad_relu)
_define("step", _same, lambda v, a: (v[0] > 0).astype(np.float64), _grad_constant_zero)
_define("softmax", _same, lambda v, a: _softmax(v[0]), _grad_softmax)
_define(
    "softmax_grad",
    _equal_shapes,
    lambda v, a: v[0] * (v[1] - np.sum(v[1] * v[0], axis=-1, keepdims=True)),
    _no_second_order,
)
_define("log", _same, lambda v, a: np.log(v[0]), _grad_log)
_define("square", _same, lambda v, a: v[0] * v[0], _grad_square)
_define("sum", _reduce_shape, lambda v, a: np.asarray(np.sum(v[0], axis=a["axis"]), dtype=np.float64), _grad_sum)
_define("mean", _reduce_shape, lambda v, a: np.asarray(np.mean(v[0], axis=a["axis"]), dtype=np.float64), _grad_mean)
_define(
    "broadcast_like",
    _broadcast_like_shape,
    lambda v, a: _broadcast_like(v[0], v[1], a["axis"], a["normalize"]),
    _grad_broadcast_like,
)
_define("scalar_affine", _same, lambda v, a: _scalar_affine(v[0], a["scale"], a["shift"]), _grad_scalar_affine)
_define("identity", _same, lambda v, a: v[0], _grad_identity)
_define("zeros_like", _same, lambda v, a: np.zeros(v[0].shape, dtype=np.float64), _grad_constant_zero)
_define("take", _take_shape, lambda v, a: np.take(v[0], a["index"], axis=a["axis"]), _grad_take)
_define(
    "take_grad",
    lambda s, a: s[1],
    lambda v, a: _take_grad(v[0], v[1], a["index"], a["axis"]),
    _grad_take_grad,
)
_define("stack", _stack_shape, lambda v, a: np.stack(v, axis=a["axis"]), _grad_stack)
_define("cross_entropy", _probs_target, lambda v, a: _cross_entropy(v[0], v[1]), _grad_cross_entropy)
_define(
    "cross_entropy_grad",
    lambda s, a: s[0],
    lambda v, a: _cross_entropy_grad(v[0], v[1], v[2]),
    _no_second_order,
)
_define("error_rate", _probs_target, lambda v, a: _error_rate(v[0], v[1]), _grad_constant_zero)


# =============================================================================
# Builders
# =============================================================================

def input(name: str, shape: Sequence[Optional[int]]) -> Variable:  # noqa: A001
    """A graph input, bound at forward time (leading axis may be None)."""
    return Variable(shape, name=name, roles=[Role.INPUT], leaf="input")


def parameter(
    name: str,
    shape: Sequence[int],
    roles: Optional[Sequence[Role]] = None,
    brick_path: str = "",
    value: Optional[np.ndarray] = None,
) -> Variable:
    """A leaf bound to storage; always carries PARAMETER."""
    if any(d is None for d in shape):
        raise ShapeError(f"parameter {name!r} needs a fully known shape")
    roles = set(roles or ()) | {Role.PARAMETER}
    if value is not None:
        value = np.array(value, dtype=np.float64)
        if value.shape != tuple(shape):
            raise ShapeError(f"parameter {name!r} storage {value.shape} != {tuple(shape)}")
    return Variable(shape, name=name, roles=roles, brick_path=brick_path, leaf="parameter", value=value)


def constant(value: Union[float, np.ndarray], name: str = "constant") -> Variable:
    array = np.array(value, dtype=np.float64)
    return Variable(array.shape, name=name, leaf="constant", value=array)


def add(a: Variable, b: Variable) -> Variable:
    return _apply("add", [a, b])


def sub(a: Variable, b: Variable) -> Variable:
    return _apply("sub", [a, b])


def mul(a: Variable, b: Variable) -> Variable:
    return _apply("mul", [a, b])


def div(a: Variable, b: Variable) -> Variable:
    return _apply("div", [a, b])


def matmul(a: Variable, b: Variable) -> Variable:
    return _apply("matmul", [a, b])


def transpose(x: Variable) -> Variable:
    return _apply("transpose", [x])


def tanh(x: Variable) -> Variable:
    return _apply("tanh", [x])


def sigmoid(x: Variable) -> Variable:
    return _apply("sigmoid", [x])


def relu(x: Variable) -> Variable:
    return _apply("relu", [x])


def step(x: Variable) -> Variable:
    """1.0 where x > 0, else 0.0 (not differentiable)."""
    return _apply("step", [x])


def softmax(x: Variable) -> Variable:
    """Softmax over the last axis."""
    return _apply("softmax", [x])


def log(x: Variable) -> Variable:
    return _apply("log", [x])


def square(x: Variable) -> Variable:
    return _apply("square", [x])


def sum(x: Variable, axis: Optional[int] = None) -> Variable:  # noqa: A001
    return _apply("sum", [x], axis=_normalize_axis(axis, x.ndim))


def mean(x: Variable, axis: Optional[int] = None) -> Variable:
    return _apply("mean", [x], axis=_normalize_axis(axis, x.ndim))


def broadcast_like(g: Variable, like: Variable, axis: Optional[int] = None, normalize: bool = False) -> Variable:
    """Repeat g along `axis` (every axis when None) to the shape of `like`."""
    return _apply("broadcast_like", [g, like], axis=axis, normalize=normalize)


def scalar_affine(x: Variable, scale: float, shift: float = 0.0) -> Variable:
    """x * scale + shift."""
    return _apply("scalar_affine", [x], scale=float(scale), shift=float(shift))


def identity(x: Variable, name: str = "") -> Variable:
    return _apply("identity", [x], name=name or x.name)


def zeros_like(x: Variable) -> Variable:
    return _apply("zeros_like", [x])


def take(x: Variable, index: int, axis: int) -> Variable:
    """x[..., index, ...] along axis (the axis is removed)."""
    return _apply("take", [x], index=int(index), axis=int(axis))


def stack(variables: Sequence[Variable], axis: int = 0) -> Variable:
    return _apply("stack", list(variables), axis=int(axis))


def cross_entropy(probs: Variable, target: Variable) -> Variable:
    """
    Mean negative log-likelihood over the batch.

    target is either integer labels shaped [batch] or [batch, 1], or
    one-hot rows shaped like probs.
    """
    return _apply("cross_entropy", [probs, target])


def mse(prediction: Variable, target: Variable) -> Variable:
    """Mean squared error over every element."""
    out = mean(square(sub(prediction, target)))
    out.name = "mse"
    return out


def error_rate(probs: Variable, target: Variable) -> Variable:
    """Fraction of rows whose argmax misses the target (no gradient)."""
    return _apply("error_rate", [probs, target])


def annotate(
    x: Variable,
    role: Role,
    brick_path: str = "",
    name: str = "",
) -> Variable:
    """An identity copy of x carrying role and brick path."""
    out = identity(x, name=name)
    out.add_role(role)
    out.brick_path = brick_path
    return out


# =============================================================================
# Computation graph
# =============================================================================

def _topological(outputs: Sequence[Variable]) -> List[Variable]:
    order: List[Variable] = []
    seen: Set[int] = set()
    for root in outputs:
        if root.id in seen:
            continue
        stack_: List[Tuple[Variable, bool]] = [(root, False)]
        while stack_:
            var, expanded = stack_.pop()
            if expanded:
                order.append(var)
                continue
            if var.id in seen:
                continue
            seen.add(var.id)
            stack_.append((var, True))
            if var.producer is not None:
                for parent in reversed(var.producer.inputs):
                    if parent.id not in seen:
                        stack_.append((parent, False))
    return order


class ComputationGraph:
    """
    Everything reachable from `outputs`, in topological order.

    Attributes:
        outputs: Output variables
        variables: All reachable variables, inputs before their consumers
        parameters: Reachable PARAMETER leaves, in id order
        inputs: Reachable input leaves, in id order
    """

    def __init__(self, outputs: Sequence[Variable]):
        self.outputs: List[Variable] = list(outputs)
        self.variables: List[Variable] = _topological(self.outputs)
        self._ids = {v.id for v in self.variables}
        self.parameters: List[Variable] = sorted(
            (v for v in self.variables if v.leaf == "parameter"), key=lambda v: v.id
        )
        self.inputs: List[Variable] = sorted(
            (v for v in self.variables if v.leaf == "input"), key=lambda v: v.id
        )

    def __contains__(self, variable: Variable) -> bool:
        return variable.id in self._ids

    @property
    def nodes(self) -> List[Node]:
        return [v.producer for v in self.variables if v.producer is not None]

    def replace(self, replacements: Mapping[Variable, Variable]) -> "ComputationGraph":
        """
        Copy-on-write rewrite: every node depending on a replaced variable is
        cloned with the replacement wired in; the rest is shared.
        """
        for old in replacements:
            if old not in self:
                raise GraphError(f"{old!r} is not part of this graph")
        mapped: Dict[int, Variable] = {old.id: new for old, new in replacements.items()}

        for var in self.variables:
            if var.id in mapped or var.producer is None:
                continue
            node = var.producer
            if not any(parent.id in mapped for parent in node.inputs):
                continue
            inputs = [mapped.get(parent.id, parent) for parent in node.inputs]
            clone = _apply(node.op, inputs, name=var.name, **node.attrs)
            clone.roles = set(var.roles)
            clone.brick_path = var.brick_path
            clone.gradient_of = var.gradient_of
            mapped[var.id] = clone

        return ComputationGraph([mapped.get(out.id, out) for out in self.outputs])

    def __repr__(self) -> str:
        return (
            f"ComputationGraph({len(self.outputs)} outputs, {len(self.variables)} variables, "
            f"{len(self.parameters)} parameters)"
        )


Bindings = Mapping[Union[Variable, str], Any]


def _check_bound_shape(var: Variable, value: np.ndarray) -> None:
    if value.ndim != var.ndim or any(
        d is not None and d != actual for d, actual in zip(var.shape, value.shape)
    ):
        raise ShapeError(f"{var.name!r} declared {list(var.shape)}, bound to {list(value.shape)}")


def forward(
    cg: ComputationGraph,
    bindings: Optional[Bindings] = None,
) -> Dict[Variable, np.ndarray]:
    """
    Evaluate the graph once, in topological order.

    Args:
        cg: Graph to evaluate
        bindings: Values for inputs (and optionally parameters), keyed by
            Variable or by name; parameters default to their storage

    Returns:
        {output variable: value}

    Raises:
        UnboundInputError: an input (or storage-less parameter) is unbound
        ShapeError: a bound value disagrees with the declared shape
    """
    bindings = bindings or {}
    by_name = {k: v for k, v in bindings.items() if isinstance(k, str)}
    values: Dict[int, np.ndarray] = {}

    for var in cg.variables:
        if var.producer is not None:
            node = var.producer
            args = [values[parent.id] for parent in node.inputs]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                values[var.id] = np.asarray(OPS[node.op].compute(args, node.attrs), dtype=np.float64)
            continue

        if var in bindings:
            raw = bindings[var]
        elif var.leaf == "input" and var.name in by_name:
            raw = by_name[var.name]
        elif var.value is not None:
            raw = var.value
        else:
            raise UnboundInputError(f"{var.leaf} {var.name!r} (#{var.id}) is not bound")
        value = np.asarray(raw, dtype=np.float64)
        _check_bound_shape(var, value)
        values[var.id] = value

    return {out: values[out.id] for out in cg.outputs}


def evaluate(outputs: Sequence[Variable], bindings: Optional[Bindings] = None) -> List[np.ndarray]:
    """Convenience: forward over a throwaway graph, results in output order."""
    cg = ComputationGraph(outputs)
    result = forward(cg, bindings)
    return [result[out] for out in cg.outputs]


# =============================================================================
# Gradients
# =============================================================================

def grad(cost: Variable, wrt: Sequence[Variable]) -> List[Variable]:
    """
    Symbolic reverse-mode gradients of a scalar cost.

    Each returned variable is AUXILIARY, named "grad_<name>", and links to
    its primal through gradient_of.

    Raises:
        GraphError: cost is not a scalar, or a wrt variable is unreachable
    """
    if cost.shape != ():
        raise GraphError(f"cost must be a scalar, got shape {list(cost.shape)}")
    order = _topological([cost])
    reachable = {v.id for v in order}
    for target in wrt:
        if target.id not in reachable:
            raise GraphError(f"{target!r} does not influence the cost")

    wanted = {v.id for v in wrt}
    depends: Dict[int, bool] = {}
    for var in order:
        depends[var.id] = var.id in wanted or (
            var.producer is not None and any(depends[p.id] for p in var.producer.inputs)
        )

    grads: Dict[int, Variable] = {cost.id: constant(1.0, name="one")}
    for var in reversed(order):
        g = grads.get(var.id)
        if g is None or var.producer is None or not depends[var.id]:
            continue
        node = var.producer
        rule = OPS[node.op].grad
        contributions = rule(node, g) if rule is not None else [None] * len(node.inputs)
        for parent, contribution in zip(node.inputs, contributions):
            if contribution is None or not depends[parent.id]:
                continue
            existing = grads.get(parent.id)
            grads[parent.id] = contribution if existing is None else add(existing, contribution)

    results = []
    for target in wrt:
        g = grads.get(target.id)
        if g is None:
            g = zeros_like(target)
        out = identity(g, name=f"grad_{target.name}")
        out.add_role(Role.AUXILIARY)
        out.gradient_of = target
        results.append(out)
    return results


# =============================================================================
# Queries
# =============================================================================

def _path_under(path: str, prefix: str) -> bool:
    prefix = prefix.rstrip("/")
    if not prefix:
        return True
    return path == prefix or path.startswith(prefix + "/")


def variable_filter(
    cg: Union[ComputationGraph, Sequence[Variable]],
    roles: Optional[Sequence[Role]] = None,
    brick_name: Optional[str] = None,
    ancestor_path_prefix: Optional[str] = None,
) -> List[Variable]:
    """
    Variables matching every given criterion, in id order.

    Args:
        roles: At least one of these roles
        brick_name: Last segment of the brick path
        ancestor_path_prefix: Brick path lies under this path (whole segments)
    """
    candidates = cg.variables if isinstance(cg, ComputationGraph) else list(cg)
    wanted_roles = set(roles) if roles is not None else None
    matched = []
    for var in candidates:
        if wanted_roles is not None and not var.roles & wanted_roles:
            continue
        if brick_name is not None and (not var.brick_path or var.brick_path.rsplit("/", 1)[-1] != brick_name):
            continue
        if ancestor_path_prefix is not None and (
            not var.brick_path or not _path_under(var.brick_path, ancestor_path_prefix)
        ):
            continue
        matched.append(var)
    return sorted(matched, key=lambda v: v.id)


# =============================================================================
# Rewrites
# =============================================================================

def dropout_mask(shape: Tuple[int, ...], p: float, rng: Rng) -> np.ndarray:
    """Elementwise keep mask (1.0 with probability 1-p), row-major draw order."""
    keep = 1.0 - p
    count = int(np.prod(shape, dtype=np.int64))
    return np.array([1.0 if rng.uniform() < keep else 0.0 for _ in range(count)], dtype=np.float64).reshape(shape)


def gaussian_noise(shape: Tuple[int, ...], sigma: float, rng: Rng) -> np.ndarray:
    """sigma * N(0, 1) per element, row-major draw order."""
    count = int(np.prod(shape, dtype=np.int64))
    return np.array([sigma * rng.normal() for _ in range(count)], dtype=np.float64).reshape(shape)


def _grad_masked_scale(node: Node, g: Variable) -> List[Optional[Variable]]:
    return [_apply("masked_scale", [g, node.inputs[1]], keep=node.attrs["keep"]), None]


# Stochastic ops draw from the generator in their attrs on every forward
# pass, sized by the runtime value of their input.
_define("dropout_mask", _same, lambda v, a: dropout_mask(v[0].shape, a["p"], a["rng"]), _grad_constant_zero)
_define("masked_scale", lambda s, a: s[0], lambda v, a: v[0] * v[1] / a["keep"], _grad_masked_scale)
_define("gaussian_noise", _same, lambda v, a: gaussian_noise(v[0].shape, a["sigma"], a["rng"]), _grad_constant_zero)


def _generator_key(kind: str, var: Variable, seed: int) -> str:
    where = f"{var.brick_path}.{var.name}" if var.brick_path else var.name
    return f"{kind}:{where}:{seed}"


def generators(cg: ComputationGraph) -> Dict[str, Rng]:
    """
    The generators of every stochastic op in the graph, keyed by rewrite
    kind, variable path and seed ("#2", "#3", ... for repeated keys).

    They advance on each forward pass, so a main loop saves them with its
    snapshots.
    """
    found: Dict[str, Rng] = {}
    for node in cg.nodes:
        rng = node.attrs.get("rng")
        if rng is None:
            continue
        key, n = node.attrs["key"], 1
        while key in found and found[key] is not rng:
            n += 1
            key = f"{node.attrs['key']}#{n}"
        found[key] = rng
    return found


def apply_dropout(cg: ComputationGraph, variables: Sequence[Variable], p: float, seed: int) -> ComputationGraph:
    """
    Replace each variable v by v * mask / (1 - p).

    A fresh mask is drawn on every forward pass, shaped like the bound value
    of v, from a generator seeded by Rng.derive(seed, v.id). The batch axis
    may be unknown.
    """
    if not 0.0 <= p < 1.0:
        raise GraphError(f"dropout probability must lie in [0, 1), got {p}")
    replacements = {}
    for var in variables:
        if var not in cg:
            raise GraphError(f"{var!r} is not part of this graph")
        mask = _apply(
            "dropout_mask",
            [var],
            name=f"{var.name}_dropout_mask",
            p=p,
            rng=Rng.derive(seed, var.id),
            key=_generator_key("dropout", var, seed),
        )
        replacements[var] = _apply("masked_scale", [var, mask], name=f"{var.name}_dropout", keep=1.0 - p)
    return cg.replace(replacements)


def apply_weight_noise(
    cg: ComputationGraph, variables: Sequence[Variable], sigma: float, seed: int
) -> ComputationGraph:
    """Replace each variable v by v + sigma * eps, eps ~ N(0, 1) drawn per forward pass from Rng.derive(seed, v.id)."""
    if sigma < 0:
        raise GraphError(f"noise sigma must be >= 0, got {sigma}")
    replacements = {}
    for var in variables:
        if var not in cg:
            raise GraphError(f"{var!r} is not part of this graph")
        noise = _apply(
            "gaussian_noise",
            [var],
            name=f"{var.name}_noise",
            sigma=sigma,
            rng=Rng.derive(seed, var.id),
            key=_generator_key("weight_noise", var, seed),
        )
        noisy = add(var, noise)
        noisy.name = f"{var.name}_noisy"
        replacements[var] = noisy
    return cg.replace(replacements)


def l2_penalty(variables: Sequence[Variable], coefficient: float) -> Variable:
    """coefficient * sum of squares of every variable, as a COST scalar."""
    if coefficient < 0:
        raise GraphError(f"penalty coefficient must be >= 0, got {coefficient}")
    if not variables:
        penalty = constant(0.0, name="l2_penalty")
    else:
        total = None
        for var in variables:
            term = sum(square(var))
            total = term if total is None else add(total, term)
        penalty = scalar_affine(total, coefficient)
        penalty.name = "l2_penalty"
    penalty.add_role(Role.COST)
    return penalty
