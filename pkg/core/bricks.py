"""
Bricks: parametrized graph builders with hierarchical names.

A brick owns parameters (created by allocate()), may contain child bricks,
and builds annotated graph fragments when applied. Parameter variables
carry the owning brick's path, so variable_filter can find them by brick
name or ancestor path.

Usage:
    model = MLP("mlp", [2, 8, 2], ["tanh", "softmax"])
    model.allocate()
    initialize(model, Gaussian(0.1), rng=Rng.from_seed(1))
    probs = model.apply(graph.input("features", (None, 2)))
"""

from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from core import graph
from core.errors import BrickError
from core.graph import Role, Variable
from core.rng import Rng


# =============================================================================
# Initialization schemes
# =============================================================================

class InitScheme:
    """Fills a parameter of a given shape from an Rng (row-major draw order)."""

    def generate(self, rng: Rng, shape: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> Dict[str, object]:
        return {"kind": type(self).__name__.lower(), **vars(self)}


def _count(shape: Sequence[int]) -> int:
    return int(np.prod(shape, dtype=np.int64))


class Constant(InitScheme):
    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def generate(self, rng: Rng, shape: Sequence[int]) -> np.ndarray:
        return np.full(tuple(shape), self.value, dtype=np.float64)


class Uniform(InitScheme):
    """U(-width, width) from the 53-bit uniform."""

    def __init__(self, width: float):
        self.width = float(width)

    def generate(self, rng: Rng, shape: Sequence[int]) -> np.ndarray:
        values = [self.width * (2.0 * rng.uniform() - 1.0) for _ in range(_count(shape))]
        return np.array(values, dtype=np.float64).reshape(tuple(shape))


class Gaussian(InitScheme):
    def __init__(self, std: float):
        self.std = float(std)

    def generate(self, rng: Rng, shape: Sequence[int]) -> np.ndarray:
        values = [self.std * rng.normal() for _ in range(_count(shape))]
        return np.array(values, dtype=np.float64).reshape(tuple(shape))


class Sparse(InitScheme):
    """
    k non-zero entries per output column.

    For each column the rows come from a k-step Fisher-Yates prefix over
    range(rows); each chosen row then gets std * normal(), in choice order.
    """

    def __init__(self, k: int, std: float = 1.0):
        self.k = int(k)
        self.std = float(std)

    def generate(self, rng: Rng, shape: Sequence[int]) -> np.ndarray:
        if len(shape) != 2:
            raise BrickError(f"sparse init needs a matrix, got shape {list(shape)}")
        rows, cols = shape
        if self.k > rows:
            raise BrickError(f"sparse init wants {self.k} non-zeros per column, matrix has {rows} rows")
        out = np.zeros((rows, cols), dtype=np.float64)
        for col in range(cols):
            positions = list(range(rows))
            for i in range(self.k):
                j = i + rng.bounded(rows - i)
                positions[i], positions[j] = positions[j], positions[i]
            for row in positions[: self.k]:
                out[row, col] = self.std * rng.normal()
        return out


class Orthogonal(InitScheme):
    """Q of a Gaussian(1) square matrix, columns sign-fixed by diag(R)."""

    def generate(self, rng: Rng, shape: Sequence[int]) -> np.ndarray:
        if len(shape) != 2 or shape[0] != shape[1]:
            raise BrickError(f"orthogonal init needs a square matrix, got shape {list(shape)}")
        q, r = np.linalg.qr(Gaussian(1.0).generate(rng, shape))
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        return q * signs

    def describe(self) -> Dict[str, object]:
        return {"kind": "orthogonal"}


INIT_SCHEMES = {
    "constant": Constant,
    "uniform": Uniform,
    "gaussian": Gaussian,
    "sparse": Sparse,
    "orthogonal": Orthogonal,
}


def init_scheme_from_spec(spec: Dict[str, object]) -> InitScheme:
    """{"kind": "gaussian", "std": 0.1} -> Gaussian(0.1)"""
    params = dict(spec)
    kind = params.pop("kind", None)
    if kind not in INIT_SCHEMES:
        raise BrickError(f"unknown init scheme {kind!r}; have {sorted(INIT_SCHEMES)}")
    try:
        return INIT_SCHEMES[kind](**params)
    except TypeError as e:
        raise BrickError(f"bad parameters for {kind} init: {e}") from e


# =============================================================================
# Bricks
# =============================================================================

class Brick:
    """
    Base brick.

    Attributes:
        name: Brick name (one path segment)
        children: Child bricks
        parent: Enclosing brick, if any
        allocated: Parameters exist
        weights_init / biases_init: Optional per-brick scheme overrides
    """

    def __init__(self, name: str, children: Optional[List["Brick"]] = None):
        if not name or "/" in name or "." in name:
            raise BrickError(f"invalid brick name {name!r}")
        self.name = name
        self.parent: Optional[Brick] = None
        self.children: List[Brick] = []
        self.allocated = False
        self.params: Dict[str, Variable] = {}
        self.weights_init: Optional[InitScheme] = None
        self.biases_init: Optional[InitScheme] = None
        for child in children or []:
            self.add_child(child)

    def add_child(self, child: "Brick") -> "Brick":
        if self.allocated:
            raise BrickError(f"cannot add children to allocated brick {self.path}")
        if child.allocated:
            raise BrickError(f"brick {child.path} was allocated before being attached")
        if any(existing.name == child.name for existing in self.children):
            raise BrickError(f"brick {self.path} already has a child named {child.name!r}")
        child.parent = self
        self.children.append(child)
        return child

    @property
    def path(self) -> str:
        segments = []
        brick: Optional[Brick] = self
        while brick is not None:
            segments.append(brick.name)
            brick = brick.parent
        return "/" + "/".join(reversed(segments))

    # -------------------------------------------------------------------------
    # Parameters
    # -------------------------------------------------------------------------

    def _allocate(self) -> None:
        """Create this brick's own parameters (subclasses)."""

    def allocate(self) -> "Brick":
        """Create parameter storage for the whole subtree; idempotent."""
        if not self.allocated:
            self._allocate()
            self.allocated = True
        for child in self.children:
            child.allocate()
        return self

    def _add_parameter(self, name: str, shape: Sequence[int], role: Role) -> Variable:
        var = graph.parameter(
            name,
            shape,
            roles=[role],
            brick_path=self.path,
            value=np.zeros(tuple(shape), dtype=np.float64),
        )
        self.params[name] = var
        return var

    @property
    def parameters(self) -> List[Variable]:
        """Parameters of this brick and its descendants, in tree order."""
        found = list(self.params.values())
        for child in self.children:
            found.extend(child.parameters)
        return found

    def parameter_dict(self) -> Dict[str, Variable]:
        """{"<brick path>.<name>": variable} over the subtree."""
        found = {f"{self.path}.{name}": var for name, var in self.params.items()}
        for child in self.children:
            found.update(child.parameter_dict())
        return found

    def _initialize(self, rng: Rng, weights_init: InitScheme, biases_init: InitScheme) -> None:
        for var in self.params.values():
            scheme = biases_init if var.has_role(Role.BIAS) else weights_init
            var.value = scheme.generate(rng, var.shape)

    def initialize(self, rng: Rng, weights_init: InitScheme, biases_init: Optional[InitScheme] = None) -> None:
        if not self.allocated:
            raise BrickError(f"brick {self.path} must be allocated before initialization")
        weights = self.weights_init or weights_init
        biases = self.biases_init or biases_init or Constant(0.0)
        self._initialize(rng, weights, biases)
        for child in self.children:
            child.initialize(rng, weights, biases)

    # -------------------------------------------------------------------------
    # Application
    # -------------------------------------------------------------------------

    def _require_allocated(self) -> None:
        if not self.allocated:
            raise BrickError(f"brick {self.path} applied before allocation")

    def _input(self, x: Variable, name: str = "input_") -> Variable:
        return graph.annotate(x, Role.INPUT, self.path, name)

    def _output(self, y: Variable, name: str = "output") -> Variable:
        return graph.annotate(y, Role.OUTPUT, self.path, name)

    def apply(self, *args: Variable, **kwargs: Variable) -> Variable:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.path})"


class Linear(Brick):
    """y = x W + b with W [in_dim, out_dim] (WEIGHT) and b [out_dim] (BIAS)."""

    def __init__(self, name: str, input_dim: int, output_dim: int, use_bias: bool = True):
        super().__init__(name)
        if input_dim < 1 or output_dim < 1:
            raise BrickError(f"linear dims must be positive, got {input_dim}x{output_dim}")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.use_bias = use_bias

    def _allocate(self) -> None:
        self._add_parameter("W", (self.input_dim, self.output_dim), Role.WEIGHT)
        if self.use_bias:
            self._add_parameter("b", (self.output_dim,), Role.BIAS)

    @property
    def W(self) -> Variable:
        return self.params["W"]

    @property
    def b(self) -> Variable:
        return self.params["b"]

    def apply(self, x: Variable) -> Variable:
        self._require_allocated()
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise BrickError(f"{self.path} expects [batch, {self.input_dim}], got {list(x.shape)}")
        y = graph.matmul(self._input(x), self.W)
        if self.use_bias:
            y = graph.add(y, self.b)
        return self._output(y)


class Activation(Brick):
    """Parameter-free elementwise brick."""

    function = staticmethod(graph.identity)

    def apply(self, x: Variable) -> Variable:
        self._require_allocated()
        return self._output(type(self).function(self._input(x)))


class Identity(Activation):
    function = staticmethod(graph.identity)


class Tanh(Activation):
    function = staticmethod(graph.tanh)


class Logistic(Activation):
    function = staticmethod(graph.sigmoid)


class Rectifier(Activation):
    function = staticmethod(graph.relu)


class Softmax(Activation):
    function = staticmethod(graph.softmax)


ACTIVATIONS = {
    "identity": Identity,
    "linear": Identity,
    "tanh": Tanh,
    "sigmoid": Logistic,
    "relu": Rectifier,
    "softmax": Softmax,
}


class MLP(Brick):
    """
    Stack of Linear bricks, each followed by an activation brick.

    Children are named linear_<i> and <activation>_<i>.
    """

    def __init__(self, name: str, dims: Sequence[int], activations: Sequence[Union[str, None]]):
        if len(dims) < 2:
            raise BrickError("an MLP needs at least input and output dims")
        if len(activations) != len(dims) - 1:
            raise BrickError(f"{len(dims) - 1} layers need {len(dims) - 1} activations, got {len(activations)}")
        super().__init__(name)
        self.dims = list(dims)
        self.activations = [a or "identity" for a in activations]
        self.linears: List[Linear] = []
        self.activation_bricks: List[Activation] = []
        for i, (d_in, d_out, act) in enumerate(zip(self.dims[:-1], self.dims[1:], self.activations)):
            if act not in ACTIVATIONS:
                raise BrickError(f"unknown activation {act!r}; have {sorted(ACTIVATIONS)}")
            self.linears.append(self.add_child(Linear(f"linear_{i}", d_in, d_out)))
            self.activation_bricks.append(self.add_child(ACTIVATIONS[act](f"{act}_{i}")))

    def apply(self, x: Variable) -> Variable:
        self._require_allocated()
        h = self._input(x)
        for linear, activation in zip(self.linears, self.activation_bricks):
            h = activation.apply(linear.apply(h))
        return self._output(h)


class SimpleRecurrent(Brick):
    """
    h_t = m_t * tanh(x_t W_in + h_{t-1} W_rec + b) + (1 - m_t) * h_{t-1}, h_0 = 0.

    Unrolled over the static time axis of x [batch, time, input_dim]; the
    mask [batch, time] defaults to all ones. Returns every state,
    [batch, time, dim].
    """

    def __init__(self, name: str, dim: int, input_dim: Optional[int] = None):
        super().__init__(name)
        self.dim = dim
        self.input_dim = input_dim or dim
        self.recurrent_init: Optional[InitScheme] = None

    def _allocate(self) -> None:
        self._add_parameter("W_in", (self.input_dim, self.dim), Role.WEIGHT)
        self._add_parameter("W_rec", (self.dim, self.dim), Role.WEIGHT)
        self._add_parameter("b", (self.dim,), Role.BIAS)

    def _initialize(self, rng: Rng, weights_init: InitScheme, biases_init: InitScheme) -> None:
        self.params["W_in"].value = weights_init.generate(rng, self.params["W_in"].shape)
        recurrent = self.recurrent_init or weights_init
        self.params["W_rec"].value = recurrent.generate(rng, self.params["W_rec"].shape)
        self.params["b"].value = biases_init.generate(rng, self.params["b"].shape)

    def apply(self, x: Variable, mask: Optional[Variable] = None) -> Variable:
        self._require_allocated()
        if x.ndim != 3 or x.shape[2] != self.input_dim or x.shape[1] is None:
            raise BrickError(f"{self.path} expects [batch, time, {self.input_dim}], got {list(x.shape)}")
        steps = x.shape[1]
        if steps == 0:
            raise BrickError(f"{self.path} needs at least one time step")
        if mask is not None and (mask.ndim != 2 or mask.shape[1] != steps):
            raise BrickError(f"mask must be [batch, {steps}], got {list(mask.shape)}")

        x = self._input(x)
        if mask is not None:
            mask = self._input(mask, "mask")
        W_in, W_rec, b = self.params["W_in"], self.params["W_rec"], self.params["b"]

        states = []
        h: Optional[Variable] = None
        for t in range(steps):
            projected = graph.matmul(graph.take(x, t, axis=1), W_in)
            if h is None:
                h = graph.zeros_like(projected)
            candidate = graph.tanh(graph.add(graph.add(projected, graph.matmul(h, W_rec)), b))
            if mask is None:
                h = candidate
            else:
                m = graph.broadcast_like(graph.take(mask, t, axis=1), candidate, axis=1)
                keep = graph.scalar_affine(m, -1.0, 1.0)
                h = graph.add(graph.mul(m, candidate), graph.mul(keep, h))
            states.append(h)
        return self._output(graph.stack(states, axis=1), "states")


# =============================================================================
# Module-level helpers
# =============================================================================

def linear(name: str, in_dim: int, out_dim: int) -> Linear:
    return Linear(name, in_dim, out_dim)


def mlp(name: str, dims: Sequence[int], activations: Sequence[Union[str, None]]) -> MLP:
    return MLP(name, dims, activations)


def simple_recurrent(name: str, dim: int, input_dim: Optional[int] = None) -> SimpleRecurrent:
    return SimpleRecurrent(name, dim, input_dim)


def initialize(
    brick: Brick,
    weights_init: InitScheme,
    biases_init: Optional[InitScheme] = None,
    rng: Optional[Rng] = None,
    seed: int = 0,
) -> None:
    """Initialize every parameter of the subtree from one generator, in tree order."""
    brick.initialize(rng or Rng.from_seed(seed), weights_init, biases_init)


def parameter_count(brick: Brick) -> int:
    return sum(_count(var.shape) for var in brick.parameters)
