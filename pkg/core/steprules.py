"""
Step rules: composable transformations from gradients to parameter steps.

A rule chain is applied left to right. The first rule sees the raw
gradient; every rule maps (proposed step, own buffers) to a new step. The
caller subtracts the final step from the parameter.

compute_steps is a pure transition: it never mutates the state it is given.

Usage:
    chain = [GradientClipping(5.0), Adam()]
    state = init_state(chain, {"/mlp/linear_0.W": (2, 3)})
    steps, state = compute_steps(chain, state, grads)
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import STEP_RULE_DEFAULTS
from core.errors import StepRuleError
from core.graph import Role, Variable
from core.structured_logging import get_logger

logger = get_logger(__name__)

Tensors = Dict[str, np.ndarray]


def global_norm(tensors: Sequence[np.ndarray]) -> float:
    """L2 norm over every element of every tensor (compensated summation)."""
    return math.sqrt(math.fsum(float(x) * float(x) for t in tensors for x in np.asarray(t).ravel()))


class StepRule:
    """
    Base rule.

    Attributes:
        kind: Registry name
        buffers: Names of the per-parameter buffers the rule keeps
        uses_time: Whether the rule reads the shared timestep
    """

    kind = ""
    buffers: Tuple[str, ...] = ()
    uses_time = False
    hyperparameters: Tuple[str, ...] = ()

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, **{name: getattr(self, name) for name in self.hyperparameters}}

    def __repr__(self) -> str:
        params = ", ".join(f"{name}={getattr(self, name)}" for name in self.hyperparameters)
        return f"{type(self).__name__}({params})"


def _default(kind: str, name: str, value: Optional[float]) -> float:
    return float(STEP_RULE_DEFAULTS[kind][name] if value is None else value)


class Scale(StepRule):
    """s' = learning_rate * s"""

    kind = "scale"
    hyperparameters = ("learning_rate",)

    def __init__(self, learning_rate: Optional[float] = None):
        self.learning_rate = _default(self.kind, "learning_rate", learning_rate)

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        return {path: self.learning_rate * s for path, s in steps.items()}


class Momentum(StepRule):
    """v := momentum * v + s; s' = v"""

    kind = "momentum"
    buffers = ("velocity",)
    hyperparameters = ("momentum",)

    def __init__(self, momentum: Optional[float] = None):
        self.momentum = _default(self.kind, "momentum", momentum)

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        velocity = buffers["velocity"]
        out = {}
        for path, s in steps.items():
            velocity[path] = self.momentum * velocity[path] + s
            out[path] = velocity[path]
        return out


class GradientClipping(StepRule):
    """Rescale all steps jointly when their global L2 norm exceeds threshold."""

    kind = "gradient_clipping"
    hyperparameters = ("threshold",)

    def __init__(self, threshold: float):
        if threshold <= 0:
            raise StepRuleError(f"clipping threshold must be > 0, got {threshold}")
        self.threshold = float(threshold)

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        norm = global_norm([steps[path] for path in sorted(steps)])
        if norm <= self.threshold:
            return dict(steps)
        return {path: s * self.threshold / norm for path, s in steps.items()}


class AdaGrad(StepRule):
    """a += s^2; s' = lr * s / (sqrt(a) + eps)"""

    kind = "adagrad"
    buffers = ("sum_squares",)
    hyperparameters = ("learning_rate", "epsilon")

    def __init__(self, learning_rate: Optional[float] = None, epsilon: Optional[float] = None):
        self.learning_rate = _default(self.kind, "learning_rate", learning_rate)
        self.epsilon = _default(self.kind, "epsilon", epsilon)

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        acc = buffers["sum_squares"]
        out = {}
        for path, s in steps.items():
            acc[path] = acc[path] + s * s
            out[path] = self.learning_rate * s / (np.sqrt(acc[path]) + self.epsilon)
        return out


class RMSProp(StepRule):
    """a := rho * a + (1 - rho) * s^2; s' = lr * s / (sqrt(a) + eps)"""

    kind = "rmsprop"
    buffers = ("mean_square",)
    hyperparameters = ("learning_rate", "decay_rate", "epsilon")

    def __init__(
        self,
        learning_rate: Optional[float] = None,
        decay_rate: Optional[float] = None,
        epsilon: Optional[float] = None,
    ):
        self.learning_rate = _default(self.kind, "learning_rate", learning_rate)
        self.decay_rate = _default(self.kind, "decay_rate", decay_rate)
        self.epsilon = _default(self.kind, "epsilon", epsilon)

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        acc = buffers["mean_square"]
        rho = self.decay_rate
        out = {}
        for path, s in steps.items():
            acc[path] = rho * acc[path] + (1.0 - rho) * (s * s)
            out[path] = self.learning_rate * s / (np.sqrt(acc[path]) + self.epsilon)
        return out


class AdaDelta(StepRule):
    """
    ag := rho * ag + (1 - rho) * s^2
    d = s * sqrt(ad + eps) / sqrt(ag + eps)
    ad := rho * ad + (1 - rho) * d^2
    s' = d
    """

    kind = "adadelta"
    buffers = ("mean_square_grad", "mean_square_delta")
    hyperparameters = ("decay_rate", "epsilon")

    def __init__(self, decay_rate: Optional[float] = None, epsilon: Optional[float] = None):
        self.decay_rate = _default(self.kind, "decay_rate", decay_rate)
        self.epsilon = _default(self.kind, "epsilon", epsilon)

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        grad_acc = buffers["mean_square_grad"]
        delta_acc = buffers["mean_square_delta"]
        rho, eps = self.decay_rate, self.epsilon
        out = {}
        for path, s in steps.items():
            grad_acc[path] = rho * grad_acc[path] + (1.0 - rho) * (s * s)
            d = s * np.sqrt(delta_acc[path] + eps) / np.sqrt(grad_acc[path] + eps)
            delta_acc[path] = rho * delta_acc[path] + (1.0 - rho) * (d * d)
            out[path] = d
        return out


class Adam(StepRule):
    """
    m := b1 m + (1 - b1) s; v := b2 v + (1 - b2) s^2
    s' = lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """

    kind = "adam"
    buffers = ("first_moment", "second_moment")
    uses_time = True
    hyperparameters = ("learning_rate", "beta1", "beta2", "epsilon")

    def __init__(
        self,
        learning_rate: Optional[float] = None,
        beta1: Optional[float] = None,
        beta2: Optional[float] = None,
        epsilon: Optional[float] = None,
    ):
        self.learning_rate = _default(self.kind, "learning_rate", learning_rate)
        self.beta1 = _default(self.kind, "beta1", beta1)
        self.beta2 = _default(self.kind, "beta2", beta2)
        self.epsilon = _default(self.kind, "epsilon", epsilon)

    def compute(self, steps: Tensors, buffers: Dict[str, Tensors], t: int) -> Tensors:
        m_acc, v_acc = buffers["first_moment"], buffers["second_moment"]
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** t
        correction2 = 1.0 - b2 ** t
        out = {}
        for path, s in steps.items():
            m_acc[path] = b1 * m_acc[path] + (1.0 - b1) * s
            v_acc[path] = b2 * v_acc[path] + (1.0 - b2) * (s * s)
            out[path] = self.learning_rate * (m_acc[path] / correction1) / (
                np.sqrt(v_acc[path] / correction2) + self.epsilon
            )
        return out


STEP_RULES = {
    rule.kind: rule
    for rule in (Scale, Momentum, GradientClipping, AdaGrad, RMSProp, AdaDelta, Adam)
}


def rule_from_spec(spec: Dict[str, Any]) -> StepRule:
    """{"kind": "adam", "learning_rate": 0.01} -> Adam(learning_rate=0.01)"""
    params = dict(spec)
    kind = params.pop("kind", None)
    if kind not in STEP_RULES:
        raise StepRuleError(f"unknown step rule {kind!r}; have {sorted(STEP_RULES)}")
    try:
        return STEP_RULES[kind](**params)
    except TypeError as e:
        raise StepRuleError(f"bad parameters for {kind}: {e}") from e


def describe_chain(chain: Sequence[StepRule]) -> List[Dict[str, Any]]:
    return [rule.describe() for rule in chain]


# =============================================================================
# State
# =============================================================================

@dataclass
class StepRuleState:
    """
    Buffers of a rule chain.

    Attributes:
        shapes: Registered parameter paths and their shapes
        kinds: Rule kinds of the chain the buffers belong to
        buffers: Per rule (chain order): buffer name -> path -> tensor
        t: Shared timestep, +1 per compute_steps call when a rule uses it
    """
    shapes: Dict[str, Tuple[int, ...]]
    kinds: List[str]
    buffers: List[Dict[str, Tensors]] = field(default_factory=list)
    t: int = 0

    def copy(self) -> "StepRuleState":
        return StepRuleState(
            shapes=dict(self.shapes),
            kinds=list(self.kinds),
            buffers=[
                {name: {path: array.copy() for path, array in per_path.items()} for name, per_path in rule.items()}
                for rule in self.buffers
            ],
            t=self.t,
        )

    def to_tree(self) -> Dict[str, Any]:
        """JSON-like tree whose leaves may be numpy arrays."""
        return {
            "t": self.t,
            "kinds": list(self.kinds),
            "shapes": {path: list(shape) for path, shape in self.shapes.items()},
            "buffers": [
                {name: dict(per_path) for name, per_path in rule.items()} for rule in self.buffers
            ],
        }

    @classmethod
    def from_tree(cls, tree: Dict[str, Any]) -> "StepRuleState":
        try:
            return cls(
                shapes={path: tuple(shape) for path, shape in tree["shapes"].items()},
                kinds=list(tree["kinds"]),
                buffers=[
                    {
                        name: {path: np.array(array, dtype=np.float64) for path, array in per_path.items()}
                        for name, per_path in rule.items()
                    }
                    for rule in tree["buffers"]
                ],
                t=int(tree["t"]),
            )
        except (KeyError, TypeError, AttributeError) as e:
            raise StepRuleError(f"malformed step rule state: {e}") from e

    def equals(self, other: "StepRuleState") -> bool:
        """Bitwise equality of every buffer."""
        if (self.shapes, self.kinds, self.t) != (other.shapes, other.kinds, other.t):
            return False
        if len(self.buffers) != len(other.buffers):
            return False
        for mine, theirs in zip(self.buffers, other.buffers):
            if mine.keys() != theirs.keys():
                return False
            for name in mine:
                if mine[name].keys() != theirs[name].keys():
                    return False
                if not all(np.array_equal(mine[name][p], theirs[name][p]) for p in mine[name]):
                    return False
        return True


def init_state(chain: Sequence[StepRule], shapes: Dict[str, Sequence[int]]) -> StepRuleState:
    """Zero buffers for every rule of the chain and every registered parameter."""
    shapes = {path: tuple(int(d) for d in shape) for path, shape in shapes.items()}
    buffers = [
        {name: {path: np.zeros(shape, dtype=np.float64) for path, shape in shapes.items()} for name in rule.buffers}
        for rule in chain
    ]
    return StepRuleState(shapes=shapes, kinds=[rule.kind for rule in chain], buffers=buffers)


def compute_steps(
    chain: Sequence[StepRule], state: StepRuleState, grads: Dict[str, np.ndarray]
) -> Tuple[Tensors, StepRuleState]:
    """
    Apply the chain to the gradients.

    Returns:
        (steps to subtract, new state); the given state is left untouched

    Raises:
        StepRuleError: grads miss a registered parameter, name an unknown
            one, disagree on shape, or the state belongs to another chain
    """
    if [rule.kind for rule in chain] != state.kinds:
        raise StepRuleError(f"state belongs to chain {state.kinds}, not {[rule.kind for rule in chain]}")
    unknown = sorted(set(grads) - set(state.shapes))
    if unknown:
        raise StepRuleError(f"gradients for unknown parameters {unknown}")
    missing = sorted(set(state.shapes) - set(grads))
    if missing:
        raise StepRuleError(f"missing gradients for {missing}")

    steps: Tensors = {}
    for path in sorted(grads):
        g = np.asarray(grads[path], dtype=np.float64)
        if g.shape != state.shapes[path]:
            raise StepRuleError(f"gradient for {path} has shape {g.shape}, parameter has {state.shapes[path]}")
        steps[path] = g

    new_state = state.copy()
    if any(rule.uses_time for rule in chain):
        new_state.t += 1
    for rule, buffers in zip(chain, new_state.buffers):
        steps = rule.compute(steps, buffers, new_state.t)
    return steps, new_state


# =============================================================================
# Post-update constraints
# =============================================================================

class WeightNormConstraint:
    """
    Rescale a parameter whose whole-tensor L2 norm exceeds limit back to limit.

    Applies to parameters carrying any of `roles` (default: WEIGHT).
    """

    kind = "weight_norm"

    def __init__(self, limit: float, roles: Sequence[Role] = (Role.WEIGHT,)):
        if limit <= 0:
            raise StepRuleError(f"weight norm limit must be > 0, got {limit}")
        self.limit = float(limit)
        self.roles = tuple(roles)

    def apply(self, parameters: Sequence[Variable]) -> None:
        for var in parameters:
            if not any(var.has_role(role) for role in self.roles) or var.value is None:
                continue
            norm = global_norm([var.value])
            if norm > self.limit:
                var.value = var.value * (self.limit / norm)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "limit": self.limit, "roles": sorted(r.value for r in self.roles)}


def weight_norm_constraint(limit: float, roles: Sequence[Role] = (Role.WEIGHT,)) -> WeightNormConstraint:
    return WeightNormConstraint(limit, roles)
