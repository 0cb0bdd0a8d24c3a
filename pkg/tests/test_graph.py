"""
Tests for annotated computation graphs.

Run with: pytest tests/test_graph.py -v
"""

import numpy as np
import pytest

from core import graph
from core.bricks import MLP, Gaussian, initialize
from core.errors import GraphError, ShapeError, UnboundInputError
from core.graph import ComputationGraph, Role, evaluate, forward, grad, id_scope, variable_filter
from core.rng import Rng
from tests.conftest import assert_gradients_match, random_array


@pytest.fixture
def features():
    return random_array(1, (5, 3))


class TestVariables:
    """Tests for variable construction and roles."""

    def test_weight_implies_parameter(self):
        """WEIGHT and BIAS carry PARAMETER."""
        W = graph.parameter("W", (2, 2), [Role.WEIGHT])
        b = graph.parameter("b", (2,), [Role.BIAS])
        assert W.has_role(Role.PARAMETER) and b.has_role(Role.PARAMETER)

    def test_add_role_expands(self):
        """Adding WEIGHT later also adds PARAMETER."""
        x = graph.input("x", (None, 2))
        h = graph.identity(x)
        h.add_role(Role.WEIGHT)
        assert h.roles == {Role.WEIGHT, Role.PARAMETER}

    def test_only_leading_axis_unknown(self):
        """Unknown trailing axes are rejected."""
        with pytest.raises(ShapeError):
            graph.input("x", (3, None))

    def test_parameter_storage_shape(self):
        """Storage must match the declared shape."""
        with pytest.raises(ShapeError):
            graph.parameter("W", (2, 3), value=np.zeros((3, 2)))

    def test_id_scope_restarts_numbering(self):
        """Variables built in a fresh scope are numbered from 1."""
        with id_scope():
            first = [graph.input("x", (2,)).id, graph.constant(1.0).id]
        with id_scope():
            second = [graph.input("x", (2,)).id, graph.constant(1.0).id]
        assert first == second == [1, 2]

    def test_matmul_shape_mismatch(self):
        """Incompatible operands fail at build time."""
        with pytest.raises(ShapeError):
            graph.matmul(graph.input("x", (None, 3)), graph.parameter("W", (2, 2)))


class TestForward:
    """Tests for evaluation."""

    def test_matmul_plus_bias(self, features):
        """A [D] bias broadcasts over the batch."""
        x = graph.input("x", (None, 3))
        W = graph.parameter("W", (3, 2), value=random_array(2, (3, 2)))
        b = graph.parameter("b", (2,), value=np.array([0.5, -1.0]))
        (y,) = evaluate([graph.add(graph.matmul(x, W), b)], {x: features})
        np.testing.assert_allclose(y, features @ W.value + b.value)

    def test_bind_by_name(self, features):
        """Inputs may be bound by name."""
        x = graph.input("x", (None, 3))
        (total,) = evaluate([graph.sum(x)], {"x": features})
        assert total == pytest.approx(features.sum())

    def test_unbound_input(self):
        """Every reachable input must be bound."""
        x = graph.input("x", (None, 3))
        with pytest.raises(UnboundInputError):
            evaluate([graph.sum(x)], {})

    def test_bound_shape_checked(self):
        """Bound values must agree with the declared static axes."""
        x = graph.input("x", (None, 3))
        with pytest.raises(ShapeError):
            evaluate([graph.sum(x)], {x: np.zeros((2, 4))})

    def test_softmax_rows_sum_to_one(self, features):
        """softmax normalizes the last axis."""
        x = graph.input("x", (None, 3))
        (p,) = evaluate([graph.softmax(x)], {x: features * 50})
        np.testing.assert_allclose(p.sum(axis=1), np.ones(5))

    def test_error_rate(self):
        """error_rate counts argmax misses."""
        p = graph.input("p", (None, 2))
        t = graph.input("t", (None, 1))
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
        labels = np.array([[0], [1], [1], [1]])
        (rate,) = evaluate([graph.error_rate(p, t)], {p: probs, t: labels})
        assert rate == pytest.approx(0.25)

    def test_forward_returns_outputs(self, features):
        """forward maps each output to its value."""
        x = graph.input("x", (None, 3))
        s, m = graph.sum(x), graph.mean(x)
        values = forward(ComputationGraph([s, m]), {x: features})
        assert set(values) == {s, m}
        assert values[m] == pytest.approx(features.mean())


class TestGrad:
    """Symbolic gradients against central differences."""

    def test_linear_regression(self, features):
        """mse through matmul and a bias."""
        x = graph.input("x", (None, 3))
        y = graph.input("y", (None, 2))
        W = graph.parameter("W", (3, 2), [Role.WEIGHT], value=random_array(2, (3, 2)))
        b = graph.parameter("b", (2,), [Role.BIAS], value=random_array(3, (2,)))
        cost = graph.mse(graph.add(graph.matmul(x, W), b), y)
        assert_gradients_match(cost, [W, b], {x: features, y: random_array(4, (5, 2))})

    @pytest.mark.parametrize("activation", [graph.tanh, graph.sigmoid, graph.relu])
    def test_two_layer_softmax(self, features, activation):
        """Cross-entropy over labels through a hidden layer."""
        x = graph.input("x", (None, 3))
        t = graph.input("t", (None, 1))
        W1 = graph.parameter("W1", (3, 4), value=random_array(5, (3, 4)))
        W2 = graph.parameter("W2", (4, 2), value=random_array(6, (4, 2)))
        hidden = activation(graph.matmul(x, W1))
        cost = graph.cross_entropy(graph.softmax(graph.matmul(hidden, W2)), t)
        labels = np.array([[0], [1], [1], [0], [1]])
        assert_gradients_match(cost, [W1, W2], {x: features, t: labels})

    def test_one_hot_targets(self, features):
        """Cross-entropy also accepts one-hot rows."""
        x = graph.input("x", (None, 3))
        t = graph.input("t", (None, 3))
        W = graph.parameter("W", (3, 3), value=random_array(7, (3, 3)))
        cost = graph.cross_entropy(graph.softmax(graph.matmul(x, W)), t)
        assert_gradients_match(cost, [W], {x: features, t: np.eye(3)[[0, 2, 1, 1, 0]]})

    def test_elementwise_ops(self):
        """sub, mul, div, log and square."""
        a = graph.parameter("a", (4,), value=random_array(8, (4,), 0.5, 2.0))
        c = graph.parameter("c", (4,), value=random_array(9, (4,), 0.5, 2.0))
        expr = graph.div(graph.mul(graph.log(a), graph.square(c)), graph.sub(graph.add(a, c), graph.constant(np.full(4, 0.1))))
        assert_gradients_match(graph.sum(expr), [a, c], {})

    def test_structural_ops(self):
        """transpose, take, stack, mean over an axis and scalar_affine."""
        M = graph.parameter("M", (3, 2), value=random_array(10, (3, 2)))
        rows = graph.stack([graph.take(M, 0, 0), graph.take(M, 2, 0)], axis=0)
        expr = graph.add(graph.matmul(graph.transpose(M), graph.scalar_affine(M, 3.0, 1.0)), graph.constant(np.eye(2)))
        cost = graph.add(graph.sum(graph.square(expr)), graph.sum(graph.mean(graph.tanh(rows), axis=1)))
        assert_gradients_match(cost, [M], {})

    def test_shared_variable_accumulates(self):
        """A variable used twice gets the sum of both paths."""
        w = graph.parameter("w", (3,), value=np.array([1.0, -2.0, 0.5]))
        cost = graph.sum(graph.mul(w, w))
        (g,) = evaluate(grad(cost, [w]), {})
        np.testing.assert_allclose(g, 2 * w.value)

    def test_step_has_zero_gradient(self):
        """Non-differentiable ops contribute zero."""
        w = graph.parameter("w", (3,), value=np.array([1.0, -2.0, 0.5]))
        (g,) = evaluate(grad(graph.sum(graph.step(w)), [w]), {})
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_gradient_annotations(self):
        """Gradients are AUXILIARY, named after and linked to their primal."""
        w = graph.parameter("w", (2,), value=np.ones(2))
        (g,) = grad(graph.sum(w), [w])
        assert g.has_role(Role.AUXILIARY)
        assert g.name == "grad_w"
        assert g.gradient_of is w

    def test_non_scalar_cost(self):
        """The cost must be a scalar."""
        w = graph.parameter("w", (2,), value=np.ones(2))
        with pytest.raises(GraphError):
            grad(graph.square(w), [w])

    def test_unreachable_wrt(self):
        """Variables that do not influence the cost are rejected."""
        w = graph.parameter("w", (2,), value=np.ones(2))
        other = graph.parameter("v", (2,), value=np.ones(2))
        with pytest.raises(GraphError):
            grad(graph.sum(w), [other])


def _weighted_total(out, seed):
    """A scalar that depends on every element of out with a random weight."""
    if out.shape == ():
        return graph.scalar_affine(out, 0.7)
    return graph.sum(graph.mul(out, graph.constant(random_array(seed, out.shape))))


def _labels(seed, rows, classes):
    rng = Rng.from_seed(seed)
    return np.array([[rng.bounded(classes)] for _ in range(rows)], dtype=np.float64)


# name -> (parameter shapes, (low, high), builder(params, seed) -> (output, bindings))
OP_CASES = {
    "add": ([(3, 4), (4,)], (-1, 1), lambda p, s: (graph.add(p[0], p[1]), {})),
    "sub": ([(3, 4), (3, 4)], (-1, 1), lambda p, s: (graph.sub(p[0], p[1]), {})),
    "mul": ([(3, 4), (4,)], (-1, 1), lambda p, s: (graph.mul(p[0], p[1]), {})),
    "div": ([(3, 4), (3, 4)], (0.5, 2), lambda p, s: (graph.div(p[0], p[1]), {})),
    "matmul": ([(3, 4), (4, 2)], (-1, 1), lambda p, s: (graph.matmul(p[0], p[1]), {})),
    "transpose": ([(3, 4)], (-1, 1), lambda p, s: (graph.transpose(p[0]), {})),
    "tanh": ([(3, 4)], (-2, 2), lambda p, s: (graph.tanh(p[0]), {})),
    "sigmoid": ([(3, 4)], (-2, 2), lambda p, s: (graph.sigmoid(p[0]), {})),
    "relu": ([(3, 4)], (-1, 1), lambda p, s: (graph.relu(p[0]), {})),
    "softmax": ([(3, 4)], (-2, 2), lambda p, s: (graph.softmax(p[0]), {})),
    "log": ([(3, 4)], (0.5, 2), lambda p, s: (graph.log(p[0]), {})),
    "square": ([(3, 4)], (-1, 1), lambda p, s: (graph.square(p[0]), {})),
    "sum": ([(3, 4)], (-1, 1), lambda p, s: (graph.sum(p[0]), {})),
    "sum_axis": ([(3, 4)], (-1, 1), lambda p, s: (graph.sum(p[0], axis=0), {})),
    "mean": ([(3, 4)], (-1, 1), lambda p, s: (graph.mean(p[0]), {})),
    "mean_axis": ([(3, 4)], (-1, 1), lambda p, s: (graph.mean(p[0], axis=1), {})),
    "scalar_affine": ([(3, 4)], (-1, 1), lambda p, s: (graph.scalar_affine(p[0], -1.5, 0.25), {})),
    "identity": ([(3, 4)], (-1, 1), lambda p, s: (graph.identity(p[0]), {})),
    "take": ([(3, 4)], (-1, 1), lambda p, s: (graph.take(p[0], 2, axis=1), {})),
    "stack": ([(3, 4), (3, 4)], (-1, 1), lambda p, s: (graph.stack([p[0], p[1]], axis=1), {})),
    "cross_entropy": (
        [(5, 3)],
        (-2, 2),
        lambda p, s: _cross_entropy_case(p[0], {"t": _labels(s, 5, 3)}, (5, 1)),
    ),
    "cross_entropy_one_hot": (
        [(5, 3)],
        (-2, 2),
        lambda p, s: _cross_entropy_case(p[0], {"t": np.eye(3)[_labels(s, 5, 3)[:, 0].astype(int)]}, (5, 3)),
    ),
}


def _cross_entropy_case(logits, bindings, target_shape):
    t = graph.input("t", target_shape)
    return graph.cross_entropy(graph.softmax(logits), t), bindings


class TestGradSweep:
    """Every op against central differences (h=1e-6) over 50 random instances."""

    @pytest.mark.parametrize("seed", range(50))
    @pytest.mark.parametrize("op", sorted(OP_CASES))
    def test_op_gradient(self, op, seed):
        """Symbolic and numeric gradients agree to a relative 1e-5."""
        shapes, (low, high), build = OP_CASES[op]
        params = [
            graph.parameter(f"p{i}", shape, value=random_array(1000 * seed + i, shape, low, high))
            for i, shape in enumerate(shapes)
        ]
        out, bindings = build(params, seed)
        assert_gradients_match(_weighted_total(out, 7919 + seed), params, bindings)

    @pytest.mark.parametrize("seed", range(50))
    def test_dropout_gradient_with_fixed_mask(self, seed):
        """With the generator rewound before every pass, dropout is differentiable like any op."""
        x = graph.input("x", (None, 4))
        W = graph.parameter("W", (4, 3), value=random_array(seed, (4, 3)))
        h = graph.tanh(graph.matmul(x, W))
        cost = graph.sum(graph.matmul(h, graph.constant(random_array(seed + 1, (3, 2)))))
        cg = graph.apply_dropout(ComputationGraph([cost]), [h], 0.4, seed=seed)
        assert_gradients_match(cg.outputs[0], [W], {x: random_array(seed + 2, (5, 4))}, rewind=cg)

    @pytest.mark.parametrize("seed", range(50))
    def test_weight_noise_gradient_with_fixed_noise(self, seed):
        """Weight noise passes the gradient through unchanged."""
        x = graph.input("x", (None, 4))
        W = graph.parameter("W", (4, 3), value=random_array(seed, (4, 3)))
        cost = graph.sum(graph.matmul(graph.tanh(graph.matmul(x, W)), graph.constant(random_array(seed + 1, (3, 2)))))
        cg = graph.apply_weight_noise(ComputationGraph([cost]), [W], 0.3, seed=seed)
        assert_gradients_match(cg.outputs[0], [W], {x: random_array(seed + 2, (5, 4))}, rewind=cg)


def _annotated_model():
    x = graph.input("x", (4, 3))
    W1 = graph.parameter("W", (3, 3), [Role.WEIGHT], "/mlp/linear_0", random_array(11, (3, 3)))
    b1 = graph.parameter("b", (3,), [Role.BIAS], "/mlp/linear_0", np.zeros(3))
    W2 = graph.parameter("W", (3, 2), [Role.WEIGHT], "/mlp2/linear_0", random_array(12, (3, 2)))
    h = graph.annotate(graph.tanh(graph.add(graph.matmul(x, W1), b1)), Role.OUTPUT, "/mlp/linear_0", "h")
    cost = graph.sum(graph.matmul(h, W2))
    cost.add_role(Role.COST)
    return x, W1, b1, W2, h, cost


class TestVariableFilter:
    """Tests for role and brick queries."""

    def test_by_role(self):
        """PARAMETER matches weights and biases in id order."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = ComputationGraph([cost])
        assert variable_filter(cg, roles=[Role.PARAMETER]) == [W1, b1, W2]
        assert variable_filter(cg, roles=[Role.WEIGHT]) == [W1, W2]
        assert variable_filter(cg, roles=[Role.COST]) == [cost]

    def test_by_brick_name(self):
        """brick_name compares the last path segment."""
        x, W1, b1, W2, h, cost = _annotated_model()
        found = variable_filter(ComputationGraph([cost]), roles=[Role.PARAMETER], brick_name="linear_0")
        assert found == [W1, b1, W2]

    def test_prefix_matches_whole_segments(self):
        """"/mlp" does not match "/mlp2"."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = ComputationGraph([cost])
        assert variable_filter(cg, roles=[Role.WEIGHT], ancestor_path_prefix="/mlp") == [W1]
        assert variable_filter(cg, ancestor_path_prefix="/mlp2/linear_0") == [W2]

    def test_criteria_combine(self):
        """All given criteria must hold."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = ComputationGraph([cost])
        assert variable_filter(cg, roles=[Role.OUTPUT], ancestor_path_prefix="/mlp") == [h]
        assert variable_filter(cg, roles=[Role.BIAS], ancestor_path_prefix="/mlp2") == []

    def test_sibling_mlps(self):
        """{WEIGHT, ancestor "/mlp_foo"} selects exactly foo's weights, not its sibling's."""
        foo = MLP("mlp_foo", [3, 4, 2], ["tanh", "softmax"]).allocate()
        bar = MLP("mlp_foobar", [3, 5, 2], ["relu", "softmax"]).allocate()
        initialize(foo, Gaussian(0.1), seed=1)
        initialize(bar, Gaussian(0.1), seed=2)
        x = graph.input("x", (None, 3))
        cg = ComputationGraph([graph.add(graph.sum(foo.apply(x)), graph.sum(bar.apply(x)))])

        selected = variable_filter(cg, roles=[Role.WEIGHT], ancestor_path_prefix="/mlp_foo")
        assert selected == sorted((v for v in foo.parameters if v.has_role(Role.WEIGHT)), key=lambda v: v.id)
        assert [v.brick_path for v in selected] == ["/mlp_foo/linear_0", "/mlp_foo/linear_1"]
        assert len(variable_filter(cg, roles=[Role.WEIGHT])) == 4

    def test_graph_parameters_and_inputs(self):
        """The graph lists its parameter and input leaves."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = ComputationGraph([cost])
        assert cg.parameters == [W1, b1, W2]
        assert cg.inputs == [x]
        assert x in cg and W2 in cg


class TestRewrites:
    """Tests for dropout, weight noise and penalties."""

    def test_replace_is_copy_on_write(self):
        """The original graph keeps evaluating as before."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = ComputationGraph([cost])
        bindings = {x: random_array(13, (4, 3))}
        before = forward(cg, bindings)[cost]
        rewritten = cg.replace({h: graph.scalar_affine(h, 2.0)})
        assert forward(rewritten, bindings)[rewritten.outputs[0]] == pytest.approx(2 * before)
        assert forward(cg, bindings)[cost] == before

    def test_replace_unknown_variable(self):
        """Only variables of the graph can be replaced."""
        x, W1, b1, W2, h, cost = _annotated_model()
        stranger = graph.input("z", (4, 3))
        with pytest.raises(GraphError):
            ComputationGraph([cost]).replace({stranger: stranger})

    def test_dropout_zero_is_identity(self):
        """p=0 leaves every value bitwise unchanged."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = ComputationGraph([cost, h])
        bindings = {x: random_array(14, (4, 3))}
        dropped = graph.apply_dropout(cg, [h], 0.0, seed=1)
        before = forward(cg, bindings)
        after = forward(dropped, bindings)
        for old, new in zip(cg.outputs, dropped.outputs):
            assert after[new].tobytes() == before[old].tobytes()

    def test_dropout_uses_derived_mask(self):
        """The mask comes from Rng.derive(seed, variable id), scaled by 1/(1-p)."""
        x, W1, b1, W2, h, cost = _annotated_model()
        bindings = {x: random_array(15, (4, 3))}
        (h_value,) = evaluate([h], bindings)
        mask = graph.dropout_mask((4, 3), 0.5, Rng.derive(9, h.id))
        expected = ((h_value * mask / 0.5) @ W2.value).sum()

        dropped = graph.apply_dropout(ComputationGraph([cost]), [h], 0.5, seed=9)
        assert forward(dropped, bindings)[dropped.outputs[0]] == pytest.approx(expected)

    def test_dropout_reproducible_across_rebuilds(self):
        """Rebuilding in a fresh id scope reproduces the masks."""
        bindings_value = random_array(16, (4, 3))
        results = []
        for _ in range(2):
            with id_scope():
                x, W1, b1, W2, h, cost = _annotated_model()
                dropped = graph.apply_dropout(ComputationGraph([cost]), [h], 0.5, seed=4)
                results.append(forward(dropped, {x: bindings_value})[dropped.outputs[0]])
        assert results[0] == results[1]

    def test_dropout_mask_rate(self):
        """About 1-p of the mask is kept."""
        mask = graph.dropout_mask((100, 100), 0.3, Rng.from_seed(2))
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert abs(mask.mean() - 0.7) < 0.02

    @pytest.mark.parametrize("p", [-0.1, 1.0])
    def test_dropout_probability_range(self, p):
        """p must lie in [0, 1)."""
        x, W1, b1, W2, h, cost = _annotated_model()
        with pytest.raises(GraphError):
            graph.apply_dropout(ComputationGraph([cost]), [h], p, seed=1)

    def test_dropout_on_batch_axis(self):
        """A (None, k) hidden layer of a stream-fed MLP is masked at the runtime batch size."""
        mlp = MLP("mlp", [2, 8, 2], ["tanh", "softmax"]).allocate()
        initialize(mlp, Gaussian(0.5), seed=1)
        x = graph.input("features", (None, 2))
        cg = ComputationGraph([graph.sum(mlp.apply(x))])
        (hidden,) = variable_filter(cg, roles=[Role.OUTPUT], brick_name="tanh_0")
        dropped = graph.apply_dropout(cg, [hidden], 0.5, seed=3)
        (mask_var,) = [node.output for node in dropped.nodes if node.op == "dropout_mask"]
        for rows in (5, 11):
            values = forward(ComputationGraph([mask_var, *dropped.outputs]), {x: random_array(rows, (rows, 2))})
            assert values[mask_var].shape == (rows, 8)
            assert set(np.unique(values[mask_var])) <= {0.0, 1.0}
            assert np.isfinite(values[dropped.outputs[0]])


    def test_dropout_redraws_every_pass(self):
        """Each forward pass draws the next mask from the same generator."""
        x = graph.input("x", (None, 3))
        h = graph.tanh(x)
        dropped = graph.apply_dropout(ComputationGraph([h]), [h], 0.5, seed=6)
        values = random_array(18, (4, 3))
        first = forward(dropped, {x: values})[dropped.outputs[0]]
        second = forward(dropped, {x: values})[dropped.outputs[0]]

        rng = Rng.derive(6, h.id)
        clean = np.tanh(values)
        np.testing.assert_array_equal(first, clean * graph.dropout_mask((4, 3), 0.5, rng) / 0.5)
        np.testing.assert_array_equal(second, clean * graph.dropout_mask((4, 3), 0.5, rng) / 0.5)
        assert not np.array_equal(first, second)

    def test_generators_are_listed(self):
        """Every stochastic rewrite exposes its generator under a stable key."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = graph.apply_dropout(ComputationGraph([cost]), [h], 0.5, seed=2)
        cg = graph.apply_weight_noise(cg, [W2], 0.1, seed=5)
        found = graph.generators(cg)
        assert sorted(found) == ["dropout:/mlp/linear_0.h:2", "weight_noise:/mlp2/linear_0.W:5"]
        assert found["dropout:/mlp/linear_0.h:2"] == Rng.derive(2, h.id)

    def test_dropout_expectation(self):
        """Over 10^5 seeds the inverted mask averages to 1 within 1%."""
        keep = 0.8
        total = 0.0
        for seed in range(100_000):
            total += graph.dropout_mask((4,), 1.0 - keep, Rng.derive(seed, 17)).sum() / keep
        assert abs(total / 400_000 - 1.0) < 0.01

    def test_dropout_batch_mean(self):
        """The 10^5 elements of a dropped batch average to the clean values within 1%."""
        x = graph.input("x", (None, 4))
        dropped = graph.apply_dropout(ComputationGraph([graph.identity(x)]), [x], 0.3, seed=8)
        values = np.tile(np.array([0.5, 1.0, 2.0, 4.0]), (25_000, 1))
        out = forward(dropped, {x: values})[dropped.outputs[0]]
        assert abs((out / values).mean() - 1.0) < 0.01

    def test_weight_noise(self):
        """sigma=0 is the identity; otherwise noise is N(0, sigma) from the derived generator."""
        x, W1, b1, W2, h, cost = _annotated_model()
        cg = ComputationGraph([cost])
        bindings = {x: random_array(17, (4, 3))}
        silent = graph.apply_weight_noise(cg, [W2], 0.0, seed=3)
        assert forward(silent, bindings)[silent.outputs[0]] == pytest.approx(forward(cg, bindings)[cost])

        rng = Rng.derive(3, W2.id)
        noise = np.array([0.1 * rng.normal() for _ in range(6)]).reshape(3, 2)
        (h_value,) = evaluate([h], bindings)
        noisy = graph.apply_weight_noise(cg, [W2], 0.1, seed=3)
        assert forward(noisy, bindings)[noisy.outputs[0]] == pytest.approx((h_value @ (W2.value + noise)).sum())

    def test_weight_noise_variance(self):
        """Over 10^4 seeds the output perturbation of x W has variance sigma^2 * sum(x^2) within 5%."""
        sigma = 0.2
        x_value = np.array([[0.5, -1.0, 1.5]])
        x = graph.input("x", (1, 3))
        W = graph.parameter("W", (3, 2), [Role.WEIGHT], value=random_array(19, (3, 2)))
        y = graph.matmul(x, W)
        cg = ComputationGraph([y])
        clean = forward(cg, {x: x_value})[y]
        squares = []
        for seed in range(10_000):
            noisy = graph.apply_weight_noise(cg, [W], sigma, seed=seed)
            delta = forward(noisy, {x: x_value})[noisy.outputs[0]] - clean
            squares.extend((delta * delta).ravel())
        expected = sigma**2 * float(np.sum(x_value**2))
        assert np.mean(squares) == pytest.approx(expected, rel=0.05)

    def test_weight_noise_on_batch_axis(self):
        """Noise can also be added to activations with an unknown batch axis."""
        x = graph.input("x", (None, 2))
        noisy = graph.apply_weight_noise(ComputationGraph([graph.identity(x)]), [x], 1.0, seed=4)
        out = forward(noisy, {x: np.zeros((6, 2))})[noisy.outputs[0]]
        rng = Rng.derive(4, x.id)
        np.testing.assert_array_equal(out, graph.gaussian_noise((6, 2), 1.0, rng))

    def test_l2_penalty(self):
        """coefficient times the sum of squares, tagged COST."""
        a = graph.parameter("a", (2,), value=np.array([3.0, 4.0]))
        b = graph.parameter("b", (1,), value=np.array([1.0]))
        penalty = graph.l2_penalty([a, b], 0.5)
        assert penalty.has_role(Role.COST)
        assert evaluate([penalty])[0] == pytest.approx(13.0)
        assert evaluate([graph.l2_penalty([], 0.5)])[0] == 0.0

    def test_l2_penalty_gradient(self):
        """The penalty differentiates to 2 * coefficient * w."""
        w = graph.parameter("w", (2,), value=np.array([3.0, 4.0]))
        (g,) = evaluate(grad(graph.l2_penalty([w], 0.1), [w]))
        np.testing.assert_allclose(g, [0.6, 0.8])
