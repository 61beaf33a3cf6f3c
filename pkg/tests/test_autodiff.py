"""
Tests for the reverse-mode autodiff graph
Forward values, analytic gradients and a finite-difference oracle over random MLPs
"""

import numpy as np
import pytest
from conftest import make_model, make_split

from src.core.autodiff import Graph, OpKind, forward, grad, softmax_cross_entropy
from src.core.errors import LabError, NonFiniteError, NonScalarRootError, ShapeMismatchError
from src.core.multiexit import HeadSpec

FD_STEP = 1e-5


@pytest.mark.unit
class TestForward:
    def test_scalar_product(self):
        g = Graph()
        y = g.matmul(g.leaf("x"), g.leaf("w"))
        g.set_root(y)
        assert forward(g, {"x": [[3.0]], "w": [[2.0]]}) == pytest.approx(6.0)

    def test_relu_negative_branch(self):
        g = Graph()
        g.set_root(g.relu(g.leaf("x")))
        assert forward(g, {"x": [[-1.5]]})[0, 0] == 0.0

    def test_two_layer_mlp_matches_hand_arithmetic(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3))
        w1, b1 = rng.standard_normal((3, 5)), rng.standard_normal(5)
        w2, b2 = rng.standard_normal((5, 2)), rng.standard_normal(2)

        g = Graph()
        h = g.relu(g.add_bias(g.matmul(g.leaf("x"), g.leaf("w1")), g.leaf("b1")))
        g.set_root(g.add_bias(g.matmul(h, g.leaf("w2")), g.leaf("b2")))
        out = forward(g, {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2})

        expected = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_matmul_shape_mismatch_names_node(self):
        g = Graph()
        g.set_root(g.matmul(g.leaf("a"), g.leaf("b"), name="bad"))
        with pytest.raises(ShapeMismatchError, match="bad"):
            forward(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})

    def test_bias_must_be_a_vector(self):
        g = Graph()
        g.set_root(g.add_bias(g.leaf("x"), g.leaf("b")))
        with pytest.raises(ShapeMismatchError):
            forward(g, {"x": np.ones((2, 3)), "b": np.ones((2, 3))})

    def test_non_finite_value_rejected(self):
        g = Graph()
        g.set_root(g.relu(g.leaf("x")))
        with pytest.raises(NonFiniteError):
            forward(g, {"x": [[np.nan]]})

    def test_unbound_leaf(self):
        g = Graph()
        g.set_root(g.relu(g.leaf("x")))
        with pytest.raises(LabError, match="not bound"):
            forward(g, {})

    def test_concat_and_mean_batch(self):
        g = Graph()
        both = g.concat([g.leaf("a"), g.leaf("b")])
        g.set_root(g.mean_batch(both))
        out = forward(g, {"a": [[1.0], [3.0]], "b": [[2.0, 4.0], [4.0, 8.0]]})
        np.testing.assert_array_equal(out, [2.0, 3.0, 6.0])


@pytest.mark.unit
class TestGrad:
    def test_power_rule(self):
        g = Graph()
        w = g.leaf("w")
        g.set_root(g.matmul(w, w))
        forward(g, {"w": [[3.0]]})
        assert grad(g, ["w"])["w"][0, 0] == pytest.approx(6.0)

    def test_cross_entropy_gradient_is_probabilities_minus_one_hot(self):
        logits = np.array([[2.0, 1.0, 0.0], [0.5, -1.0, 3.0]])
        targets = np.array([0, 2])
        g = Graph()
        g.set_root(g.softmax_cross_entropy(g.leaf("z"), g.leaf("y")))
        loss = forward(g, {"z": logits, "y": targets})

        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        one_hot = np.eye(3)[targets]
        np.testing.assert_allclose(grad(g, ["z"])["z"], (probs - one_hot) / 2, atol=1e-15)
        assert float(loss) == pytest.approx(softmax_cross_entropy(logits, targets), abs=1e-15)

    def test_mse_gradient(self):
        g = Graph()
        g.set_root(g.mse(g.leaf("p"), g.leaf("t")))
        forward(g, {"p": [[1.0], [2.0]], "t": [0.0, 0.0]})
        np.testing.assert_allclose(grad(g, ["p"])["p"], [[1.0], [2.0]])

    def test_weighted_sum_gradient_wrt_weights_is_the_terms(self):
        g = Graph()
        terms = [g.mse(g.leaf("p"), g.leaf("t")), g.mse(g.leaf("q"), g.leaf("t"))]
        g.set_root(g.weighted_sum(terms, g.leaf("alpha")))
        total = forward(g, {"p": [[1.0]], "q": [[2.0]], "t": [0.0], "alpha": [0.5, 2.0]})
        assert float(total) == pytest.approx(0.5 * 1.0 + 2.0 * 4.0)
        np.testing.assert_allclose(grad(g, ["alpha"])["alpha"], [1.0, 4.0])

    def test_non_scalar_root(self):
        g = Graph()
        g.set_root(g.matmul(g.leaf("a"), g.leaf("b")))
        forward(g, {"a": np.eye(2), "b": np.eye(2)})
        with pytest.raises(NonScalarRootError):
            grad(g, ["a"])

    def test_grad_requires_forward(self):
        g = Graph()
        g.set_root(g.relu(g.leaf("x")))
        with pytest.raises(LabError):
            grad(g, ["x"])

    def test_parameters_off_the_path_get_exact_zeros(self, small_model, small_split):
        g = small_model.graph
        root = g.outputs["loss1"]
        g.forward(small_model.bindings(small_split.features, small_split.targets), root=root)
        grads = g.grad(["block3.weight", "head3.fc1.bias", "block1.weight"], root=root)
        assert not np.any(grads["block3.weight"])
        assert not np.any(grads["head3.fc1.bias"])
        assert np.any(grads["block1.weight"])


def _relu_masks(model, bindings) -> list[np.ndarray]:
    g = model.graph
    g.forward(bindings)
    return [g.value(node.id) > 0 for node in g.nodes if node.op is OpKind.RELU]


def _finite_difference_check(model, split) -> float:
    """Max relative error of reverse-mode gradients against central differences, skipping ReLU kinks"""
    g = model.graph
    bindings = model.bindings(split.features, split.targets, np.linspace(0.5, 1.5, model.num_exits))
    g.forward(bindings)
    analytic = g.grad(model.parameter_names)
    masks = _relu_masks(model, bindings)

    worst = 0.0
    for name in model.parameter_names:
        base = model.params[name]
        for idx in np.ndindex(base.shape):
            values = []
            crossed = False
            for sign in (1.0, -1.0):
                shifted = base.copy()
                shifted[idx] += sign * FD_STEP
                probe = dict(bindings, **{name: shifted})
                values.append(float(g.forward(probe)))
                crossed |= any(np.any(m != n) for m, n in zip(masks, _relu_masks(model, probe)))
            if crossed:
                continue
            numeric = (values[0] - values[1]) / (2 * FD_STEP)
            exact = float(analytic[name][idx])
            scale = max(abs(numeric), abs(exact), 1e-3)
            worst = max(worst, abs(numeric - exact) / scale)
    return worst


@pytest.mark.slow
class TestFiniteDifferenceOracle:
    @pytest.mark.parametrize("config_seed", range(50))
    def test_random_mlp_gradients(self, config_seed):
        rng = np.random.default_rng(1000 + config_seed)
        num_blocks = int(rng.integers(1, 4))
        placements = tuple(sorted(rng.choice(np.arange(1, num_blocks + 1), size=int(rng.integers(1, num_blocks + 1)), replace=False)))
        if placements[-1] != num_blocks:
            placements = placements + (num_blocks,)
        regression = bool(rng.integers(0, 4) == 0)
        head = HeadSpec(2, 3) if rng.integers(0, 2) else HeadSpec()
        model = make_model(
            input_dim=3,
            width=int(rng.integers(2, 5)),
            num_blocks=num_blocks,
            placements=tuple(int(p) for p in placements),
            classes=3,
            seed=config_seed,
            head=head,
            regression=regression,
        )
        split = make_split(n=5, d=3, classes=3, seed=config_seed, regression=regression)
        assert _finite_difference_check(model, split) < 1e-6
