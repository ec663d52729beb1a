import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d2d import tape

vec = arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3))


def grad_of(fn, x):
    g = tape.Graph()
    leaf = g.leaf(np.asarray(x, dtype=float))
    return tape.backward(g, fn(g, leaf))[leaf.id]


def test_sigmoid_at_zero():
    g = tape.Graph()
    x = g.leaf(np.zeros(3))
    assert np.all(tape.sigmoid(x).value == 0.5)
    assert grad_of(lambda g, x: tape.sum_(tape.sigmoid(x)), [0.0])[0] == pytest.approx(0.25, abs=1e-15)


def test_squared_norm_of_zero():
    g = tape.Graph()
    assert tape.squared_norm(g.leaf(np.zeros(5))).item() == 0.0


def test_affine_identity():
    g = tape.Graph()
    x = np.array([1.5, -2.0, 0.25])
    y = tape.affine(g.const(np.eye(3)), g.leaf(x), g.const(np.zeros(3)))
    np.testing.assert_array_equal(y.value, x)


def test_square_gradient():
    assert grad_of(lambda g, x: tape.sum_(x * x), [3.0])[0] == pytest.approx(6.0)


def test_stable_sigmoid_extremes():
    s = tape.stable_sigmoid(np.array([-1000.0, 1000.0, 710.0, -710.0]))
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[1] == 1.0


def test_shape_error_names_op_and_shapes():
    g = tape.Graph()
    with pytest.raises(tape.ShapeError) as exc:
        tape.add(g.leaf(np.zeros(3)), g.leaf(np.zeros(4)))
    assert exc.value.op == "add"
    assert (3,) in exc.value.shapes and (4,) in exc.value.shapes
    with pytest.raises(tape.ShapeError):
        tape.matvec(g.const(np.zeros((2, 3))), g.leaf(np.zeros(2)))


def test_backward_rejects_vector_output():
    g = tape.Graph()
    x = g.leaf(np.ones(3))
    with pytest.raises(tape.TapeError):
        tape.backward(g, tape.scale(x, 2.0))


def test_nonfinite_carries_node_id():
    g = tape.Graph()
    x = g.leaf(np.array([1e3, 1.0]))
    with pytest.raises(tape.NonFiniteError) as exc:
        tape.power(x, 400)
    assert exc.value.node_id == 1


def test_log_domain_error():
    g = tape.Graph()
    with pytest.raises(tape.TapeError):
        tape.log(g.leaf(np.array([0.0, 1.0])))


def test_unknown_kind():
    g = tape.Graph()
    with pytest.raises(tape.TapeError):
        tape.forward_op("convolve", (g.leaf(np.ones(2)),))


def test_constant_function_has_zero_gradient():
    g = tape.Graph()
    x = g.leaf(np.array([1.0, 2.0]))
    y = tape.sum_(g.const(np.array([4.0, 5.0])))
    out = tape.add(y, tape.scale(tape.sum_(x), 0.0))
    np.testing.assert_array_equal(tape.backward(g, out)[x.id], 0.0)


def test_quadratic_form_gradcheck(rng):
    A = rng.normal(size=(6, 6))
    A = A @ A.T

    def fn(g, x):
        return tape.sum_(tape.mul(x, tape.matvec(g.const(A), x)))

    assert tape.check_gradients(fn, rng.normal(size=6), 1e-5) <= 1e-8


def test_soft_count_near_threshold_gradcheck(rng):
    tz = np.log(0.25)
    z = tz + rng.uniform(-0.05, 0.05, size=10)
    fn = lambda g, x: tape.sum_(tape.sigmoid(tape.scale(tape.add(x, g.const(-tz * np.ones(10))), 300.0)))
    assert tape.check_gradients(fn, z, 1e-6) <= 1e-4


OPS = {
    "affine": lambda g, x, W, b: tape.affine(g.const(W), x, g.const(b)),
    "matvec": lambda g, x, W, b: tape.matvec(g.const(W), x),
    "add": lambda g, x, W, b: tape.add(x, tape.mul(x, x)),
    "mul": lambda g, x, W, b: tape.mul(x, g.const(b)),
    "scale": lambda g, x, W, b: tape.scale(x, -1.7),
    "sigmoid": lambda g, x, W, b: tape.sigmoid(x),
    "leaky_relu": lambda g, x, W, b: tape.activation(x, "leaky_relu"),
    "tanh": lambda g, x, W, b: tape.tanh(x),
    "sum": lambda g, x, W, b: tape.sum_(x),
    "squared_norm": lambda g, x, W, b: tape.squared_norm(x),
    "log": lambda g, x, W, b: tape.log(tape.add(tape.mul(x, x), g.const(np.ones(x.shape)))),
    "power": lambda g, x, W, b: tape.power(x, 3),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_each_op_matches_central_differences(op):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-3, 3, size=4)
        if op == "leaky_relu" and np.min(np.abs(x)) < 1e-3:
            continue
        W, b, c = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4)

        def fn(g, xt):
            y = OPS[op](g, xt, W, b)
            return y if y.shape == () else tape.sum_(tape.mul(y, g.const(c)))

        worst = max(worst, tape.check_gradients(fn, x, 1e-6))
    assert worst <= 1e-6


@settings(max_examples=50, deadline=None)
@given(vec, st.floats(0.1, 5))
def test_backward_linear_in_seed(x, k):
    def run(seed):
        g = tape.Graph()
        leaf = g.leaf(x)
        out = tape.sum_(tape.mul(tape.tanh(leaf), tape.sigmoid(leaf)))
        return tape.backward(g, out, seed=seed)[leaf.id]

    np.testing.assert_allclose(run(k), k * run(1.0), rtol=1e-12, atol=1e-15)


def test_rerun_is_bit_identical(rng):
    x, W = rng.normal(size=8), rng.normal(size=(8, 8))

    def once():
        g = tape.Graph()
        leaf = g.leaf(x)
        out = tape.squared_norm(tape.tanh(tape.matvec(g.const(W), leaf)))
        return out.item(), tape.backward(g, out)[leaf.id]

    (a, ga), (b, gb) = once(), once()
    assert a == b and np.array_equal(ga, gb)


def test_nodes_are_topologically_ordered(rng):
    g = tape.Graph()
    x = g.leaf(rng.normal(size=3))
    tape.sum_(tape.add(tape.tanh(x), tape.sigmoid(x)))
    for i, node in enumerate(g.nodes):
        assert all(j < i for j in node.inputs)


def test_check_gradients_rejects_bad_step():
    with pytest.raises(ValueError):
        tape.check_gradients(lambda g, x: tape.sum_(x), np.ones(2), 0.0)
