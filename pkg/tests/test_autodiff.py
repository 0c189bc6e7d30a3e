import numpy as np
import pytest

from hearvar import autodiff as ad
from hearvar.autodiff import (
    FORWARD_OP_KINDS,
    NonFinite,
    NotScalar,
    ShapeMismatch,
    Tape,
    finite_difference_check,
    forward_op,
)


def taped(*arrays, requires_grad=True):
    tape = Tape()
    tensors = [tape.tensor(a, requires_grad=requires_grad) for a in arrays]
    return tape, tensors


def test_sigmoid_at_zero():
    tape = Tape()
    out = ad.sigmoid(tape.tensor([0.0]))
    assert out.data[0] == 0.5


def test_concat_preserves_argument_order():
    tape = Tape()
    out = ad.concat_last([tape.tensor([1.0, 2.0]), tape.tensor([3.0])])
    assert out.data.tolist() == [1.0, 2.0, 3.0]


def test_squared_distance_identical_vectors_is_zero():
    tape = Tape()
    a = tape.tensor([1.0, 2.0])
    b = tape.tensor([1.0, 2.0])
    assert float(ad.squared_distance(a, b).data) == 0.0


def test_backward_of_sum_gives_ones():
    tape, (x,) = taped(np.array([1.0, 2.0, 3.0]))
    tape.backward(ad.sum_all(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_of_squared_distance():
    tape, (x, y) = taped(np.array([3.0]), np.array([1.0]))
    tape.backward(ad.squared_distance(x, y))
    assert x.grad.tolist() == [4.0]
    assert y.grad.tolist() == [-4.0]


def test_backward_of_sigmoid_at_zero():
    tape, (x,) = taped(np.array([0.0]))
    tape.backward(ad.sum_all(ad.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_backward_requires_scalar_loss():
    tape, (x,) = taped(np.array([1.0, 2.0]))
    y = ad.relu(x)
    with pytest.raises(NotScalar):
        tape.backward(y)


def test_fanout_grad_is_sum_of_single_paths():
    x0 = np.array([0.3, -1.2, 0.7])

    def path_a(x):
        return ad.sum_all(ad.tanh(x))

    def path_b(x):
        return ad.sum_all(ad.mul(x, x))

    tape, (x,) = taped(x0)
    tape.backward(ad.add(path_a(x), path_b(x)))
    combined = x.grad.copy()

    ta, (xa,) = taped(x0)
    ta.backward(path_a(xa))
    tb, (xb,) = taped(x0)
    tb.backward(path_b(xb))
    np.testing.assert_array_equal(combined, xa.grad + xb.grad)


def test_forward_and_backward_are_deterministic():
    rng = np.random.default_rng(7)
    a0 = rng.uniform(-2, 2, (4, 3))
    b0 = rng.uniform(-2, 2, (3, 5))

    def run():
        tape, (a, b) = taped(a0, b0)
        loss = ad.sum_all(ad.tanh(ad.matmul(a, b)))
        tape.backward(loss)
        return loss.data.copy(), a.grad.copy(), b.grad.copy()

    l1, ga1, gb1 = run()
    l2, ga2, gb2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(ga1, ga2)
    assert np.array_equal(gb1, gb2)


def test_leaf_rejects_non_finite():
    tape = Tape()
    with pytest.raises(NonFinite):
        tape.tensor([1.0, np.nan])


def test_forward_op_rejects_non_finite_input():
    tape = Tape()
    x = tape.tensor([1.0])
    x.data[0] = np.inf  # corrupt after creation
    with pytest.raises(NonFinite):
        forward_op("relu", [x])


def test_shape_mismatch_errors():
    tape = Tape()
    a = tape.tensor(np.ones((2, 3)))
    b = tape.tensor(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        ad.matmul(a, b)
    c = tape.tensor(np.ones(4))
    with pytest.raises(ShapeMismatch):
        ad.add(a, c)


def test_sqrt_guard_at_zero_is_finite():
    tape, (x,) = taped(np.array([0.0]))
    y = ad.sqrt_guarded(x)
    assert y.data[0] == pytest.approx(1e-6)
    tape.backward(ad.sum_all(y))
    assert np.isfinite(x.grad).all()


def test_release_drops_graph_but_keeps_leaf_grads():
    tape, (x,) = taped(np.array([1.0, 2.0]))
    tape.backward(ad.sum_all(ad.mul(x, x)))
    assert len(tape) == 0
    assert x.grad.tolist() == [2.0, 4.0]


# ---------------------------------------------------------------------------
# Finite differences: every operator kind on random inputs
# ---------------------------------------------------------------------------

def _random_scalar_graph(kind, rng):
    """A scalar-valued function of one input exercising the given op kind."""
    if kind == "matmul":
        other = rng.uniform(-2, 2, (3, 3))

        def f(x):
            return ad.sum_all(ad.matmul(x, x.tape.tensor(other)))

        return f, rng.uniform(-2, 2, (3, 3))
    if kind in ("add", "elementwise_mul"):
        other = rng.uniform(-2, 2, 5)

        def f(x):
            o = x.tape.tensor(other)
            y = forward_op(kind, [x, o])
            return ad.sum_all(ad.mul(y, y))

        return f, rng.uniform(-2, 2, 5)
    if kind in ("sigmoid", "tanh"):

        def f(x):
            return ad.sum_all(forward_op(kind, [x]))

        return f, rng.uniform(-2, 2, 6)
    if kind == "relu":

        def f(x):
            return ad.sum_all(ad.relu(x))

        # keep points away from the kink, where FD is ill-posed
        x = rng.uniform(-2, 2, 6)
        x[np.abs(x) < 1e-2] = 0.5
        return f, x
    if kind == "concat_last_axis":
        other = rng.uniform(-2, 2, 4)

        def f(x):
            y = ad.concat_last([x, x.tape.tensor(other)])
            return ad.sum_all(ad.mul(y, y))

        return f, rng.uniform(-2, 2, 3)
    if kind == "mean_over_axis":

        def f(x):
            y = ad.mean_over_axis(x, 0)
            return ad.sum_all(ad.mul(y, y))

        return f, rng.uniform(-2, 2, (4, 3))
    if kind == "squared_euclidean_distance":
        other = rng.uniform(-2, 2, 5)

        def f(x):
            return ad.squared_distance(x, x.tape.tensor(other))

        return f, rng.uniform(-2, 2, 5)
    raise AssertionError(kind)


@pytest.mark.parametrize("kind", FORWARD_OP_KINDS)
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(20):
        f, x = _random_scalar_graph(kind, rng)
        report = finite_difference_check(f, x, epsilon=1e-5, rtol=1e-4, name=kind)
        assert report.passed, str(report)


def test_sqrt_guarded_gradient_away_from_kink():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.uniform(1e-2, 4.0, 5)

        def f(t):
            return ad.sum_all(ad.sqrt_guarded(t))

        report = finite_difference_check(f, x, name="sqrt_guarded")
        assert report.passed, str(report)


def test_internal_ops_match_finite_differences():
    rng = np.random.default_rng(12)

    def f_expand(x):
        y = ad.expand_rows(x, 4)
        return ad.sum_all(ad.mul(y, y))

    def f_take(x):
        y = ad.take_rows(x, 1, 3)
        return ad.sum_all(ad.mul(y, y))

    def f_reshape(x):
        y = ad.reshape(x, (6,))
        return ad.sum_all(ad.mul(y, y))

    for f, shape in ((f_expand, (5,)), (f_take, (4, 3)), (f_reshape, (2, 3))):
        report = finite_difference_check(f, rng.uniform(-2, 2, shape), name="internal")
        assert report.passed, str(report)


def test_relu_gradient_at_half_is_one():
    tape, (x,) = taped(np.array([0.5]))
    tape.backward(ad.sum_all(ad.relu(x)))
    assert x.grad[0] == 1.0


def test_quadratic_finite_difference_is_sharp():
    report = finite_difference_check(
        lambda x: ad.sum_all(ad.mul(x, x)), np.array([1.0, 2.0]), rtol=1e-6
    )
    assert report.passed
    np.testing.assert_allclose(report.analytic, [2.0, 4.0], rtol=1e-12)
