import numpy as np
import pytest

from tncompress import autodiff as ad
from tncompress.autodiff import Tape, gradcheck
from tncompress.errors import TapeError
from tncompress.gradchecks import away_from_zero, op_cases
from tncompress.models import DType
from tncompress.tensor import Tensor


def t64(data):
    return Tensor(np.asarray(data, dtype=np.float64), DType.F64)


def test_record_applies_op_eagerly():
    tape = Tape()
    x = tape.leaf("x", t64([-1.0, 2.0]))
    assert ad.relu(x).value.array.tolist() == [0.0, 2.0]


def test_constant_only_node_is_excluded_from_backward():
    tape = Tape()
    c = tape.constant(t64([1.0, 2.0]))
    y = ad.relu(c)
    assert not y.requires_grad
    assert not tape.nodes[y.node].requires_grad


def test_chain_records_nodes_in_order():
    tape = Tape()
    x = tape.leaf("x", t64([1.0, 2.0]))
    loss = ad.norm2(ad.mul(ad.add(x, x), x))
    assert len(tape) == 4
    assert [node.op.name for node in tape.nodes[1:]] == ["add", "mul", "norm2"]
    assert loss.node == 3


def test_squared_norm_gradient():
    tape = Tape()
    x = tape.leaf("x", t64([3.0, 4.0]))
    n = ad.norm2(x)
    grads = tape.backward(ad.mul(n, n))
    np.testing.assert_allclose(grads["x"].array, [6.0, 8.0], rtol=1e-12)


def test_relu_subgradient():
    tape = Tape()
    x = tape.leaf("x", t64([-1.0, 2.0]))
    grads = tape.backward(ad.sum_all(ad.relu(x)))
    assert grads["x"].array.tolist() == [0.0, 1.0]


def test_relu_gradient_at_zero_is_zero():
    tape = Tape()
    x = tape.leaf("x", t64([0.0]))
    assert tape.backward(ad.sum_all(ad.relu(x)))["x"].array.tolist() == [0.0]


def test_norm2_gradient_at_origin_is_zero():
    tape = Tape()
    x = tape.leaf("x", t64([0.0, 0.0]))
    assert tape.backward(ad.norm2(x))["x"].array.tolist() == [0.0, 0.0]


def test_contract_gradient_matches_finite_differences(rng):
    def loss(p):
        return ad.sum_all(ad.contract(p["A"], p["B"], [1], [0]))

    report = gradcheck(loss, {"A": rng.normal(size=(3, 4)), "B": rng.normal(size=(4, 2))}, tol=1e-7)
    assert report.passed, report.failures


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.leaf("x", t64([1.0, -2.0]))
    grads = tape.backward(ad.sum_all(ad.add(ad.scale(x, 3.0), x)))
    assert grads["x"].array.tolist() == [4.0, 4.0]


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf("x", t64([1.0]))
    tape.leaf("unused", t64([[1.0, 2.0]]))
    grads = tape.backward(ad.sum_all(x))
    assert grads["unused"].array.tolist() == [[0.0, 0.0]]


def test_gradient_of_sum_is_sum_of_gradients(rng):
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

    def grads_of(build):
        tape = Tape()
        x = tape.leaf("x", t64(a))
        return tape.backward(build(tape, x))["x"].array

    first = lambda tape, x: ad.norm2(ad.contract(x, tape.constant(t64(b)), [1], [0]))  # noqa: E731
    second = lambda tape, x: ad.sum_all(ad.mul(x, x))  # noqa: E731
    combined = grads_of(lambda tape, x: ad.add(first(tape, x), second(tape, x)))
    np.testing.assert_allclose(combined, grads_of(first) + grads_of(second), rtol=1e-12, atol=1e-14)


def test_backward_is_deterministic(rng):
    a = rng.normal(size=(4, 4))

    def run():
        tape = Tape()
        x = tape.leaf("x", t64(a))
        return tape.backward(ad.norm2(ad.relu(ad.contract(x, x, [1], [0]))))["x"]

    assert run().bitwise_equal(run())


def test_backward_needs_scalar_loss():
    tape = Tape()
    x = tape.leaf("x", t64([1.0, 2.0]))
    with pytest.raises(TapeError):
        tape.backward(ad.relu(x))


def test_cross_tape_inputs_are_rejected():
    x = Tape().leaf("x", t64([1.0]))
    y = Tape().leaf("y", t64([1.0]))
    with pytest.raises(TapeError):
        ad.add(x, y)


def test_duplicate_leaf_name_is_rejected():
    tape = Tape()
    tape.leaf("x", t64([1.0]))
    with pytest.raises(TapeError):
        tape.leaf("x", t64([2.0]))


def test_away_from_zero_margin(rng):
    assert np.abs(away_from_zero(rng, (100,), margin=1e-3)).min() >= 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_every_primitive_passes_gradcheck(seed):
    for name, loss, params in op_cases(seed):
        report = gradcheck(loss, params, tol=1e-6, scope=name)
        assert report.passed, (name, report.failures)


def test_gradcheck_reports_wrong_gradient():
    class BrokenScale(ad.Scale):
        def backward(self, ctx, grad):
            return (grad * 2.0 * self.factor,)

    def loss(p):
        return ad.sum_all(p["x"].tape.record(BrokenScale(3.0), p["x"]))

    report = gradcheck(loss, {"x": np.ones(3)})
    assert not report.passed
    assert report.failures[0].name == "x"


def test_gradcheck_floor_sets_absolute_or_relative_error():
    class BrokenScale(ad.Scale):
        def backward(self, ctx, grad):
            return (grad * 2.0 * self.factor,)

    def loss(p):
        return ad.sum_all(p["x"].tape.record(BrokenScale(1e-8), p["x"]))

    assert gradcheck(loss, {"x": np.ones(3)}).passed
    report = gradcheck(loss, {"x": np.ones(3)}, floor=1e-12)
    assert not report.passed
    assert report.entries[0].max_rel_error == pytest.approx(0.5, rel=1e-3)
    with pytest.raises(ValueError):
        gradcheck(loss, {"x": np.ones(3)}, floor=0.0)


def test_gradcheck_skips_relu_kink():
    report = gradcheck(lambda p: ad.sum_all(ad.relu(p["x"])), {"x": np.array([0.0, 1.0])})
    assert report.passed
    assert report.entries[0].skipped == 1
    assert report.entries[0].checked == 1
