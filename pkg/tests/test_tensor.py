import itertools

import numpy as np
import pytest

from tncompress import tensor as tc
from tncompress.errors import ShapeError
from tncompress.models import DType
from tncompress.tensor import Tensor


def t64(data):
    return Tensor(np.asarray(data, dtype=np.float64), DType.F64)


def test_contract_boundary_vectors_into_all_ones_brick():
    v = t64([1, 0])
    A = t64(np.ones((2, 2, 2, 2)))
    u = tc.contract(tc.contract(v, A, [0], [0]), v, [0], [0])
    assert u.shape == (2, 2)
    np.testing.assert_array_equal(u.array, np.ones((2, 2)))


def test_contract_identity_matrix():
    out = tc.contract(t64(np.eye(2)), t64([3, 4]), [1], [0])
    np.testing.assert_array_equal(out.array, [3, 4])


def test_contract_matches_matrix_product(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    out = tc.contract(t64(a), t64(b), [1], [0])
    assert out.shape == (2, 4)
    assert out.array[0, 0] == pytest.approx(sum(a[0, k] * b[k, 0] for k in range(3)), rel=1e-12)


def test_contract_matches_nested_loops(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 3, 2))
    out = tc.contract(t64(a), t64(b), [1, 2], [1, 0]).array
    expected = np.zeros((2, 2))
    for i, j, k, l in itertools.product(range(2), range(2), range(3), range(4)):
        expected[i, j] += a[i, k, l] * b[l, k, j]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_contract_is_bilinear(rng):
    a, a2, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    left = tc.contract(t64(a + a2), t64(b), [1], [0]).array
    right = tc.contract(t64(a), t64(b), [1], [0]).array + tc.contract(t64(a2), t64(b), [1], [0]).array
    np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-14)


def test_contract_rejects_dimension_mismatch():
    with pytest.raises(ShapeError, match=r"\(1, 0\)"):
        tc.contract(t64(np.ones((2, 3))), t64(np.ones((4, 2))), [1], [0])


def test_contract_rejects_bad_axes():
    a = t64(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        tc.contract(a, a, [2], [0])
    with pytest.raises(ShapeError):
        tc.contract(a, a, [0, 0], [0, 1])
    with pytest.raises(ShapeError):
        tc.contract(a, a, [0], [0, 1])


def test_outer_product_shape():
    assert tc.outer(t64([1, 2]), t64(np.ones((3, 4)))).shape == (2, 3, 4)


def test_reshape_keeps_row_major_offsets():
    t = t64(np.arange(6).reshape(2, 3))
    r = tc.reshape(t, (3, 2))
    assert r.data[5] == t.data[5] == 5
    assert tc.reshape(t64([1, 2, 3, 4]), (2, 2)).array.tolist() == [[1, 2], [3, 4]]
    assert tc.reshape(r, (2, 3)).bitwise_equal(t)


def test_reshape_rejects_wrong_size():
    with pytest.raises(ShapeError):
        tc.reshape(t64(np.ones(6)), (4, 2))
    with pytest.raises(ShapeError):
        tc.reshape(t64(np.ones(1)), (0,))


def test_permute_transpose_and_inverse(rng):
    assert tc.permute(t64([[1, 2], [3, 4]]), [1, 0]).array.tolist() == [[1, 3], [2, 4]]
    t = t64(rng.normal(size=(2, 3, 4)))
    assert tc.permute(t, [0, 1, 2]).bitwise_equal(t)
    perm = [2, 0, 1]
    assert tc.permute(tc.permute(t, perm), tc.inverse_permutation(perm)).bitwise_equal(t)
    with pytest.raises(ShapeError):
        tc.permute(t, [0, 0, 1])


def test_relu():
    assert tc.relu(t64([-1, 0, 2])).array.tolist() == [0, 0, 2]
    t = t64([0.5, 3.0])
    assert tc.relu(t).bitwise_equal(t)
    x = t64([-2.0, 1.0, -0.5])
    assert tc.relu(tc.relu(x)).bitwise_equal(tc.relu(x))


def test_elementwise():
    a = t64([1, 2])
    assert (a + Tensor.zeros((2,))).bitwise_equal(a)
    assert (a - a).array.tolist() == [0, 0]
    assert (2 * a).array.tolist() == [2, 4]
    assert (a * a).array.tolist() == [1, 4]
    with pytest.raises(ShapeError):
        tc.add(a, t64([1, 2, 3]))


def test_norm2(rng):
    assert tc.norm2(t64([3, 4])) == 5.0
    assert tc.norm2(Tensor.zeros((3, 3))) == 0.0
    t = t64(rng.normal(size=(4, 5)))
    assert tc.norm2(tc.scale(t, -2.5)) == pytest.approx(2.5 * tc.norm2(t), rel=1e-12)


def test_concat_and_sum_all():
    out = tc.concat([t64([1, 2]), t64([[3, 4], [5, 6]])])
    assert out.array.tolist() == [1, 2, 3, 4, 5, 6]
    assert tc.sum_all(out).item() == 21


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.array[0] = 5.0


def test_tensor_copies_its_source():
    source = np.array([1.0, 2.0])
    t = Tensor(source)
    source[0] = 9.0
    assert t.array[0] == 1.0


def test_scalar_tensor():
    t = Tensor.wrap(np.asarray(3.0))
    assert t.order == 0
    assert t.item() == 3.0
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_dtypes():
    assert Tensor(np.ones(2, dtype=np.float32)).dtype == DType.F32
    assert Tensor([1, 2]).dtype == DType.F64
    assert Tensor([1.0], DType.F64).astype(DType.F32).array.dtype == np.float32
