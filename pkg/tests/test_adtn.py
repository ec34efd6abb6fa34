import numpy as np
import pytest

from tncompress.adtn import (
    Adtn,
    AdtnWeight,
    Brick,
    adtn_param_count,
    brick_wall_wiring,
    build_brick_wall,
    contract_adtn,
    encoded_size,
    plan_partition,
    plan_uniform,
)
from tncompress.autodiff import gradcheck
from tncompress.errors import ShapeError
from tncompress.gradchecks import adtn_cases
from tncompress.models import Activation, AdtnSpec, DType
from tncompress.nn import Parameter


def spec(Q, M=1, activation=Activation.RELU, d=2):
    return AdtnSpec(Q=Q, M=M, d=d, activation=activation, dtype=DType.F64)


def layer_matrix(adtn: Adtn, layer: int) -> np.ndarray:
    """Materialized d^Q x d^Q map of one TN layer, built from Kronecker products of the bricks"""
    Q, d = adtn.spec.Q, adtn.spec.d
    matrix = np.eye(d**Q)
    for brick in adtn.wiring:
        if brick.layer != layer:
            continue
        top = brick.lines[0]
        local = adtn.params[brick.index].data.reshape(d * d, d * d).T
        matrix = np.kron(np.kron(np.eye(d**top), local), np.eye(d ** (Q - top - 2))) @ matrix
    return matrix


def dense_oracle(adtn: Adtn) -> np.ndarray:
    state = adtn.boundary
    for _ in range(adtn.spec.Q - 1):
        state = np.kron(state, adtn.boundary)
    for layer in range(adtn.spec.M):
        if layer > 0 and adtn.spec.activation == Activation.RELU:
            state = np.maximum(state, 0)
        state = layer_matrix(adtn, layer) @ state
    return state


@pytest.mark.parametrize(
    "Q,M,count", [(4, 1, 48), (17, 1, 256), (10, 3, 432), (3, 2, 64), (6, 1, 80)]
)
def test_parameter_count(Q, M, count):
    adtn = build_brick_wall(spec(Q, M))
    assert len(adtn.params) == M * (Q - 1)
    assert adtn_param_count(adtn) == count
    assert encoded_size(adtn.spec) == 2**Q


def test_parameter_count_is_linear_in_depth():
    counts = [adtn_param_count(build_brick_wall(spec(8, M))) for M in (1, 2, 3, 4)]
    assert np.diff(counts).tolist() == [counts[0]] * 3


def test_brick_wall_wiring_columns():
    bricks = brick_wall_wiring(5, 1)
    assert [brick.lines for brick in bricks] == [(0, 1), (2, 3), (1, 2), (3, 4)]
    assert [brick.column for brick in bricks] == [0, 0, 1, 1]
    assert [brick.index for brick in brick_wall_wiring(4, 2)] == list(range(6))
    assert [brick.layer for brick in brick_wall_wiring(4, 2)] == [0, 0, 0, 1, 1, 1]


@pytest.mark.parametrize("M", [1, 2, 3])
@pytest.mark.parametrize("activation", list(Activation))
def test_identity_tensors_give_one_hot(M, activation):
    adtn = build_brick_wall(spec(5, M, activation), noise=0.0)
    encoded = contract_adtn(adtn)
    assert encoded.shape == (2,) * 5
    expected = np.zeros(32)
    expected[0] = 1.0
    np.testing.assert_array_equal(encoded.data, expected)


@pytest.mark.parametrize("Q", [3, 4, 5, 6])
@pytest.mark.parametrize("M", [1, 2, 3])
@pytest.mark.parametrize("activation", list(Activation))
def test_contraction_matches_dense_layer_matrices(Q, M, activation):
    for seed in range(10):
        adtn = build_brick_wall(spec(Q, M, activation), seed=seed, noise=1.0, identity=False)
        expected = dense_oracle(adtn)
        encoded = contract_adtn(adtn).data
        np.testing.assert_allclose(encoded, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())


def test_contraction_with_d3():
    adtn = build_brick_wall(spec(4, 2, d=3), seed=1, noise=0.5)
    assert contract_adtn(adtn).shape == (3,) * 4
    np.testing.assert_allclose(contract_adtn(adtn).data, dense_oracle(adtn), rtol=1e-12, atol=1e-12)


def test_identity_activation_is_linear_in_each_tensor(rng):
    adtn = build_brick_wall(spec(5, 2, Activation.IDENTITY), seed=3, noise=0.5)
    k = 4
    a, a2 = rng.normal(size=(2, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2))

    def encode_with(tensor):
        adtn.params[k].data = tensor
        return contract_adtn(adtn).array

    alpha, beta = 0.7, -1.3
    combined = encode_with(alpha * a + beta * a2)
    expected = alpha * encode_with(a) + beta * encode_with(a2)
    np.testing.assert_allclose(combined, expected, rtol=1e-10, atol=1e-12)


def test_relu_is_not_applied_after_last_layer():
    adtn = build_brick_wall(spec(3, 1), noise=0.0)
    adtn.params[0].data = -adtn.params[0].data
    assert contract_adtn(adtn).data[0] == -1.0


@pytest.mark.parametrize("prefix", ["Q6.M2", "Q6.M3"])
def test_adtn_gradcheck_q6(prefix):
    cases = [case for case in adtn_cases(seed=0, max_Q=6) if case[0].startswith(prefix)]
    assert len(cases) == len(Activation)
    for name, loss, params in cases:
        report = gradcheck(loss, params, tol=1e-6, scope=name)
        assert report.passed, report.failures


def test_validation_rejects_wrong_tensor_count():
    params = [Parameter(f"A{k}", np.zeros((2, 2, 2, 2))) for k in range(2)]
    with pytest.raises(ShapeError):
        Adtn(spec(4), params)


def test_validation_rejects_wrong_tensor_shape():
    params = [Parameter(f"A{k}", np.zeros((2, 2, 2, 3))) for k in range(3)]
    with pytest.raises(ShapeError):
        Adtn(spec(4), params)


def test_validation_rejects_non_neighbouring_brick():
    params = [Parameter(f"A{k}", np.zeros((2, 2, 2, 2))) for k in range(3)]
    wiring = [Brick(0, 0, 0, (0, 1)), Brick(1, 0, 0, (1, 3)), Brick(2, 0, 1, (1, 2))]
    with pytest.raises(ShapeError):
        Adtn(spec(4), params, wiring=wiring)


def test_validation_rejects_bad_boundary():
    adtn = build_brick_wall(spec(3))
    with pytest.raises(ShapeError):
        Adtn(adtn.spec, adtn.params, boundary=np.ones(3))


def chunk_sizes(plan):
    return [chunk.size for chunk in plan.chunks]


def test_partition_examples():
    plan = plan_partition(3 * 2**10)
    assert chunk_sizes(plan) == [2**11, 2**10]
    assert [chunk.spec.Q for chunk in plan.chunks] == [11, 10]
    assert plan.residual_size == 0

    plan = plan_partition(2**17)
    assert [chunk.spec.Q for chunk in plan.chunks] == [17]

    plan = plan_partition(1000, min_chunk=256)
    assert chunk_sizes(plan) == [512, 256]
    assert plan.residual_size == 232
    assert plan.residual_offset == 768


def test_partition_small_layer_is_all_residual():
    plan = plan_partition(200, min_chunk=256)
    assert plan.chunks == []
    assert plan.residual_size == 200


def test_partition_max_chunks_keeps_largest():
    plan = plan_partition(784 * 256, max_chunks=1)
    assert chunk_sizes(plan) == [2**17]
    assert plan.residual_size == 784 * 256 - 2**17


def test_partition_random_sizes(rng):
    for num_params in rng.integers(1, 2_000_000, size=1000):
        plan = plan_partition(int(num_params))
        sizes = chunk_sizes(plan)
        assert sum(sizes) + plan.residual_size == num_params
        assert all(size & (size - 1) == 0 and size >= 256 for size in sizes)
        assert all(a > b for a, b in zip(sizes, sizes[1:]))
        assert plan.num_adtn == len(sizes)


def test_partition_with_d3():
    plan = plan_partition(1000, d=3, min_chunk=9)
    assert chunk_sizes(plan) == [729, 243, 27]
    assert plan.residual_size == 1


def test_partition_rejects_empty_layer():
    with pytest.raises(ValueError):
        plan_partition(0)


def test_uniform_plan():
    plan = plan_uniform(784 * 256, 2)
    assert chunk_sizes(plan) == [2**16, 2**16]
    assert [chunk.offset for chunk in plan.chunks] == [0, 2**16]
    assert plan_uniform(300, 2, min_chunk=256).chunks == []


def test_adtn_weight_splices_chunks_and_residual(rng):
    dense = rng.normal(size=(40, 25))
    plan = plan_partition(dense.size, min_chunk=256, dtype=DType.F64, M=2)
    weight = AdtnWeight.from_dense("fc.weight", dense, plan, seed=0, noise=0.1)
    decoded = weight.decode()
    assert decoded.shape == (40, 25)
    flat = decoded.reshape(-1)
    offset = 0
    for adtn, chunk in zip(weight.adtns, plan.chunks):
        np.testing.assert_array_equal(flat[offset : offset + chunk.size], contract_adtn(adtn).data)
        offset += chunk.size
    assert flat[plan.residual_offset :].tobytes() == dense.reshape(-1)[plan.residual_offset :].tobytes()
    assert weight.adtn_param_count == sum(adtn.num_params for adtn in weight.adtns)
    assert {param.name for param in weight.parameters()} >= {"fc.weight.residual", "fc.weight.adtn0.A0"}


def test_adtn_weight_checks_plan_consistency():
    plan = plan_partition(1000)
    with pytest.raises(ShapeError):
        AdtnWeight("w", (1000,), plan, [], None)
