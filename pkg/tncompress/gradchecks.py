"""Finite-difference gradient suites for the ``gradcheck`` command.

Scopes: ``ops`` covers every differentiable primitive, ``adtn`` the L^E loss of
brick-wall ADTNs with Q <= 6, ``net`` cross-entropy losses of small plain,
convolutional and ADTN-backed networks. Everything runs in f64.
"""

from typing import Callable, Dict, List, Tuple

import numpy as np

from tncompress import autodiff as ad
from tncompress import nn
from tncompress.adtn import AdtnWeight, build_brick_wall, contract_network, plan_partition
from tncompress.autodiff import Var, gradcheck
from tncompress.models import Activation, AdtnSpec, DType, GradcheckReport, LayerKind, LayerSpec
from tncompress.tensor import Tensor

SCOPES = ("ops", "adtn", "net")

Case = Tuple[str, Callable[[Dict[str, Var]], Var], Dict[str, np.ndarray]]


def away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...], margin: float = 0.1) -> np.ndarray:
    """Random signs with |x| >= margin, so ReLU-like kinks are out of finite-difference reach"""
    return rng.choice([-1.0, 1.0], size=shape) * (margin + rng.random(shape))


def _tape_of(params: Dict[str, Var]):
    return next(iter(params.values())).tape


def _projected(out: Var, weights: np.ndarray) -> Var:
    """<out, W> for a fixed random W, so every output entry carries its own gradient"""
    return ad.sum_all(ad.mul(out, out.tape.constant(Tensor(weights, DType.F64))))


def op_cases(seed: int = 0) -> List[Case]:
    rng = np.random.default_rng(seed)

    def normal(*shape):
        return rng.normal(size=shape)

    # projection weights, keyed by output shape
    output_shapes = {
        "2x5": (2, 5),
        "3x4": (3, 4),
        "6x4": (6, 4),
        "4x2x3": (4, 2, 3),
        "3x2x2": (3, 2, 2),
        "7": (7,),
        "conv": (2, 3, 5, 5),
        "conv_s2": (2, 3, 2, 2),
        "pool": (1, 2, 2, 2),
        "adaptive": (1, 2, 3, 3),
        "bias": (2, 3, 4, 4),
    }
    w = {key: normal(*shape) for key, shape in output_shapes.items()}
    labels = np.array([0, 2, 1, 2])
    return [
        ("contract", lambda p: _projected(ad.contract(p["contract.a"], p["contract.b"], [1, 2], [1, 0]), w["2x5"]),
         {"contract.a": normal(2, 3, 4), "contract.b": normal(4, 3, 5)}),
        ("outer", lambda p: _projected(ad.outer(p["outer.a"], p["outer.b"]), w["3x2x2"]),
         {"outer.a": normal(3), "outer.b": normal(2, 2)}),
        ("reshape", lambda p: _projected(ad.reshape(p["reshape.t"], (6, 4)), w["6x4"]),
         {"reshape.t": normal(2, 3, 4)}),
        ("permute", lambda p: _projected(ad.permute(p["permute.t"], [2, 0, 1]), w["4x2x3"]),
         {"permute.t": normal(2, 3, 4)}),
        ("relu", lambda p: _projected(ad.relu(p["relu.t"]), w["3x4"]),
         {"relu.t": away_from_zero(rng, (3, 4))}),
        ("add", lambda p: _projected(ad.add(p["add.a"], p["add.b"]), w["3x4"]),
         {"add.a": normal(3, 4), "add.b": normal(3, 4)}),
        ("sub", lambda p: _projected(ad.sub(p["sub.a"], p["sub.b"]), w["3x4"]),
         {"sub.a": normal(3, 4), "sub.b": normal(3, 4)}),
        ("mul", lambda p: _projected(ad.mul(p["mul.a"], p["mul.b"]), w["3x4"]),
         {"mul.a": normal(3, 4), "mul.b": normal(3, 4)}),
        ("scale", lambda p: _projected(ad.scale(p["scale.t"], 2.5), w["3x4"]),
         {"scale.t": normal(3, 4)}),
        ("norm2", lambda p: ad.norm2(p["norm2.t"]), {"norm2.t": normal(5)}),
        ("sum_all", lambda p: ad.sum_all(p["sum_all.t"]), {"sum_all.t": normal(2, 3)}),
        ("concat", lambda p: _projected(ad.concat([p["concat.a"], p["concat.b"]]), w["7"]),
         {"concat.a": normal(3), "concat.b": normal(2, 2)}),
        ("add_bias", lambda p: _projected(nn.add_bias(p["add_bias.x"], p["add_bias.b"]), w["bias"]),
         {"add_bias.x": normal(2, 3, 4, 4), "add_bias.b": normal(3)}),
        ("conv2d", lambda p: _projected(nn.forward_conv2d(p["conv2d.x"], p["conv2d.w"], padding=1), w["conv"]),
         {"conv2d.x": normal(2, 2, 5, 5), "conv2d.w": normal(3, 2, 3, 3)}),
        ("conv2d_stride", lambda p: _projected(nn.forward_conv2d(p["conv2d_stride.x"], p["conv2d_stride.w"], stride=2),
                                                w["conv_s2"]),
         {"conv2d_stride.x": normal(2, 2, 5, 5), "conv2d_stride.w": normal(3, 2, 2, 2)}),
        ("maxpool2d", lambda p: _projected(nn.forward_maxpool2d(p["maxpool2d.x"], 2), w["pool"]),
         {"maxpool2d.x": rng.permutation(32).reshape(1, 2, 4, 4) * 0.1}),
        ("adaptive_avgpool2d", lambda p: _projected(nn.forward_adaptive_avgpool2d(p["adaptive_avgpool2d.x"], 3),
                                                     w["adaptive"]),
         {"adaptive_avgpool2d.x": normal(1, 2, 5, 5)}),
        ("softmax_cross_entropy", lambda p: nn.softmax_cross_entropy(p["softmax_cross_entropy.logits"], labels),
         {"softmax_cross_entropy.logits": normal(4, 3)}),
    ]


def adtn_cases(seed: int = 0, max_Q: int = 6) -> List[Case]:
    rng = np.random.default_rng(seed)
    cases = []
    for Q in range(3, max_Q + 1):
        for M in (1, 2, 3):
            for activation in Activation:
                label = f"Q{Q}.M{M}.{activation.value}"
                spec = AdtnSpec(Q=Q, M=M, activation=activation, dtype=DType.F64)
                adtn = build_brick_wall(spec, seed=int(rng.integers(1 << 31)), noise=0.3, prefix=label)
                target = Tensor(rng.normal(size=spec.encoded_size), DType.F64)

                def loss(p, adtn=adtn, target=target):
                    encoded = ad.flatten(contract_network(adtn, [p[param.name] for param in adtn.params]))
                    return ad.norm2(ad.sub(encoded, _tape_of(p).constant(target)))

                cases.append((label, loss, {param.name: param.data for param in adtn.params}))
    return cases


def _net_case(label: str, net: nn.Network, rng: np.random.Generator, batch: int = 5) -> Case:
    images = Tensor(rng.random((batch,) + net.input_shape), DType.F64)
    labels = rng.integers(0, 3, size=batch)

    def loss(p):
        tape = _tape_of(p)
        return nn.softmax_cross_entropy(net.forward(tape, tape.constant(images)), labels)

    return label, loss, {param.name: param.data for param in net.parameters()}


def net_cases(seed: int = 0) -> List[Case]:
    rng = np.random.default_rng(seed)
    dense = [
        LayerSpec(name="flatten", kind=LayerKind.FLATTEN),
        LayerSpec(name="fc1", kind=LayerKind.LINEAR, in_features=16, out_features=10),
        LayerSpec(name="relu1", kind=LayerKind.RELU),
        LayerSpec(name="fc2", kind=LayerKind.LINEAR, in_features=10, out_features=3),
    ]
    conv = [
        LayerSpec(name="conv1", kind=LayerKind.CONV2D, in_channels=1, out_channels=2, kernel=3, padding=1),
        LayerSpec(name="relu1", kind=LayerKind.RELU),
        LayerSpec(name="pool1", kind=LayerKind.MAXPOOL2D, pool=2),
        LayerSpec(name="pool2", kind=LayerKind.ADAPTIVE_AVGPOOL2D, pool=1),
        LayerSpec(name="flatten", kind=LayerKind.FLATTEN),
        LayerSpec(name="fc1", kind=LayerKind.LINEAR, in_features=2, out_features=3),
    ]
    fc = nn.Network(dense, (1, 4, 4), model="fc-tiny", dtype=DType.F64).init_parameters(seed)
    cnn = nn.Network(conv, (1, 4, 4), model="cnn-tiny", dtype=DType.F64).init_parameters(seed)

    compressed = nn.Network(dense, (1, 4, 4), model="fc-tiny-adtn", dtype=DType.F64).init_parameters(seed)
    dense_weight = compressed.param_store["fc1.weight"].param.data
    plan = plan_partition(dense_weight.size, min_chunk=64, M=2, dtype=DType.F64, layer="fc1")
    compressed.param_store["fc1.weight"] = AdtnWeight.from_dense("fc1.weight", dense_weight, plan, seed=seed, noise=0.3)

    return [_net_case("fc", fc, rng), _net_case("cnn", cnn, rng), _net_case("fc_adtn", compressed, rng)]


def run_scope(scope: str, seed: int = 0, tol: float = 1e-6, h: float = 1e-5, floor: float = 1.0) -> GradcheckReport:
    if scope not in SCOPES:
        raise ValueError(f"Unknown gradcheck scope {scope}, expected one of {SCOPES}")
    cases = {"ops": op_cases, "adtn": adtn_cases, "net": net_cases}[scope](seed)
    report = GradcheckReport(scope=scope, tol=tol)
    for _, loss, params in cases:
        report = report.merge(gradcheck(loss, params, h=h, tol=tol, scope=scope, floor=floor))
    return report
