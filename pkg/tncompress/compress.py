"""Two-stage ADTN compression of network layers.

Stage 1 (pretrain) fits each chunk's ADTN to its weight slice under the Euclidean
loss L^E = |T' - T|. Stage 2 (finetune) optimises the task loss end to end, with
every compressed weight rebuilt from its ADTNs on each forward pass.
Layers are compressed one at a time; every finetune also updates the ADTNs of
the layers compressed before.
"""

import copy
import time
from concurrent.futures import ThreadPoolExecutor
from loguru import logger
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from tncompress import autodiff as ad
from tncompress.adtn import Adtn, AdtnWeight, contract_network, plan_partition, plan_uniform
from tncompress.autodiff import Tape
from tncompress.config import CompressionConfig, FinetuneConfig, PretrainConfig, RunConfig, settings
from tncompress.data import Dataset, subset
from tncompress.errors import ConfigError, NumericError, ShapeError, TncompressError
from tncompress.models import (
    CompressionOrder,
    CompressionPlan,
    CompressionReport,
    EpochMetrics,
    LayerReport,
    OptimizerKind,
    PretrainResult,
)
from tncompress.nn import Network, Optimizer, PlainWeight, accuracy, run_epoch, train
from tncompress.tensor import Tensor
from tncompress.utils import derive_seed

NetworkBuilder = Callable[[int], Network]


def pretrain(
    adtn: Adtn,
    target_slice: np.ndarray,
    config: PretrainConfig,
    label: str = "adtn",
) -> Tuple[Adtn, PretrainResult]:
    """Stage 1: minimise L^E between the flattened encoded tensor and target_slice.

    Stops when the best-seen loss improves by less than ``min_rel_improvement``
    over ``window`` steps, or after ``max_steps`` updates. The best-seen tensors
    are written back into the ADTN.
    """
    spec = adtn.spec
    target = np.asarray(target_slice.array if isinstance(target_slice, Tensor) else target_slice)
    target = target.reshape(-1).astype(adtn.params[0].data.dtype)
    if target.size != spec.encoded_size:
        raise ShapeError(f"{label}: target has {target.size} entries, ADTN encodes {spec.encoded_size}")
    target_tensor = Tensor.wrap(target)
    target_norm = float(np.linalg.norm(target))

    optimizer = Optimizer(OptimizerKind.ADAM, lr=config.lr)
    best_loss, best_data = float("inf"), [param.data for param in adtn.params]
    curve: List[float] = []
    best_history: List[float] = []
    converged = False
    started = time.perf_counter()

    for step in range(config.max_steps + 1):
        tape = Tape()
        tensors = [param.leaf(tape) for param in adtn.params]
        encoded = ad.flatten(contract_network(adtn, tensors))
        distance = ad.norm2(ad.sub(encoded, tape.constant(target_tensor)))
        loss = distance.item()
        if not np.isfinite(loss):
            raise NumericError(f"{label}: non-finite L^E {loss} at step {step} (lr={config.lr})")
        curve.append(loss)
        if loss < best_loss:
            best_loss, best_data = loss, [param.data for param in adtn.params]
        best_history.append(best_loss)

        if best_loss == 0.0:
            converged = True
            break
        if step >= config.window:
            reference = best_history[-config.window - 1]
            if (reference - best_loss) / reference < config.min_rel_improvement:
                converged = True
                break
        if step == config.max_steps:
            break

        objective = ad.mul(distance, distance) if config.squared else distance
        grads = tape.backward(objective)
        for param in adtn.params:
            param.grad = grads[param.name].array
        optimizer.step(adtn.params)
        if step % 500 == 0:
            logger.debug(f"{label}: step {step}, L^E {loss:.6g}")

    for param, data in zip(adtn.params, best_data):
        param.data = data
        param.grad = None

    result = PretrainResult(
        layer=label,
        steps=len(curve),
        initial_loss=curve[0],
        final_loss=best_loss,
        relative_loss=best_loss / target_norm if target_norm > 0 else best_loss,
        converged=converged,
        seconds=time.perf_counter() - started,
        loss_curve=curve,
    )
    if not converged:
        logger.warning(f"{label}: stage 1 stopped at max_steps={config.max_steps} before converging")
    logger.info(
        f"{label}: pre-trained in {result.steps} steps, L^E {result.initial_loss:.4g} -> {best_loss:.4g} "
        f"(relative {result.relative_loss:.3e})"
    )
    return adtn, result


def pretrain_weight(
    weight: AdtnWeight,
    dense: np.ndarray,
    config: PretrainConfig,
    workers: int = 1,
) -> List[PretrainResult]:
    """Pre-train every chunk of an ADTN-backed weight against the dense values it replaces"""
    flat = np.asarray(dense).reshape(-1)

    def job(index: int) -> PretrainResult:
        chunk = weight.plan.chunks[index]
        target = flat[chunk.offset : chunk.offset + chunk.size]
        _, result = pretrain(weight.adtns[index], target, config, label=f"{weight.name}.adtn{index}")
        result.chunk = index
        return result

    indices = range(len(weight.adtns))
    if workers > 1 and len(weight.adtns) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, indices))
    return [job(index) for index in indices]


def plan_layer(net: Network, layer_name: str, config: CompressionConfig) -> CompressionPlan:
    source = net.param_store[f"{layer_name}.weight"]
    num_params = int(np.prod(source.shape))
    kwargs = dict(d=config.d, min_chunk=config.min_chunk, M=config.M, activation=config.activation, dtype=net.dtype)
    if config.num_adtn is not None:
        return plan_uniform(num_params, config.num_adtn, layer=layer_name, **kwargs)
    return plan_partition(num_params, max_chunks=config.max_chunks, layer=layer_name, **kwargs)


def compress_layer(
    net: Network, layer_name: str, config: CompressionConfig, seed: int = 0
) -> Tuple[AdtnWeight, List[PretrainResult]]:
    """Replace a plain layer weight by pre-trained ADTNs (stage 1 only)"""
    key = f"{layer_name}.weight"
    source = net.param_store.get(key)
    if not isinstance(source, PlainWeight):
        raise ConfigError(f"Layer {layer_name} has no uncompressed weight to compress")
    plan = plan_layer(net, layer_name, config)
    dense = source.param.data
    weight = AdtnWeight.from_dense(key, dense, plan, seed=seed, noise=config.init_noise)
    results = pretrain_weight(weight, dense, config.pretrain, config.pretrain_workers)
    net.param_store[key] = weight
    logger.info(
        f"Layer {layer_name}: {plan.compressed_size}/{plan.num_params} entries in {plan.num_adtn} ADTN(s) "
        f"with {weight.adtn_param_count} parameters, residual {plan.residual_size}"
    )
    return weight, results


def set_finetune_trainable(net: Network, freeze_residual: bool) -> None:
    """ADTN tensors always train; T^res and never-compressed parameters train unless frozen"""
    for source in net.param_store.values():
        adtn_names = {param.name for param in source.adtn_parameters()} if isinstance(source, AdtnWeight) else set()
        for param in source.parameters():
            param.requires_grad = param.name in adtn_names or not freeze_residual


def finetune(
    net: Network,
    dataset: Dataset,
    config: FinetuneConfig,
    test_set: Optional[Dataset] = None,
    seed: int = 0,
    progress: Optional[bool] = None,
) -> Tuple[Network, List[EpochMetrics]]:
    """Stage 2: cross-entropy optimisation through the ADTN contractions"""
    set_finetune_trainable(net, config.freeze_residual)
    optimizer = Optimizer(OptimizerKind.ADAM, lr=config.lr)
    progress = settings.progress if progress is None else progress
    history = []
    for epoch in range(config.epochs):
        train_loss, train_accuracy = run_epoch(
            net, dataset, optimizer, config.batch_size, seed + epoch, progress, f"finetune {epoch + 1}"
        )
        test_accuracy = accuracy(net, test_set) if test_set is not None else None
        history.append(
            EpochMetrics(
                epoch=epoch + 1, train_loss=train_loss, train_accuracy=train_accuracy, test_accuracy=test_accuracy
            )
        )
        logger.info(f"finetune epoch {epoch + 1}/{config.epochs}: loss {train_loss:.4f}, test acc {test_accuracy}")
    net.set_trainable(True)
    return net, history


def compression_ratio(P: int, adtn_params: int) -> float:
    return adtn_params / P if P > 0 else 1.0


def ratios(compressed: Sequence[Tuple[int, int]], network_params: int) -> Tuple[List[float], float]:
    """Per-layer rho = calP / P and rho_tot = (#(ADTN) + #(T^res)) / #(NN).

    ``compressed`` holds (P, calP) per layer; #(T^res) is everything not encoded
    by an ADTN. A layer with P == 0 reports rho = 1.
    """
    if network_params <= 0:
        raise ValueError("Network has no parameters")
    per_layer = [compression_ratio(P, adtn_params) for P, adtn_params in compressed]
    adtn_total = sum(adtn_params for _, adtn_params in compressed)
    residual_total = network_params - sum(P for P, _ in compressed)
    return per_layer, (adtn_total + residual_total) / network_params


def order_layers(net: Network, layer_ids: Sequence[str], order: CompressionOrder) -> List[str]:
    for name in layer_ids:
        try:
            layer = net.layer(name)
        except KeyError as e:
            raise ConfigError(f"Unknown layer {name}; weight layers are {net.weight_layers()}") from e
        if not layer.has_weight:
            raise ConfigError(f"Layer {name} ({layer.kind.value}) has no weight to compress")
    ordered = sorted(set(layer_ids), key=net.layer_position)
    return ordered[::-1] if CompressionOrder(order) == CompressionOrder.BACKWARD else ordered


def compress_network(
    net: Network,
    layer_ids: Sequence[str],
    order: CompressionOrder,
    config: CompressionConfig,
    train_set: Dataset,
    test_set: Dataset,
    seed: int = 0,
    eta_nn: Optional[float] = None,
) -> Tuple[Network, CompressionReport]:
    """Compress layers one by one in the given order: plan -> pretrain chunks -> joint finetune"""
    report = CompressionReport(order=order, network_params=net.dense_num_params())
    report.eta_nn = accuracy(net, test_set) if eta_nn is None else eta_nn
    ordered = order_layers(net, layer_ids, order)
    if not ordered:
        logger.warning("No layers selected for compression, network left unchanged")
    logger.info(f"Compressing {ordered} ({CompressionOrder(order).value}), eta_NN = {report.eta_nn:.4f}")

    for position, name in enumerate(ordered):
        key = f"{name}.weight"
        original = net.param_store[key]
        started = time.perf_counter()
        try:
            weight, results = compress_layer(net, name, config, seed=derive_seed(seed, f"adtn-{name}"))
            pretrain_seconds = time.perf_counter() - started
            started = time.perf_counter()
            finetune(net, train_set, config.finetune, seed=derive_seed(seed, f"finetune-{name}"))
            eta = accuracy(net, test_set)
            layer_report = LayerReport(
                layer=name,
                P=weight.plan.compressed_size,
                adtn_params=weight.adtn_param_count,
                rho=compression_ratio(weight.plan.compressed_size, weight.adtn_param_count),
                N=weight.plan.num_adtn,
                residual=weight.plan.residual_size,
                eta_nn=report.eta_nn,
                eta=eta,
                eta_train=accuracy(net, train_set),
                stage1_losses=[result.final_loss for result in results],
                pretrain_seconds=pretrain_seconds,
                finetune_seconds=time.perf_counter() - started,
            )
            report.eta_curve.append(eta)
            logger.info(f"Layer {name} done ({position + 1}/{len(ordered)}): rho {layer_report.rho:.3e}, eta {eta:.4f}")
        except TncompressError as e:
            if not config.continue_on_error:
                raise
            logger.exception(f"Compression of layer {name} failed, keeping it uncompressed")
            net.param_store[key] = original
            layer_report = LayerReport(layer=name, P=0, adtn_params=0, rho=1.0, N=0, residual=0, failed=True, error=str(e))
        report.layers.append(layer_report)

    return net, summarize(net, report, train_set, test_set)


def summarize(net: Network, report: CompressionReport, train_set: Dataset, test_set: Dataset) -> CompressionReport:
    compressed = [
        (source.plan.compressed_size, source.adtn_param_count)
        for source in net.param_store.values()
        if isinstance(source, AdtnWeight)
    ]
    _, rho_tot = ratios(compressed, report.network_params)
    report.num_adtn = sum(
        source.plan.num_adtn for source in net.param_store.values() if isinstance(source, AdtnWeight)
    )
    report.adtn_params = sum(adtn_params for _, adtn_params in compressed)
    report.residual_params = report.network_params - sum(P for P, _ in compressed)
    report.rho_tot = rho_tot
    report.rho_tot_approx = report.residual_params / report.network_params
    report.eta = report.eta_curve[-1] if report.eta_curve else report.eta_nn
    report.eta_train = accuracy(net, train_set) if report.eta_curve else None
    return report


def report_rows(report: CompressionReport) -> List[Dict]:
    """One CSV row per compressed layer plus a TOTAL summary row"""
    rows = []
    for layer in report.layers:
        row = layer.model_dump(mode="json", exclude={"stage1_losses"})
        row["stage1_losses"] = ";".join(f"{loss:.6g}" for loss in layer.stage1_losses)
        row["order"] = report.order.value
        rows.append(row)
    rows.append(
        {
            "layer": "TOTAL",
            "P": sum(layer.P for layer in report.layers),
            "adtn_params": report.adtn_params,
            "rho": report.rho_tot,
            "rho_tot_approx": report.rho_tot_approx,
            "N": report.num_adtn,
            "residual": report.residual_params,
            "eta_nn": report.eta_nn,
            "eta": report.eta,
            "eta_train": report.eta_train,
            "order": report.order.value,
        }
    )
    return rows


def copy_network(net: Network) -> Network:
    return copy.deepcopy(net)


def experiment_layers(config: RunConfig) -> List[str]:
    """Experiments compress the linear head (fc1, fc2) unless layers are configured"""
    return list(config.compression.layers) or ["fc1", "fc2"]


def train_baseline(builder: NetworkBuilder, train_set: Dataset, test_set: Dataset, config: RunConfig, seed: int):
    net = builder(derive_seed(seed, "init"))
    train(net, train_set, config.train, seed=derive_seed(seed, "batching"))
    return net, accuracy(net, test_set)


def sweep_overparam(
    base_net_builder: Callable[[int, int], Network],
    widths: Sequence[int],
    num_adtns: Sequence[int],
    train_set: Dataset,
    test_set: Dataset,
    config: RunConfig,
) -> List[Dict]:
    """Table of (s, N, 1/rho_tot, eta/eta_NN); base_net_builder(width, seed) builds the width-s model"""
    layers = experiment_layers(config)
    rows = []
    for width in widths:
        net, eta_nn = train_baseline(lambda seed: base_net_builder(width, seed), train_set, test_set, config, config.seed)
        for num_adtn in num_adtns:
            compression = config.compression.model_copy(update={"num_adtn": num_adtn})
            _, report = compress_network(
                copy_network(net), layers, compression.order, compression, train_set, test_set, config.seed, eta_nn
            )
            rows.append(
                {
                    "s": width,
                    "N": num_adtn,
                    "rho_tot_inv": 1.0 / report.rho_tot,
                    "eta_ratio": report.eta / eta_nn if eta_nn > 0 else float("nan"),
                    "eta_nn": eta_nn,
                    "eta": report.eta,
                }
            )
            logger.info(f"sweep s={width} N={num_adtn}: 1/rho_tot {rows[-1]['rho_tot_inv']:.2f}, eta/eta_NN {rows[-1]['eta_ratio']:.4f}")
    return rows


def faithfulness_curve(
    builder: NetworkBuilder,
    train_sizes: Sequence[int],
    train_set: Dataset,
    test_set: Dataset,
    config: RunConfig,
) -> List[Dict]:
    """Table of (n_train, eta_NN, eta), ascending in n_train"""
    if any(size < 1 for size in train_sizes):
        raise ValueError(f"Training subset sizes must be positive, got {list(train_sizes)}")
    rows = []
    for size in sorted(train_sizes):
        part = subset(train_set, size, derive_seed(config.seed, f"subset-{size}"))
        net, eta_nn = train_baseline(builder, part, test_set, config, config.seed)
        _, report = compress_network(
            net, experiment_layers(config), config.compression.order, config.compression, part, test_set, config.seed, eta_nn
        )
        rows.append({"n_train": size, "eta_nn": eta_nn, "eta": report.eta})
        logger.info(f"faithfulness n={size}: eta_NN {eta_nn:.4f}, eta {report.eta:.4f}")
    return rows


def compare_orders(
    builder: NetworkBuilder,
    seeds: Sequence[int],
    train_set: Dataset,
    test_set: Dataset,
    config: RunConfig,
) -> Tuple[List[Dict], Dict[str, float]]:
    """Backward vs forward compression of the same baseline, per seed; returns rows and median final eta per order"""
    rows = []
    for seed in seeds:
        net, eta_nn = train_baseline(builder, train_set, test_set, config, seed)
        for order in (CompressionOrder.BACKWARD, CompressionOrder.FORWARD):
            _, report = compress_network(
                copy_network(net), experiment_layers(config), order, config.compression, train_set, test_set, seed, eta_nn
            )
            rows.append(
                {
                    "seed": seed,
                    "order": order.value,
                    "eta_nn": eta_nn,
                    "eta": report.eta,
                    "eta_curve": ";".join(f"{eta:.4f}" for eta in report.eta_curve),
                }
            )
    medians = {
        order.value: float(np.median([row["eta"] for row in rows if row["order"] == order.value]))
        for order in (CompressionOrder.BACKWARD, CompressionOrder.FORWARD)
    }
    logger.info(f"Median final eta per order: {medians}")
    return rows, medians


def sweep_depth(
    builder: NetworkBuilder,
    depths: Sequence[int],
    train_set: Dataset,
    test_set: Dataset,
    config: RunConfig,
) -> List[Dict]:
    """Compress the same baseline with M = 1, 2, ... TN layers; rows of (M, rho_tot, eta_train, eta)"""
    net, eta_nn = train_baseline(builder, train_set, test_set, config, config.seed)
    rows = []
    for depth in depths:
        compression = config.compression.model_copy(update={"M": depth})
        _, report = compress_network(
            copy_network(net), experiment_layers(config), compression.order, compression, train_set, test_set, config.seed, eta_nn
        )
        rows.append(
            {
                "M": depth,
                "adtn_params": report.adtn_params,
                "rho_tot": report.rho_tot,
                "eta_nn": eta_nn,
                "eta_train": report.eta_train,
                "eta": report.eta,
            }
        )
    return rows
