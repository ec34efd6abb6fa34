"""Command-line surface: train, compress, eval, gradcheck, inspect and the experiment sweeps.

Exit codes: 0 ok, 1 gradcheck failure, 2 config error, 3 data or checkpoint error,
4 numeric failure.
"""

import json
from functools import wraps
from loguru import logger
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import typer

from tncompress.checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from tncompress.compress import (
    compare_orders,
    compress_network,
    faithfulness_curve,
    report_rows,
    sweep_depth,
    sweep_overparam,
)
from tncompress.config import RunConfig, load_config, settings
from tncompress.data import Dataset, dataset_files, load_dataset, subset
from tncompress.errors import CheckpointError, ConfigError, DataFormatError, NumericError, ShapeError
from tncompress.gradchecks import SCOPES, run_scope
from tncompress.models import EpochMetrics, ModelName, RunManifest
from tncompress.nn import Network, accuracy, build_model, train
from tncompress.utils import derive_seed, manifest_files, model_rows, now, setup_logging, sha256_json, write_csv, write_manifest

app = typer.Typer(name="tncompress", help="Compress neural-network layers into automatically differentiable tensor networks")

EXIT_GRADCHECK = 1
EXIT_CODES: List[Tuple[type, int]] = [
    (ConfigError, 2),
    (ShapeError, 2),
    (DataFormatError, 3),
    (CheckpointError, 3),
    (FileNotFoundError, 3),
    (NumericError, 4),
]

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="TOML run config")
SET_OPTION = typer.Option(None, "--set", "-s", help="Override a config key, e.g. --set train.epochs=1")


def exit_on_error(func: Callable) -> Callable:
    """Map known failures to their exit codes"""

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except typer.Exit:
            raise
        except tuple(error for error, _ in EXIT_CODES) as e:
            code = next(code for error, code in EXIT_CODES if isinstance(e, error))
            logger.error(f"{type(e).__name__}: {e}")
            raise typer.Exit(code)

    return wrapper


class Run:
    """One CLI invocation: validated config, logging, and the manifest of inputs and outputs"""

    def __init__(
        self,
        command: str,
        config_path: Optional[Path],
        overrides: Optional[List[str]],
        options: Optional[Dict[str, Any]] = None,
    ):
        self.command = command
        self.options = options or {}
        self.config = load_config(config_path, overrides or [])
        self.output_dir = self.config.resolved_output_dir
        self.output_dir.mkdir(parents=True, exist_ok=True)
        setup_logging(settings.log_level, self.output_dir / f"{command}.log")
        self.inputs: List[Path] = [Path(config_path)] if config_path else []
        self.outputs: List[Path] = []
        self.started_at = now()
        logger.info(f"{command}: seed {self.config.seed}, output dir {self.output_dir}")

    @property
    def seed(self) -> int:
        return self.config.seed

    def seeds(self) -> Dict[str, int]:
        consumers = ("init", "batching", "subset-train", "subset-test")
        return {"master": self.seed, **{name: derive_seed(self.seed, name) for name in consumers}}

    def output(self, name: str) -> Path:
        path = self.output_dir / name
        self.outputs.append(path)
        return path

    def load_splits(self) -> Tuple[Dataset, Dataset]:
        config = self.config
        data_dir, dtype = config.resolved_data_dir, config.resolved_dtype
        splits = []
        for split, size in (("train", config.data.train_size), ("test", config.data.test_size)):
            dataset = load_dataset(config.data.dataset, data_dir, split, dtype)
            self.inputs.extend(dataset_files(data_dir, split, config.data.dataset))
            if size is not None:
                if size > len(dataset):
                    raise ConfigError(f"data.{split}_size={size} exceeds the {len(dataset)} {split} samples")
                dataset = subset(dataset, size, derive_seed(self.seed, f"subset-{split}"))
            splits.append(dataset)
        return splits[0], splits[1]

    def builder(self, input_shape: Tuple[int, ...]) -> Callable[[int], Network]:
        model = self.config.model
        return lambda seed: build_model(model.name, seed, self.config.resolved_dtype, model.width, input_shape)

    def finish(self) -> None:
        config = self.config.model_dump(mode="json")
        manifest = RunManifest(
            command=self.command,
            config=config,
            config_sha256=sha256_json(config),
            seeds=self.seeds(),
            options=self.options,
            inputs=manifest_files(self.inputs),
            outputs=manifest_files(self.outputs),
            started_at=self.started_at,
            finished_at=now(),
        )
        write_manifest(manifest, self.output_dir)


def _check_model(config: RunConfig, model: str) -> None:
    if ModelName(config.model.name).value != model:
        raise ConfigError(f"Checkpoint holds model {model} but the config names {config.model.name.value}")


@app.command("train")
@exit_on_error
def cmd_train(config: Optional[Path] = CONFIG_OPTION, overrides: Optional[List[str]] = SET_OPTION):
    """Train a baseline network and save its checkpoint with eta_NN"""
    run = Run("train", config, overrides)
    try:
        train_set, test_set = run.load_splits()
        net = run.builder(train_set.sample_shape)(derive_seed(run.seed, "init"))
        _, history = train(net, train_set, run.config.train, test_set=test_set, seed=derive_seed(run.seed, "batching"))
        eta_nn = history[-1].test_accuracy if history else accuracy(net, test_set)
        write_csv(run.output("train_metrics.csv"), model_rows(history), columns=list(EpochMetrics.model_fields))
        save_checkpoint(net, run.output("baseline.ckpt"), run.seed, meta={"eta_nn": eta_nn, "stage": "baseline"})
        logger.success(f"Baseline {net.model}: eta_NN = {eta_nn:.4f}")
    finally:
        run.finish()


@app.command("compress")
@exit_on_error
def cmd_compress(
    checkpoint: Path = typer.Argument(..., help="Baseline checkpoint"),
    config: Optional[Path] = CONFIG_OPTION,
    overrides: Optional[List[str]] = SET_OPTION,
):
    """Compress the configured layers of a checkpoint and write the compression report"""
    run = Run("compress", config, overrides)
    try:
        run.inputs.append(checkpoint)
        net, header = load_checkpoint(checkpoint)
        _check_model(run.config, header.model)
        train_set, test_set = run.load_splits()
        compression = run.config.compression
        net, report = compress_network(
            net, compression.layers, compression.order, compression, train_set, test_set, run.seed
        )
        write_csv(run.output("compression_report.csv"), report_rows(report))
        run.output("compression_report.json").write_text(report.model_dump_json(indent=2))
        meta = {"eta_nn": report.eta_nn, "eta": report.eta, "order": report.order.value, "stage": "compressed"}
        save_checkpoint(net, run.output("compressed.ckpt"), header.seed, meta=meta)
        logger.success(f"rho_tot = {report.rho_tot:.4g}, eta_NN = {report.eta_nn:.4f}, eta = {report.eta:.4f}")
    finally:
        run.finish()


@app.command("eval")
@exit_on_error
def cmd_eval(
    checkpoint: Path = typer.Argument(..., help="Checkpoint to evaluate"),
    split: str = typer.Option("test", help="train or test"),
    config: Optional[Path] = CONFIG_OPTION,
    overrides: Optional[List[str]] = SET_OPTION,
):
    """Print the classification accuracy of a checkpoint"""
    if split not in ("train", "test"):
        raise ConfigError(f"Unknown split {split}")
    run = Run("eval", config, overrides)
    try:
        run.inputs.append(checkpoint)
        net, _ = load_checkpoint(checkpoint)
        train_set, test_set = run.load_splits()
        value = accuracy(net, test_set if split == "test" else train_set)
        run.output("eval.json").write_text(json.dumps({"checkpoint": str(checkpoint), "split": split, "accuracy": value}))
        typer.echo(f"{value:.6f}")
    finally:
        run.finish()


@app.command("gradcheck")
@exit_on_error
def cmd_gradcheck(
    scope: List[str] = typer.Option(list(SCOPES), "--scope", help="ops, adtn and/or net"),
    seed: int = typer.Option(0, help="Seed for the random test inputs"),
    tol: float = typer.Option(
        1e-6, min=0.0, help="Tolerance on |analytic - numeric| / max(floor, |analytic|, |numeric|)"
    ),
    floor: float = typer.Option(
        1.0, click_type=click.FloatRange(min=0.0, min_open=True), help="Error denominator floor; below it the check is absolute"
    ),
    output: Optional[Path] = typer.Option(None, help="CSV file for the per-parameter results"),
    config: Optional[Path] = CONFIG_OPTION,
    overrides: Optional[List[str]] = SET_OPTION,
):
    """Check every backward pass against central finite differences"""
    for name in scope:
        if name not in SCOPES:
            raise ConfigError(f"Unknown gradcheck scope {name}, expected one of {SCOPES}")
    options = {"scope": list(scope), "seed": seed, "tol": tol, "floor": floor}
    run = Run("gradcheck", config, overrides, options=options)
    failures = 0
    try:
        rows = []
        for name in scope:
            report = run_scope(name, seed=seed, tol=tol, floor=floor)
            failures += len(report.failures)
            rows.extend({"scope": name, **row} for row in model_rows(report.entries))
            status = "passed" if report.passed else f"FAILED ({len(report.failures)} entries)"
            typer.echo(f"{name}: {len(report.entries)} parameters checked, {status}")
        if output is not None:
            run.outputs.append(output)
        write_csv(output or run.output("gradcheck.csv"), rows)
    finally:
        run.finish()
    if failures:
        raise typer.Exit(EXIT_GRADCHECK)


@app.command("inspect")
@exit_on_error
def cmd_inspect(
    checkpoint: Path = typer.Argument(..., help="Checkpoint to describe"),
    config: Optional[Path] = CONFIG_OPTION,
    overrides: Optional[List[str]] = SET_OPTION,
):
    """Print the header, parameter blocks and ADTN plans of a checkpoint as JSON"""
    run = Run("inspect", config, overrides, options={"checkpoint": str(checkpoint)})
    try:
        run.inputs.append(checkpoint)
        info = json.dumps(inspect_checkpoint(checkpoint), indent=2)
        run.output("inspect.json").write_text(info)
        typer.echo(info)
    finally:
        run.finish()


@app.command("sweep")
@exit_on_error
def cmd_sweep(config: Optional[Path] = CONFIG_OPTION, overrides: Optional[List[str]] = SET_OPTION):
    """Width sweep of LeNet-5: (s, N) -> 1/rho_tot and eta/eta_NN"""
    run = Run("sweep", config, overrides)
    try:
        train_set, test_set = run.load_splits()
        dtype, shape = run.config.resolved_dtype, train_set.sample_shape
        rows = sweep_overparam(
            lambda width, seed: build_model(ModelName.LENET5, seed, dtype, width, shape),
            run.config.experiments.widths,
            run.config.experiments.num_adtn,
            train_set,
            test_set,
            run.config,
        )
        write_csv(run.output("sweep.csv"), rows)
    finally:
        run.finish()


@app.command("faithfulness")
@exit_on_error
def cmd_faithfulness(config: Optional[Path] = CONFIG_OPTION, overrides: Optional[List[str]] = SET_OPTION):
    """eta_NN and eta for baselines trained on growing training subsets"""
    run = Run("faithfulness", config, overrides)
    try:
        train_set, test_set = run.load_splits()
        sizes = run.config.experiments.train_sizes
        if max(sizes) > len(train_set):
            raise ConfigError(f"experiments.train_sizes {sizes} exceed the {len(train_set)} training samples")
        rows = faithfulness_curve(run.builder(train_set.sample_shape), sizes, train_set, test_set, run.config)
        write_csv(run.output("faithfulness.csv"), rows)
    finally:
        run.finish()


@app.command("orders")
@exit_on_error
def cmd_orders(config: Optional[Path] = CONFIG_OPTION, overrides: Optional[List[str]] = SET_OPTION):
    """Backward versus forward layer order over several seeds"""
    run = Run("orders", config, overrides)
    try:
        train_set, test_set = run.load_splits()
        rows, medians = compare_orders(
            run.builder(train_set.sample_shape), run.config.experiments.seeds, train_set, test_set, run.config
        )
        write_csv(run.output("orders.csv"), rows)
        run.output("orders_median.json").write_text(json.dumps(medians, indent=2))
        typer.echo(json.dumps(medians))
    finally:
        run.finish()


@app.command("depth")
@exit_on_error
def cmd_depth(config: Optional[Path] = CONFIG_OPTION, overrides: Optional[List[str]] = SET_OPTION):
    """Compress one baseline with ADTNs of increasing depth M"""
    run = Run("depth", config, overrides)
    try:
        train_set, test_set = run.load_splits()
        rows = sweep_depth(
            run.builder(train_set.sample_shape), run.config.experiments.depths, train_set, test_set, run.config
        )
        write_csv(run.output("depth.csv"), rows)
    finally:
        run.finish()


if __name__ == "__main__":
    app()
