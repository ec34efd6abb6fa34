import json

import numpy as np
import pytest
from typer.testing import CliRunner

from tncompress.checkpoint import load_checkpoint, save_checkpoint
from tncompress.data import MNIST_FILES, Dataset, serialize_idx
from tncompress.main import app
from tncompress import nn
from tncompress.models import DType, ModelName
from tncompress.tensor import Tensor
from tncompress.utils import read_csv, sha256_file

from .conftest import tiny_fc

runner = CliRunner()


def mnist_like(n: int, seed: int, split: str) -> Dataset:
    """28x28 images with a bright 4x4 block whose position encodes the label"""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.rint(rng.uniform(0, 40, size=(n, 1, 28, 28))) / 255
    for index, label in enumerate(labels):
        row, col = divmod(int(label), 5)
        images[index, 0, 4 + 8 * row : 8 + 8 * row, 2 + 5 * col : 6 + 5 * col] = 1.0
    return Dataset(images=Tensor(images, DType.F32), labels=labels, split=split)


@pytest.fixture
def data_dir(tmp_path):
    path = tmp_path / "mnist"
    path.mkdir()
    for split, n, seed in (("train", 128, 0), ("test", 64, 1)):
        images, labels = serialize_idx(mnist_like(n, seed, split))
        images_name, labels_name = MNIST_FILES[split]
        (path / images_name).write_bytes(images)
        (path / labels_name).write_bytes(labels)
    return path


@pytest.fixture
def base_args(tmp_path, data_dir):
    return [
        "--set",
        f"data.data_dir={data_dir}",
        "--set",
        f"output_dir={tmp_path / 'out'}",
        "--set",
        "train.epochs=2",
        "--set",
        "train.batch_size=32",
    ]


def compress_args(layers: str = '["fc2"]'):
    return [
        "--set",
        f"compression.layers={layers}",
        "--set",
        "compression.max_chunks=1",
        "--set",
        "compression.pretrain.max_steps=5",
        "--set",
        "compression.finetune.batch_size=32",
    ]


def test_train_compress_eval(tmp_path, base_args):
    out = tmp_path / "out"
    result = runner.invoke(app, ["train", *base_args])
    assert result.exit_code == 0, result.output
    baseline = out / "baseline.ckpt"
    _, header = load_checkpoint(baseline)
    assert header.model == "fc2" and header.meta["stage"] == "baseline"
    assert len(read_csv(out / "train_metrics.csv")) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert {"master", "init", "batching"} <= set(manifest["seeds"])
    assert any(entry["path"].endswith("baseline.ckpt") for entry in manifest["outputs"])
    assert any(entry["path"].endswith("train-images-idx3-ubyte") for entry in manifest["inputs"])

    result = runner.invoke(app, ["compress", str(baseline), *base_args, *compress_args()])
    assert result.exit_code == 0, result.output
    report = json.loads((out / "compression_report.json").read_text())
    assert report["order"] == "backward"
    assert report["layers"][0]["layer"] == "fc2"
    assert report["layers"][0]["P"] == 2048 and report["layers"][0]["N"] == 1
    rows = read_csv(out / "compression_report.csv")
    assert [row["layer"] for row in rows] == ["fc2", "TOTAL"]
    compressed, header = load_checkpoint(out / "compressed.ckpt")
    assert header.meta["stage"] == "compressed"
    assert compressed.param_store["fc2.weight"].plan.residual_size == 512

    result = runner.invoke(app, ["eval", str(out / "compressed.ckpt"), *base_args])
    assert result.exit_code == 0, result.output
    evaluation = json.loads((out / "eval.json").read_text())
    assert evaluation["split"] == "test"
    assert evaluation["accuracy"] == pytest.approx(report["eta"], abs=1e-12)
    assert f"{evaluation['accuracy']:.6f}" in result.stdout


def test_compress_with_no_layers_is_a_no_op(tmp_path, base_args):
    out = tmp_path / "out"
    assert runner.invoke(app, ["train", *base_args]).exit_code == 0
    result = runner.invoke(app, ["compress", str(out / "baseline.ckpt"), *base_args, *compress_args("[]")])
    assert result.exit_code == 0, result.output
    report = json.loads((out / "compression_report.json").read_text())
    assert report["layers"] == [] and report["rho_tot"] == 1.0


def test_compress_rejects_model_mismatch(tmp_path, base_args):
    checkpoint = tmp_path / "tiny.ckpt"
    save_checkpoint(tiny_fc(), checkpoint, seed=0)
    result = runner.invoke(app, ["compress", str(checkpoint), *base_args, *compress_args()])
    assert result.exit_code == 2


def test_invalid_config_exits_2(base_args):
    assert runner.invoke(app, ["train", *base_args, "--set", "model.name=vgg16"]).exit_code == 2
    assert runner.invoke(app, ["train", *base_args, "--set", "train.epoch=1"]).exit_code == 2
    assert runner.invoke(app, ["train", *base_args, "--set", "data.train_size=1000"]).exit_code == 2


def test_missing_data_exits_3(tmp_path):
    args = ["--set", f"data.data_dir={tmp_path / 'nowhere'}", "--set", f"output_dir={tmp_path / 'out'}"]
    assert runner.invoke(app, ["train", *args]).exit_code == 3


def test_corrupted_checkpoint_exits_3(tmp_path):
    checkpoint = tmp_path / "tiny.ckpt"
    save_checkpoint(tiny_fc(), checkpoint, seed=0)
    payload = bytearray(checkpoint.read_bytes())
    payload[40] ^= 0x10
    checkpoint.write_bytes(bytes(payload))
    result = runner.invoke(app, ["inspect", str(checkpoint), "--set", f"output_dir={tmp_path / 'out'}"])
    assert result.exit_code == 3


def test_out_of_range_label_exits_3(tmp_path, data_dir, base_args):
    labels = data_dir / MNIST_FILES["train"][1]
    payload = bytearray(labels.read_bytes())
    payload[-1] = 10
    labels.write_bytes(bytes(payload))
    assert runner.invoke(app, ["train", *base_args]).exit_code == 3


def test_diverging_training_exits_4(base_args):
    assert runner.invoke(app, ["train", *base_args, "--set", "train.lr=1e30"]).exit_code == 4


def test_inspect_writes_json_and_manifest(tmp_path):
    out = tmp_path / "out"
    checkpoint = tmp_path / "tiny.ckpt"
    digest = save_checkpoint(tiny_fc(), checkpoint, seed=0, meta={"eta_nn": 0.25})
    result = runner.invoke(app, ["inspect", str(checkpoint), "--set", f"output_dir={out}"])
    assert result.exit_code == 0, result.output
    info = json.loads((out / "inspect.json").read_text())
    assert info["header"]["meta"] == {"eta_nn": 0.25}
    assert info["dense_params"] == info["stored_params"]
    assert '"sha256"' in result.stdout
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "inspect"
    assert manifest["options"] == {"checkpoint": str(checkpoint)}
    assert {"path": str(checkpoint), "sha256": digest} in manifest["inputs"]


def test_gradcheck_ops(tmp_path):
    out = tmp_path / "out"
    output = tmp_path / "gradcheck.csv"
    args = ["gradcheck", "--scope", "ops", "--seed", "3", "--output", str(output), "--set", f"output_dir={out}"]
    result = runner.invoke(app, args)
    assert result.exit_code == 0, result.output
    assert "ops:" in result.stdout and "passed" in result.stdout
    rows = read_csv(output)
    assert rows and all(row["passed"] == "True" for row in rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gradcheck"
    assert manifest["options"] == {"scope": ["ops"], "seed": 3, "tol": 1e-6, "floor": 1.0}
    assert [entry["path"] for entry in manifest["outputs"]] == [str(output)]


def test_gradcheck_failure_exits_1(tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["gradcheck", "--scope", "ops", "--tol", "0", "--set", f"output_dir={out}"])
    assert result.exit_code == 1
    assert "FAILED" in result.stdout
    rows = read_csv(out / "gradcheck.csv")
    assert any(row["passed"] == "False" for row in rows)
    assert (out / "manifest.json").exists()


def test_gradcheck_unknown_scope_exits_2(tmp_path):
    args = ["gradcheck", "--scope", "everything", "--set", f"output_dir={tmp_path / 'out'}"]
    assert runner.invoke(app, args).exit_code == 2


def test_same_seed_gives_identical_checkpoint(tmp_path, data_dir):
    digests = []
    for name in ("first", "second"):
        out = tmp_path / name
        args = ["--set", f"data.data_dir={data_dir}", "--set", f"output_dir={out}", "--set", "train.epochs=1"]
        assert runner.invoke(app, ["train", *args]).exit_code == 0
        digests.append(sha256_file(out / "baseline.ckpt"))
    assert digests[0] == digests[1]


def test_eval_is_repeatable(tmp_path, data_dir):
    checkpoint = tmp_path / "tiny.ckpt"
    args = ["--set", f"data.data_dir={data_dir}"]
    save_checkpoint(nn.build_model(ModelName.FC2, seed=0), checkpoint, seed=0)
    results = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(app, ["eval", str(checkpoint), *args, "--set", f"output_dir={out}"])
        assert result.exit_code == 0, result.output
        results.append(json.loads((out / "eval.json").read_text())["accuracy"])
    assert results[0] == results[1]
