"""Secondary acceptance: full training run on a generated dataset.

The dataset is produced through the primary package's command-line interface
(the published generation contract), the regressor trains for the default 10
epochs, and the export is validated through the primary's external-model
backend. This is the heavyweight end-to-end test of the component; expect
several minutes of runtime.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from dataset_io import load_dataset
from train import TrainConfig, train

from svdeconv.estimator import load_external_model


def report(name: str, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def focus_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "focus10k"
    cmd = [
        sys.executable, "-m", "svdeconv.cli", "dataset",
        "--sources", "synthetic", "--out", str(out),
        "--count", "10000", "--n-params", "1", "--seed", "5",
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="module")
def trained(focus_dataset, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("model")
    cfg = TrainConfig(
        data_dir=str(focus_dataset),
        arch="small_cnn",
        epochs=10,
        seed=3,
        out=str(out_dir / "model.onnx"),
        report=str(out_dir / "report.json"),
    )
    result, model = train(cfg, keep_model=True)
    return cfg, result, model


def test_validation_loss_decreases(trained):
    _, result, _ = trained
    report(
        "trainer-loss-decreases",
        result.val_loss[9] < result.val_loss[0],
        f"epoch-1 val {result.val_loss[0]:.5f} -> epoch-10 val {result.val_loss[9]:.5f} "
        f"({result.train_seconds:.0f}s)",
    )


def test_validation_r2_positive(trained):
    _, result, _ = trained
    report(
        "trainer-validation-r2",
        len(result.r2_per_param) == 1 and result.r2_per_param[0] > 0.0,
        f"validation R^2 {result.r2_per_param[0]:.3f}",
    )


def test_export_roundtrip_agreement(trained, focus_dataset):
    cfg, _, model = trained
    backend = load_external_model(cfg.out)
    patches, _ = load_dataset(focus_dataset, limit=100)
    model.eval()
    lo, hi = backend.coeff_range
    worst = 0.0
    for k in range(100):
        patch = patches[k, 0].astype(np.float64)
        got = backend.estimate(patch)
        with torch.no_grad():
            pred = model(torch.from_numpy(patch.astype(np.float32))[None, None])
        want = np.clip(pred.numpy().reshape(-1), lo, hi)
        worst = max(worst, float(np.abs(got - want).max()))
    report(
        "trainer-export-roundtrip",
        worst <= 1e-4,
        f"max per-coefficient deviation {worst:.2e} over 100 patches",
    )
