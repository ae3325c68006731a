#!/usr/bin/env python3
"""Train a patch-to-coefficients regressor and export it as an ONNX graph.

Usage:
    python train.py --data <dataset dir> --epochs 10 --arch small_cnn \
        --out model.onnx [--report report.json]

The dataset directory must follow the manifest contract produced by the
generation tool. The per-sample objective is the Euclidean loss

    E_k = 1/(2N) * sum_n (a_n - a~_n)^2

averaged over the batch. The exported graph takes a zero-mean float32 patch
shaped 1x1xHxW named "patch" and returns a 1xN "coeffs" row; the training
coefficient range is recorded in the model metadata.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from dataset_io import load_dataset
from model_zoo import ARCHITECTURES, build_model
from onnx_export import export_model


def euclidean_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch mean of 1/(2N) * sum_n (a_n - a~_n)^2."""
    return 0.5 * ((pred - target) ** 2).mean(dim=1).mean()


@dataclass
class TrainConfig:
    data_dir: str
    arch: str = "small_cnn"
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 64
    val_fraction: float = 0.1
    seed: int = 0
    out: str = "model.onnx"
    report: str | None = None
    limit: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must be in (0, 0.5]")
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown arch {self.arch!r}; choose from {ARCHITECTURES}")


@dataclass
class TrainReport:
    arch: str
    n_params: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    r2_per_param: list = field(default_factory=list)
    export_sha256: str = ""
    train_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1)


def _epoch_pass(model, patches, labels, order, batch_size, optimizer=None):
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x = torch.from_numpy(patches[idx])
        y = torch.from_numpy(labels[idx])
        if optimizer is not None:
            optimizer.zero_grad()
            loss = euclidean_loss(model(x), y)
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                loss = euclidean_loss(model(x), y)
        losses.append(float(loss.detach()) * len(idx))
    return sum(losses) / len(order)


def evaluate(model, patches, labels, batch_size: int = 128) -> list:
    """Per-parameter R^2 on a held-out split; None for zero-variance labels."""
    if len(labels) == 0:
        raise ValueError("empty evaluation split")
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            preds.append(model(torch.from_numpy(patches[start : start + batch_size])).numpy())
    pred = np.concatenate(preds, axis=0)
    scores = []
    for p in range(labels.shape[1]):
        t = labels[:, p].astype(np.float64)
        ss_tot = np.sum((t - t.mean()) ** 2)
        if ss_tot == 0.0:
            scores.append(None)
        else:
            scores.append(float(1.0 - np.sum((t - pred[:, p]) ** 2) / ss_tot))
    return scores


def train(cfg: TrainConfig, keep_model: bool = False):
    torch.manual_seed(cfg.seed)
    patches, labels = load_dataset(cfg.data_dir, cfg.limit)
    n_params = labels.shape[1]
    patch_size = patches.shape[2]
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(patches))
    n_val = max(1, int(round(cfg.val_fraction * len(patches))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("dataset too small for the validation split")

    model = build_model(cfg.arch, n_params, patch_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    report = TrainReport(arch=cfg.arch, n_params=n_params)
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        epoch_order = train_idx[rng.permutation(len(train_idx))]
        train_loss = _epoch_pass(model, patches, labels, epoch_order,
                                 cfg.batch_size, optimizer)
        model.eval()
        val_loss = _epoch_pass(model, patches, labels, val_idx, cfg.batch_size)
        if not np.isfinite(train_loss) or not np.isfinite(val_loss):
            raise RuntimeError(f"non-finite loss at epoch {epoch + 1}")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        print(
            f"epoch {epoch + 1}/{cfg.epochs} train {train_loss:.6f} "
            f"val {val_loss:.6f}",
            file=sys.stderr,
        )
    report.train_seconds = time.perf_counter() - started
    report.r2_per_param = evaluate(model, patches[val_idx], labels[val_idx])

    coeff_range = (float(labels.min()), float(labels.max()))
    payload = export_model(model, patch_size, n_params, coeff_range)
    Path(cfg.out).write_bytes(payload)
    report.export_sha256 = hashlib.sha256(payload).hexdigest()
    if cfg.report:
        Path(cfg.report).write_text(report.to_json())
    return (report, model) if keep_model else report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description=__doc__.splitlines()[0],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--data", required=True, help="dataset directory")
    parser.add_argument("--epochs", type=int, default=10, help="training epochs")
    parser.add_argument("--arch", default="small_cnn", choices=ARCHITECTURES,
                        help="model architecture")
    parser.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    parser.add_argument("--batch-size", type=int, default=64, help="batch size")
    parser.add_argument("--val-fraction", type=float, default=0.1,
                        help="held-out validation fraction")
    parser.add_argument("--seed", type=int, default=0, help="shuffling/init seed")
    parser.add_argument("--out", default="model.onnx", help="ONNX export path")
    parser.add_argument("--report", default=None, help="report JSON path")
    parser.add_argument("--limit", type=int, default=None,
                        help="cap the number of pairs loaded")
    args = parser.parse_args(argv)
    cfg = TrainConfig(
        data_dir=args.data, arch=args.arch, epochs=args.epochs, lr=args.lr,
        batch_size=args.batch_size, val_fraction=args.val_fraction,
        seed=args.seed, out=args.out, report=args.report, limit=args.limit,
    )
    report = train(cfg)
    print(report.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
