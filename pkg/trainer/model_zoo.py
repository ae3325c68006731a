"""Regression architectures mapping a 1x128x128 patch to N blur coefficients.

``small_cnn`` (default) is a five-stage strided conv stack of about 1.3M
parameters sized for desk-scale datasets. ``alexnet_gray`` and ``resnet34``
are the classic large-capacity baselines adapted to single-channel input and
an N-way regression head.
"""

from __future__ import annotations

import torch
from torch import nn

ARCHITECTURES = ("small_cnn", "alexnet_gray", "resnet34")


def small_cnn(n_params: int, patch_size: int = 128) -> nn.Sequential:
    if patch_size % 32 != 0 or patch_size < 32:
        raise ValueError(f"patch size must be a positive multiple of 32, got {patch_size}")
    tail = patch_size // 32
    return nn.Sequential(
        nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(128, 256, 3, stride=2, padding=1), nn.ReLU(),
        nn.Flatten(),
        nn.Linear(256 * tail * tail, 224), nn.ReLU(),
        nn.Linear(224, n_params),
    )


def alexnet_gray(n_params: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(1, 64, 11, stride=4, padding=2), nn.ReLU(),
        nn.MaxPool2d(3, 2),
        nn.Conv2d(64, 192, 5, padding=2), nn.ReLU(),
        nn.MaxPool2d(3, 2),
        nn.Conv2d(192, 384, 3, padding=1), nn.ReLU(),
        nn.Conv2d(384, 256, 3, padding=1), nn.ReLU(),
        nn.Conv2d(256, 256, 3, padding=1), nn.ReLU(),
        nn.MaxPool2d(3, 2),
        nn.Flatten(),
        nn.Dropout(),
        nn.Linear(256 * 3 * 3, 4096), nn.ReLU(),
        nn.Dropout(),
        nn.Linear(4096, 4096), nn.ReLU(),
        nn.Linear(4096, n_params),
    )


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU()
        if stride != 1 or in_ch != out_ch:
            self.down_conv = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
            self.down_bn = nn.BatchNorm2d(out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x):
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.down_conv is not None:
            identity = self.down_bn(self.down_conv(x))
        return self.relu(out + identity)


class ResNet34(nn.Module):
    stages = ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2))

    def __init__(self, n_params: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.relu = nn.ReLU()
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        blocks = []
        in_ch = 64
        for out_ch, depth, stride in self.stages:
            blocks.append(BasicBlock(in_ch, out_ch, stride))
            blocks.extend(BasicBlock(out_ch, out_ch) for _ in range(depth - 1))
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(512, n_params)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.blocks(x)
        x = self.avgpool(x)
        return self.fc(torch.flatten(x, 1))


def build_model(arch: str, n_params: int, patch_size: int = 128) -> nn.Module:
    if arch == "small_cnn":
        return small_cnn(n_params, patch_size)
    if arch == "alexnet_gray":
        if patch_size != 128:
            raise ValueError("alexnet_gray is defined for 128-pixel patches")
        return alexnet_gray(n_params)
    if arch == "resnet34":
        if patch_size < 64:
            raise ValueError("resnet34 needs patches of at least 64 pixels")
        return ResNet34(n_params)
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
