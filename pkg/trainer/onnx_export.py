"""Structural torch-to-ONNX conversion for the model-zoo architectures.

Walks the module tree directly instead of tracing: each supported layer type
emits its ONNX node(s) with weights captured from the evaluated model. The
resulting graph honors the estimation contract: input "patch" (float32,
1x1xHxW, zero-mean), output "coeffs" (float32, 1xN).
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

import onnx_wire as wire
from model_zoo import BasicBlock, ResNet34


class _GraphBuilder:
    def __init__(self):
        self.nodes = []
        self.initializers = []
        self.counter = 0

    def fresh(self, stem: str) -> str:
        self.counter += 1
        return f"{stem}_{self.counter}"

    def add_tensor(self, stem: str, array: np.ndarray) -> str:
        name = self.fresh(stem)
        self.initializers.append(wire.tensor(name, array))
        return name

    def conv(self, x: str, module: nn.Conv2d) -> str:
        w = self.add_tensor("w", module.weight.detach().numpy())
        inputs = [x, w]
        if module.bias is not None:
            inputs.append(self.add_tensor("b", module.bias.detach().numpy()))
        out = self.fresh("conv")
        pads = [module.padding[0], module.padding[1], module.padding[0], module.padding[1]]
        self.nodes.append(
            wire.node(
                "Conv", inputs, [out],
                kernel_shape=list(module.kernel_size),
                strides=list(module.stride),
                pads=pads,
            )
        )
        return out

    def batchnorm(self, x: str, module: nn.BatchNorm2d) -> str:
        names = [
            x,
            self.add_tensor("scale", module.weight.detach().numpy()),
            self.add_tensor("shift", module.bias.detach().numpy()),
            self.add_tensor("mean", module.running_mean.detach().numpy()),
            self.add_tensor("var", module.running_var.detach().numpy()),
        ]
        out = self.fresh("bn")
        self.nodes.append(
            wire.node("BatchNormalization", names, [out], epsilon=float(module.eps))
        )
        return out

    def relu(self, x: str) -> str:
        out = self.fresh("relu")
        self.nodes.append(wire.node("Relu", [x], [out]))
        return out

    def maxpool(self, x: str, module: nn.MaxPool2d) -> str:
        k = module.kernel_size if isinstance(module.kernel_size, (list, tuple)) else (
            module.kernel_size, module.kernel_size)
        s = module.stride if isinstance(module.stride, (list, tuple)) else (
            module.stride, module.stride)
        p = module.padding if isinstance(module.padding, (list, tuple)) else (
            module.padding, module.padding)
        out = self.fresh("pool")
        self.nodes.append(
            wire.node("MaxPool", [x], [out], kernel_shape=list(k), strides=list(s),
                      pads=[p[0], p[1], p[0], p[1]])
        )
        return out

    def global_avgpool(self, x: str) -> str:
        out = self.fresh("gap")
        self.nodes.append(wire.node("GlobalAveragePool", [x], [out]))
        return out

    def flatten(self, x: str) -> str:
        out = self.fresh("flat")
        self.nodes.append(wire.node("Flatten", [x], [out], axis=1))
        return out

    def linear(self, x: str, module: nn.Linear, out_name: str | None = None) -> str:
        w = self.add_tensor("w", module.weight.detach().numpy())
        b = self.add_tensor("b", module.bias.detach().numpy())
        out = out_name or self.fresh("fc")
        self.nodes.append(wire.node("Gemm", [x, w, b], [out], transB=1))
        return out

    def add(self, a: str, b: str) -> str:
        out = self.fresh("add")
        self.nodes.append(wire.node("Add", [a, b], [out]))
        return out


def _emit_sequential(builder: _GraphBuilder, modules, x: str) -> str:
    for module in modules:
        if isinstance(module, nn.Conv2d):
            x = builder.conv(x, module)
        elif isinstance(module, nn.BatchNorm2d):
            x = builder.batchnorm(x, module)
        elif isinstance(module, nn.ReLU):
            x = builder.relu(x)
        elif isinstance(module, nn.MaxPool2d):
            x = builder.maxpool(x, module)
        elif isinstance(module, nn.Flatten):
            x = builder.flatten(x)
        elif isinstance(module, nn.Linear):
            x = builder.linear(x, module)
        elif isinstance(module, nn.AdaptiveAvgPool2d):
            if module.output_size not in (1, (1, 1)):
                raise ValueError("only global average pooling is exportable")
            x = builder.global_avgpool(x)
        elif isinstance(module, nn.Dropout):
            continue  # inference graph
        elif isinstance(module, BasicBlock):
            x = _emit_basic_block(builder, module, x)
        else:
            raise ValueError(f"cannot export module {type(module).__name__}")
    return x


def _emit_basic_block(builder: _GraphBuilder, block: BasicBlock, x: str) -> str:
    main = builder.conv(x, block.conv1)
    main = builder.batchnorm(main, block.bn1)
    main = builder.relu(main)
    main = builder.conv(main, block.conv2)
    main = builder.batchnorm(main, block.bn2)
    if block.down_conv is not None:
        skip = builder.conv(x, block.down_conv)
        skip = builder.batchnorm(skip, block.down_bn)
    else:
        skip = x
    return builder.relu(builder.add(main, skip))


def export_model(model: nn.Module, patch_size: int, n_params: int,
                 coeff_range=None) -> bytes:
    """Serialize an evaluated model to ONNX bytes honoring the I/O contract."""
    model = model.eval()
    builder = _GraphBuilder()
    with torch.no_grad():
        if isinstance(model, nn.Sequential):
            last = _emit_sequential(builder, model, "patch")
        elif isinstance(model, ResNet34):
            x = builder.conv("patch", model.conv1)
            x = builder.batchnorm(x, model.bn1)
            x = builder.relu(x)
            x = builder.maxpool(x, model.maxpool)
            x = _emit_sequential(builder, model.blocks, x)
            x = builder.global_avgpool(x)
            last = builder.linear(builder.flatten(x), model.fc)
        else:
            raise ValueError(f"cannot export model type {type(model).__name__}")
    builder.nodes.append(wire.node("Identity", [last], ["coeffs"]))
    metadata = {}
    if coeff_range is not None:
        metadata = {"coeff_min": repr(float(coeff_range[0])),
                    "coeff_max": repr(float(coeff_range[1]))}
    return wire.model(
        builder.nodes,
        builder.initializers,
        "patch",
        (1, 1, patch_size, patch_size),
        "coeffs",
        (1, n_params),
        metadata=metadata,
    )
