"""Minimal ONNX protobuf encoder (write-only).

Emits standard ONNX (opset 13) model bytes for small feed-forward graphs:
float32/int64 tensors in raw_data form, scalar/list attributes, one input
and one output with explicit static shapes, optional metadata properties.
"""

from __future__ import annotations

import struct

import numpy as np

_WIRE_VARINT = 0
_WIRE_LEN = 2
_WIRE_32BIT = 5


def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(num: int, wire: int) -> bytes:
    return _varint((num << 3) | wire)


def _f_varint(num: int, value: int) -> bytes:
    return _tag(num, _WIRE_VARINT) + _varint(value)


def _f_bytes(num: int, payload: bytes) -> bytes:
    return _tag(num, _WIRE_LEN) + _varint(len(payload)) + payload


def _f_str(num: int, text: str) -> bytes:
    return _f_bytes(num, text.encode("utf-8"))


def tensor(name: str, array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.int64:
        dtype_code, raw = 7, arr.astype("<i8").tobytes()
    else:
        dtype_code, raw = 1, arr.astype("<f4").tobytes()
    out = bytearray()
    for d in arr.shape:
        out += _f_varint(1, d)
    out += _f_varint(2, dtype_code)
    out += _f_str(8, name)
    out += _f_bytes(9, raw)
    return bytes(out)


def _attribute(name: str, value) -> bytes:
    out = bytearray(_f_str(1, name))
    if isinstance(value, float):
        out += _tag(2, _WIRE_32BIT) + struct.pack("<f", value)
        out += _f_varint(20, 1)
    elif isinstance(value, int):
        out += _f_varint(3, value)
        out += _f_varint(20, 2)
    elif isinstance(value, (list, tuple)):
        for v in value:
            out += _f_varint(8, int(v))
        out += _f_varint(20, 7)
    else:
        raise TypeError(f"unsupported attribute value for {name!r}: {value!r}")
    return bytes(out)


def node(op_type: str, inputs, outputs, **attrs) -> bytes:
    out = bytearray()
    for name in inputs:
        out += _f_str(1, name)
    for name in outputs:
        out += _f_str(2, name)
    out += _f_str(4, op_type)
    for key, value in attrs.items():
        out += _f_bytes(5, _attribute(key, value))
    return bytes(out)


def _value_info(name: str, shape) -> bytes:
    dims = b"".join(_f_bytes(1, _f_varint(1, int(d))) for d in shape)
    tensor_type = _f_varint(1, 1) + _f_bytes(2, dims)  # elem_type FLOAT
    return _f_str(1, name) + _f_bytes(2, _f_bytes(1, tensor_type))


def model(nodes, initializers, input_name, input_shape, output_name, output_shape,
          opset: int = 13, metadata: dict | None = None,
          producer: str = "deconv-trainer") -> bytes:
    graph = bytearray()
    for encoded in nodes:
        graph += _f_bytes(1, encoded)
    graph += _f_str(2, "net")
    for encoded in initializers:
        graph += _f_bytes(5, encoded)
    graph += _f_bytes(11, _value_info(input_name, input_shape))
    graph += _f_bytes(12, _value_info(output_name, output_shape))
    out = bytearray()
    out += _f_varint(1, 8)  # ir_version
    out += _f_str(2, producer)
    out += _f_bytes(7, bytes(graph))
    out += _f_bytes(8, _f_str(1, "") + _f_varint(2, opset))
    for key, value in (metadata or {}).items():
        out += _f_bytes(14, _f_str(1, key) + _f_str(2, str(value)))
    return bytes(out)
