"""Self-contained ONNX graph reader, writer and numpy executor.

Implements the protobuf wire encoding for the subset of the ONNX schema
needed to exchange small feed-forward CNN regressors: ModelProto, GraphProto,
NodeProto, AttributeProto, TensorProto and tensor type/shape metadata.
Files produced here are standard ONNX (opset 13) and files produced by other
exporters load as long as they stick to the supported operator set:

    Conv, Relu, LeakyRelu, MaxPool, AveragePool, GlobalAveragePool, Gemm,
    MatMul, Add, Flatten, Reshape, BatchNormalization, Identity, Dropout

Execution is float32 inference on batch-1 tensors via im2col convolutions;
no external runtime is required.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelLoadError

# --------------------------------------------------------------------------
# protobuf wire primitives

_WIRE_VARINT = 0
_WIRE_64BIT = 1
_WIRE_LEN = 2
_WIRE_32BIT = 5


def _encode_varint(value: int) -> bytes:
    if value < 0:
        value &= (1 << 64) - 1
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _decode_varint(buf: bytes, pos: int):
    result = 0
    shift = 0
    while True:
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise ModelLoadError("malformed varint")


def _tag(field_number: int, wire_type: int) -> bytes:
    return _encode_varint((field_number << 3) | wire_type)


def _field_varint(num: int, value: int) -> bytes:
    return _tag(num, _WIRE_VARINT) + _encode_varint(value)


def _field_bytes(num: int, payload: bytes) -> bytes:
    return _tag(num, _WIRE_LEN) + _encode_varint(len(payload)) + payload


def _field_string(num: int, text: str) -> bytes:
    return _field_bytes(num, text.encode("utf-8"))


def _field_float(num: int, value: float) -> bytes:
    return _tag(num, _WIRE_32BIT) + struct.pack("<f", value)


def _iter_fields(buf: bytes):
    pos = 0
    end = len(buf)
    while pos < end:
        key, pos = _decode_varint(buf, pos)
        num, wire = key >> 3, key & 0x7
        if wire == _WIRE_VARINT:
            value, pos = _decode_varint(buf, pos)
        elif wire == _WIRE_64BIT:
            value = buf[pos : pos + 8]
            pos += 8
        elif wire == _WIRE_LEN:
            length, pos = _decode_varint(buf, pos)
            value = buf[pos : pos + length]
            pos += length
        elif wire == _WIRE_32BIT:
            value = buf[pos : pos + 4]
            pos += 4
        else:
            raise ModelLoadError(f"unsupported wire type {wire}")
        yield num, wire, value


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


# --------------------------------------------------------------------------
# schema subset

_DT_FLOAT = 1
_DT_INT64 = 7


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.int64:
        dtype_code = _DT_INT64
        raw = arr.astype("<i8").tobytes()
    else:
        dtype_code = _DT_FLOAT
        raw = arr.astype("<f4").tobytes()
    out = bytearray()
    for d in arr.shape:
        out += _field_varint(1, d)
    out += _field_varint(2, dtype_code)
    out += _field_string(8, name)
    out += _field_bytes(9, raw)
    return bytes(out)


def _decode_tensor(buf: bytes):
    dims = []
    dtype_code = _DT_FLOAT
    name = ""
    raw = None
    floats = []
    ints = []
    for num, wire, value in _iter_fields(buf):
        if num == 1 and wire == _WIRE_VARINT:
            dims.append(_signed(value))
        elif num == 1 and wire == _WIRE_LEN:  # packed dims
            pos = 0
            while pos < len(value):
                v, pos = _decode_varint(value, pos)
                dims.append(_signed(v))
        elif num == 2:
            dtype_code = value
        elif num == 8:
            name = value.decode("utf-8")
        elif num == 9:
            raw = bytes(value)
        elif num == 4 and wire == _WIRE_LEN:  # packed float_data
            floats.extend(struct.unpack(f"<{len(value)//4}f", value))
        elif num == 7 and wire == _WIRE_LEN:  # packed int64_data
            pos = 0
            while pos < len(value):
                v, pos = _decode_varint(value, pos)
                ints.append(_signed(v))
    shape = tuple(dims)
    if raw is not None:
        if dtype_code == _DT_INT64:
            arr = np.frombuffer(raw, dtype="<i8")
        elif dtype_code == _DT_FLOAT:
            arr = np.frombuffer(raw, dtype="<f4")
        else:
            raise ModelLoadError(f"unsupported tensor data type {dtype_code} for {name!r}")
    elif floats:
        arr = np.array(floats, dtype=np.float32)
    elif ints:
        arr = np.array(ints, dtype=np.int64)
    else:
        arr = np.zeros(shape, dtype=np.float32)
    return name, arr.reshape(shape).copy()


def _encode_attribute(name: str, value) -> bytes:
    out = bytearray()
    out += _field_string(1, name)
    if isinstance(value, float):
        out += _field_float(2, value)
        out += _field_varint(20, 1)  # FLOAT
    elif isinstance(value, (bool, int, np.integer)):
        out += _field_varint(3, int(value))
        out += _field_varint(20, 2)  # INT
    elif isinstance(value, str):
        out += _field_bytes(4, value.encode("utf-8"))
        out += _field_varint(20, 3)  # STRING
    elif isinstance(value, (list, tuple, np.ndarray)):
        seq = list(value)
        if seq and isinstance(seq[0], float):
            for v in seq:
                out += _tag(7, _WIRE_32BIT)
                out += struct.pack("<f", v)
            out += _field_varint(20, 6)  # FLOATS
        else:
            for v in seq:
                out += _field_varint(8, int(v))
            out += _field_varint(20, 7)  # INTS
    else:
        raise ModelLoadError(f"cannot encode attribute {name!r} of type {type(value)}")
    return bytes(out)


def _decode_attribute(buf: bytes):
    name = ""
    f_val = None
    i_val = None
    s_val = None
    floats = []
    ints = []
    for num, wire, value in _iter_fields(buf):
        if num == 1:
            name = value.decode("utf-8")
        elif num == 2:
            f_val = struct.unpack("<f", value)[0]
        elif num == 3:
            i_val = _signed(value)
        elif num == 4:
            s_val = value.decode("utf-8")
        elif num == 7:
            if wire == _WIRE_32BIT:
                floats.append(struct.unpack("<f", value)[0])
            else:
                floats.extend(struct.unpack(f"<{len(value)//4}f", value))
        elif num == 8:
            if wire == _WIRE_VARINT:
                ints.append(_signed(value))
            else:
                pos = 0
                while pos < len(value):
                    v, pos = _decode_varint(value, pos)
                    ints.append(_signed(v))
    if ints:
        return name, ints
    if floats:
        return name, floats
    if i_val is not None:
        return name, i_val
    if f_val is not None:
        return name, f_val
    if s_val is not None:
        return name, s_val
    return name, None


@dataclass
class Node:
    op_type: str
    inputs: list
    outputs: list
    attrs: dict = field(default_factory=dict)
    name: str = ""


def _encode_node(node: Node) -> bytes:
    out = bytearray()
    for inp in node.inputs:
        out += _field_string(1, inp)
    for outp in node.outputs:
        out += _field_string(2, outp)
    if node.name:
        out += _field_string(3, node.name)
    out += _field_string(4, node.op_type)
    for key, value in node.attrs.items():
        out += _field_bytes(5, _encode_attribute(key, value))
    return bytes(out)


def _decode_node(buf: bytes) -> Node:
    node = Node(op_type="", inputs=[], outputs=[])
    for num, wire, value in _iter_fields(buf):
        if num == 1:
            node.inputs.append(value.decode("utf-8"))
        elif num == 2:
            node.outputs.append(value.decode("utf-8"))
        elif num == 3:
            node.name = value.decode("utf-8")
        elif num == 4:
            node.op_type = value.decode("utf-8")
        elif num == 5:
            key, attr = _decode_attribute(value)
            node.attrs[key] = attr
    return node


def _encode_value_info(name: str, shape) -> bytes:
    dims = b"".join(_field_bytes(1, _field_varint(1, int(d))) for d in shape)
    tensor_type = _field_varint(1, _DT_FLOAT) + _field_bytes(2, dims)
    return _field_string(1, name) + _field_bytes(2, _field_bytes(1, tensor_type))


def _decode_value_info(buf: bytes):
    name = ""
    shape = []
    for num, _, value in _iter_fields(buf):
        if num == 1:
            name = value.decode("utf-8")
        elif num == 2:
            for tnum, _, tval in _iter_fields(value):
                if tnum == 1:  # tensor_type
                    for fnum, _, fval in _iter_fields(tval):
                        if fnum == 2:  # shape
                            for dnum, _, dval in _iter_fields(fval):
                                if dnum == 1:  # dim
                                    dim = None
                                    for ddnum, dwire, ddval in _iter_fields(dval):
                                        if ddnum == 1 and dwire == _WIRE_VARINT:
                                            dim = _signed(ddval)
                                    shape.append(dim)
    return name, tuple(shape)


@dataclass
class GraphDef:
    nodes: list
    initializers: dict
    inputs: list  # (name, shape)
    outputs: list  # (name, shape)
    opset: int = 13
    metadata: dict = field(default_factory=dict)


def encode_model(graph: GraphDef, producer: str = "svdeconv") -> bytes:
    g = bytearray()
    for node in graph.nodes:
        g += _field_bytes(1, _encode_node(node))
    g += _field_string(2, "net")
    for name, arr in graph.initializers.items():
        g += _field_bytes(5, _encode_tensor(name, arr))
    for name, shape in graph.inputs:
        g += _field_bytes(11, _encode_value_info(name, shape))
    for name, shape in graph.outputs:
        g += _field_bytes(12, _encode_value_info(name, shape))
    model = bytearray()
    model += _field_varint(1, 8)  # ir_version
    model += _field_string(2, producer)
    model += _field_bytes(7, bytes(g))
    opset = _field_string(1, "") + _field_varint(2, graph.opset)
    model += _field_bytes(8, opset)
    for key, value in graph.metadata.items():
        entry = _field_string(1, key) + _field_string(2, value)
        model += _field_bytes(14, entry)
    return bytes(model)


def decode_model(data: bytes) -> GraphDef:
    graph_buf = None
    opset = 0
    metadata = {}
    try:
        for num, _, value in _iter_fields(data):
            if num == 7:
                graph_buf = value
            elif num == 8:
                domain, version = "", 0
                for onum, _, oval in _iter_fields(value):
                    if onum == 1:
                        domain = oval.decode("utf-8")
                    elif onum == 2:
                        version = _signed(oval)
                if domain in ("", "ai.onnx"):
                    opset = max(opset, version)
            elif num == 14:
                k = v = ""
                for enum_, _, eval_ in _iter_fields(value):
                    if enum_ == 1:
                        k = eval_.decode("utf-8")
                    elif enum_ == 2:
                        v = eval_.decode("utf-8")
                metadata[k] = v
    except (IndexError, struct.error) as exc:
        raise ModelLoadError(f"not a parseable ONNX model: {exc}") from exc
    if graph_buf is None:
        raise ModelLoadError("model has no graph")
    nodes = []
    initializers = {}
    inputs = []
    outputs = []
    for num, _, value in _iter_fields(graph_buf):
        if num == 1:
            nodes.append(_decode_node(value))
        elif num == 5:
            name, arr = _decode_tensor(value)
            initializers[name] = arr
        elif num == 11:
            inputs.append(_decode_value_info(value))
        elif num == 12:
            outputs.append(_decode_value_info(value))
    # drop initializer entries some exporters also list as graph inputs
    inputs = [(n, s) for n, s in inputs if n not in initializers]
    return GraphDef(
        nodes=nodes,
        initializers=initializers,
        inputs=inputs,
        outputs=outputs,
        opset=opset,
        metadata=metadata,
    )


# --------------------------------------------------------------------------
# numpy executor

def _pads4(attrs, default=(0, 0, 0, 0)):
    pads = attrs.get("pads")
    if pads is None:
        return default
    if len(pads) == 4:
        return tuple(int(p) for p in pads)
    raise ModelLoadError(f"unsupported pads {pads}")


def _im2col(x, kh, kw, sh, sw, pt, pl, pb, pr):
    _, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (h + pt + pb - kh) // sh + 1
    ow = (w + pl + pr - kw) // sw + 1
    cols = np.empty((c * kh * kw, oh * ow), dtype=x.dtype)
    idx = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                cols[idx] = xp[0, ci, i : i + sh * oh : sh, j : j + sw * ow : sw].ravel()
                idx += 1
    return cols, oh, ow


def _op_conv(x, weight, bias, attrs):
    if attrs.get("group", 1) != 1:
        raise ModelLoadError("grouped Conv is not supported")
    dil = attrs.get("dilations", [1, 1])
    if any(d != 1 for d in dil):
        raise ModelLoadError("dilated Conv is not supported")
    kh, kw = int(weight.shape[2]), int(weight.shape[3])
    sh, sw = (int(s) for s in attrs.get("strides", [1, 1]))
    pt, pl, pb, pr = _pads4(attrs)
    cols, oh, ow = _im2col(x, kh, kw, sh, sw, pt, pl, pb, pr)
    wmat = weight.reshape(weight.shape[0], -1)
    out = wmat @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape(1, weight.shape[0], oh, ow)


def _pool(x, attrs, reducer):
    kh, kw = (int(k) for k in attrs["kernel_shape"])
    sh, sw = (int(s) for s in attrs.get("strides", attrs["kernel_shape"]))
    pt, pl, pb, pr = _pads4(attrs)
    _, c, h, w = x.shape
    xp = np.pad(
        x,
        ((0, 0), (0, 0), (pt, pb), (pl, pr)),
        constant_values=-np.inf if reducer is np.max else 0.0,
    )
    oh = (h + pt + pb - kh) // sh + 1
    ow = (w + pl + pr - kw) // sw + 1
    out = np.empty((1, c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            window = xp[:, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
            out[:, :, i, j] = reducer(window, axis=(2, 3))[0]
    return out


class OnnxGraph:
    """Executable wrapper over a decoded graph definition."""

    def __init__(self, graph: GraphDef):
        self.graph = graph
        if len(graph.inputs) != 1:
            raise ModelLoadError(
                f"expected exactly one graph input, found {len(graph.inputs)}"
            )
        if len(graph.outputs) != 1:
            raise ModelLoadError(
                f"expected exactly one graph output, found {len(graph.outputs)}"
            )
        self.input_name, self.input_shape = graph.inputs[0]
        self.output_name, self.output_shape = graph.outputs[0]
        for node in graph.nodes:
            if node.op_type not in _OPS:
                raise ModelLoadError(f"unsupported operator {node.op_type!r}")

    def run(self, x: np.ndarray) -> np.ndarray:
        values = dict(self.graph.initializers)
        values[self.input_name] = np.asarray(x, dtype=np.float32)
        for node in self.graph.nodes:
            try:
                _OPS[node.op_type](node, values)
            except KeyError as exc:
                raise ModelLoadError(
                    f"node {node.name or node.op_type}: missing tensor {exc}"
                ) from exc
        if self.output_name not in values:
            raise ModelLoadError(f"graph never produced output {self.output_name!r}")
        return values[self.output_name]


def _run_conv(node, values):
    x = values[node.inputs[0]]
    w = values[node.inputs[1]]
    b = values[node.inputs[2]] if len(node.inputs) > 2 else None
    values[node.outputs[0]] = _op_conv(x, w, b, node.attrs)


def _run_relu(node, values):
    values[node.outputs[0]] = np.maximum(values[node.inputs[0]], 0.0)


def _run_leaky_relu(node, values):
    alpha = node.attrs.get("alpha", 0.01)
    x = values[node.inputs[0]]
    values[node.outputs[0]] = np.where(x >= 0, x, alpha * x)


def _run_maxpool(node, values):
    values[node.outputs[0]] = _pool(values[node.inputs[0]], node.attrs, np.max)


def _run_avgpool(node, values):
    values[node.outputs[0]] = _pool(values[node.inputs[0]], node.attrs, np.mean)


def _run_global_avgpool(node, values):
    x = values[node.inputs[0]]
    values[node.outputs[0]] = x.mean(axis=(2, 3), keepdims=True)


def _run_gemm(node, values):
    a = values[node.inputs[0]]
    b = values[node.inputs[1]]
    if node.attrs.get("transA", 0):
        a = a.T
    if node.attrs.get("transB", 0):
        b = b.T
    out = node.attrs.get("alpha", 1.0) * (a @ b)
    if len(node.inputs) > 2:
        out = out + node.attrs.get("beta", 1.0) * values[node.inputs[2]]
    values[node.outputs[0]] = out


def _run_matmul(node, values):
    values[node.outputs[0]] = values[node.inputs[0]] @ values[node.inputs[1]]


def _run_add(node, values):
    values[node.outputs[0]] = values[node.inputs[0]] + values[node.inputs[1]]


def _run_flatten(node, values):
    x = values[node.inputs[0]]
    axis = node.attrs.get("axis", 1)
    lead = int(np.prod(x.shape[:axis])) if axis > 0 else 1
    values[node.outputs[0]] = x.reshape(lead, -1)


def _run_reshape(node, values):
    x = values[node.inputs[0]]
    shape = [int(s) for s in values[node.inputs[1]]]
    values[node.outputs[0]] = x.reshape(shape)


def _run_batchnorm(node, values):
    x = values[node.inputs[0]]
    scale, bias, mean, var = (values[n] for n in node.inputs[1:5])
    eps = node.attrs.get("epsilon", 1e-5)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    values[node.outputs[0]] = (x - mean.reshape(shape)) / np.sqrt(
        var.reshape(shape) + eps
    ) * scale.reshape(shape) + bias.reshape(shape)


def _run_identity(node, values):
    values[node.outputs[0]] = values[node.inputs[0]]


_OPS = {
    "Conv": _run_conv,
    "Relu": _run_relu,
    "LeakyRelu": _run_leaky_relu,
    "MaxPool": _run_maxpool,
    "AveragePool": _run_avgpool,
    "GlobalAveragePool": _run_global_avgpool,
    "Gemm": _run_gemm,
    "MatMul": _run_matmul,
    "Add": _run_add,
    "Flatten": _run_flatten,
    "Reshape": _run_reshape,
    "BatchNormalization": _run_batchnorm,
    "Identity": _run_identity,
    "Dropout": _run_identity,
}


def load_graph(path) -> OnnxGraph:
    try:
        data = open(path, "rb").read()
    except FileNotFoundError as exc:
        raise ModelLoadError(f"model file not found: {path}") from exc
    graph = decode_model(data)
    if graph.opset and graph.opset < 13:
        raise ModelLoadError(f"opset {graph.opset} below required 13")
    return OnnxGraph(graph)
