import numpy as np
import pytest

from svdeconv.errors import ModelLoadError
from svdeconv.onnxlite import GraphDef, Node, OnnxGraph, decode_model, encode_model, load_graph


def linear_graph(n_out=1, size=16, weight_value=0.0, bias_value=0.5, opset=13, metadata=None):
    """patch -> GlobalAveragePool -> Flatten -> Gemm -> coeffs"""
    w = np.full((n_out, 1), weight_value, dtype=np.float32)
    b = np.full((n_out,), bias_value, dtype=np.float32)
    nodes = [
        Node("GlobalAveragePool", ["patch"], ["pool"]),
        Node("Flatten", ["pool"], ["flat"], {"axis": 1}),
        Node("Gemm", ["flat", "w", "b"], ["coeffs"], {"transB": 1}),
    ]
    return GraphDef(
        nodes=nodes,
        initializers={"w": w, "b": b},
        inputs=[("patch", (1, 1, size, size))],
        outputs=[("coeffs", (1, n_out))],
        opset=opset,
        metadata=metadata or {},
    )


def test_roundtrip_structure(tmp_path):
    graph = linear_graph(n_out=3, metadata={"coeff_min": "0.0", "coeff_max": "2.0"})
    data = encode_model(graph)
    back = decode_model(data)
    assert [n.op_type for n in back.nodes] == ["GlobalAveragePool", "Flatten", "Gemm"]
    assert back.inputs == [("patch", (1, 1, 16, 16))]
    assert back.outputs == [("coeffs", (1, 3))]
    assert back.opset == 13
    assert back.metadata == {"coeff_min": "0.0", "coeff_max": "2.0"}
    assert np.array_equal(back.initializers["w"], graph.initializers["w"])


def test_linear_graph_executes(tmp_path):
    path = tmp_path / "m.onnx"
    path.write_bytes(encode_model(linear_graph(weight_value=2.0, bias_value=0.25)))
    graph = load_graph(path)
    x = np.full((1, 1, 16, 16), 3.0, dtype=np.float32)
    out = graph.run(x)
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(2.0 * 3.0 + 0.25, abs=1e-6)


def conv_reference(x, w, b, stride, pad):
    n_out, n_in, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((1, n_out, oh, ow))
    for o in range(n_out):
        for i in range(oh):
            for j in range(ow):
                region = xp[0, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[0, o, i, j] = np.sum(region * w[o]) + b[o]
    return out


def test_conv_matches_reference():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 10, 10)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=(4,)).astype(np.float32)
    nodes = [Node("Conv", ["patch", "w", "b"], ["coeffs"],
                  {"strides": [2, 2], "pads": [1, 1, 1, 1], "kernel_shape": [3, 3]})]
    graph = GraphDef(nodes, {"w": w, "b": b}, [("patch", (1, 3, 10, 10))],
                     [("coeffs", (1, 4, 5, 5))])
    out = OnnxGraph(graph).run(x)
    want = conv_reference(x, w, b, 2, 1)
    assert np.abs(out - want).max() < 1e-5


def test_maxpool_and_avgpool():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    g1 = GraphDef([Node("MaxPool", ["patch"], ["coeffs"],
                        {"kernel_shape": [2, 2], "strides": [2, 2]})],
                  {}, [("patch", (1, 1, 4, 4))], [("coeffs", (1, 1, 2, 2))])
    out = OnnxGraph(g1).run(x)
    assert np.array_equal(out[0, 0], [[5, 7], [13, 15]])
    g2 = GraphDef([Node("AveragePool", ["patch"], ["coeffs"],
                        {"kernel_shape": [2, 2], "strides": [2, 2]})],
                  {}, [("patch", (1, 1, 4, 4))], [("coeffs", (1, 1, 2, 2))])
    out = OnnxGraph(g2).run(x)
    assert np.array_equal(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_batchnorm_and_add_and_relu():
    x = np.array([[-1.0, 2.0]], dtype=np.float32).reshape(1, 2, 1, 1)
    nodes = [
        Node("BatchNormalization", ["patch", "s", "bias", "mean", "var"], ["bn"],
             {"epsilon": 0.0}),
        Node("Relu", ["bn"], ["r"]),
        Node("Add", ["r", "r"], ["a"]),
        Node("Flatten", ["a"], ["coeffs"], {"axis": 1}),
    ]
    init = {
        "s": np.array([2.0, 2.0], dtype=np.float32),
        "bias": np.array([0.0, 0.0], dtype=np.float32),
        "mean": np.array([0.0, 1.0], dtype=np.float32),
        "var": np.array([1.0, 1.0], dtype=np.float32),
    }
    graph = GraphDef(nodes, init, [("patch", (1, 2, 1, 1))], [("coeffs", (1, 2))])
    out = OnnxGraph(graph).run(x)
    assert np.allclose(out, [[0.0, 4.0]])


def test_reshape_via_int64_tensor():
    nodes = [Node("Reshape", ["patch", "shape"], ["coeffs"])]
    init = {"shape": np.array([1, 4], dtype=np.int64)}
    graph = GraphDef(nodes, init, [("patch", (1, 1, 2, 2))], [("coeffs", (1, 4))])
    out = OnnxGraph(graph).run(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
    assert out.shape == (1, 4)


def test_unsupported_operator_named():
    graph = GraphDef([Node("Softmax", ["patch"], ["coeffs"])], {},
                     [("patch", (1, 1, 4, 4))], [("coeffs", (1, 4))])
    with pytest.raises(ModelLoadError, match="Softmax"):
        OnnxGraph(graph)


def test_missing_file():
    with pytest.raises(ModelLoadError, match="not found"):
        load_graph("/nonexistent/model.onnx")


def test_junk_file_rejected(tmp_path):
    path = tmp_path / "junk.onnx"
    path.write_bytes(b"definitely not protobuf")
    with pytest.raises(ModelLoadError):
        load_graph(path)


def test_old_opset_rejected(tmp_path):
    path = tmp_path / "old.onnx"
    path.write_bytes(encode_model(linear_graph(opset=11)))
    with pytest.raises(ModelLoadError, match="opset"):
        load_graph(path)
