import numpy as np
import pytest
import torch

from taipan.encoders import GateNetwork, GnnEncoder, GnnEncoderConfig, GraphTensors, UniformGate
from taipan.graph import AttributedGraph


def dense_ops(edges, n):
    a = np.zeros((n, n))
    for u, v in edges:
        a[u, v] = a[v, u] = 1.0
    deg = a.sum(1)
    a_hat = a + np.eye(n)
    d = np.diag(1.0 / np.sqrt(deg + 1))
    mean = np.divide(a, deg[:, None], out=np.zeros_like(a), where=deg[:, None] > 0)
    return d @ a_hat @ d, mean, a


def elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0)))


def test_isolated_node_gcn():
    enc = GnnEncoder(3, GnnEncoderConfig(layers=1, hidden_dim=2, dropout=0.0))
    gt = GraphTensors.from_graph(AttributedGraph(np.zeros((1, 3)), []))
    x = torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64)
    enc.double()
    w, b = enc.layers[0].weight.detach().numpy(), enc.layers[0].bias.detach().numpy()
    np.testing.assert_allclose(enc(gt, x).detach().numpy(), elu(x.numpy() @ w.T + b), atol=1e-12)


@pytest.mark.parametrize("variant", ["GCN", "GraphSAGE", "GIN"])
def test_symmetric_pair_identical(variant):
    enc = GnnEncoder(2, GnnEncoderConfig(variant=variant, dropout=0.0)).double()
    gt = GraphTensors.from_graph(AttributedGraph(np.zeros((2, 2)), [[0, 1]]))
    z = enc(gt, torch.ones(2, 2, dtype=torch.float64)).detach().numpy()
    np.testing.assert_array_equal(z[0], z[1])


def test_path_graph_gcn_hand_computation():
    edges = [(0, 1), (1, 2), (2, 3)]
    norm, _, _ = dense_ops(edges, 4)
    enc = GnnEncoder(2, GnnEncoderConfig(layers=1, hidden_dim=2, activation="identity", dropout=0.0)).double()
    with torch.no_grad():
        enc.layers[0].weight.copy_(torch.tensor([[1.0, 2.0], [-1.0, 0.5]]))
        enc.layers[0].bias.zero_()
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0], [0.5, 0.5]])
    gt = GraphTensors.from_graph(AttributedGraph(np.zeros((4, 1)), edges))
    out = enc(gt, torch.tensor(x)).detach().numpy()
    np.testing.assert_allclose(out, norm @ x @ np.array([[1.0, 2.0], [-1.0, 0.5]]).T, atol=1e-9)


def test_sage_and_gin_dense_oracles():
    rng = np.random.default_rng(0)
    edges = [(0, 1), (1, 2), (0, 3), (3, 4)]
    _, mean, adj = dense_ops(edges, 5)
    x = rng.standard_normal((5, 3))
    gt = GraphTensors.from_graph(AttributedGraph(np.zeros((5, 1)), edges))
    sage = GnnEncoder(3, GnnEncoderConfig("GraphSAGE", layers=1, hidden_dim=4, activation="tanh", dropout=0.0)).double()
    w, b = sage.layers[0].weight.detach().numpy(), sage.layers[0].bias.detach().numpy()
    ref = np.tanh(np.hstack([x, mean @ x]) @ w.T + b)
    np.testing.assert_allclose(sage(gt, torch.tensor(x)).detach().numpy(), ref, atol=1e-12)

    gin = GnnEncoder(3, GnnEncoderConfig("GIN", layers=1, hidden_dim=4, activation="relu", dropout=0.0)).double()
    l1, l2 = gin.layers[0][0], gin.layers[0][2]
    h = (x + adj @ x) @ l1.weight.detach().numpy().T + l1.bias.detach().numpy()
    ref = np.maximum(elu(h) @ l2.weight.detach().numpy().T + l2.bias.detach().numpy(), 0)
    np.testing.assert_allclose(gin(gt, torch.tensor(x)).detach().numpy(), ref, atol=1e-12)


def test_encoder_errors():
    with pytest.raises(ValueError):
        GnnEncoderConfig(variant="GAT")
    with pytest.raises(ValueError):
        GnnEncoderConfig(layers=0)
    with pytest.raises(ValueError):
        GnnEncoderConfig(dropout=1.0)
    enc = GnnEncoder(3, GnnEncoderConfig()).double()
    gt = GraphTensors.from_graph(AttributedGraph(np.zeros((2, 1)), []))
    with pytest.raises(ValueError):
        enc(gt, torch.zeros(2, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        enc(gt, torch.zeros(3, 3, dtype=torch.float64))


def test_gates_are_convex():
    g = GateNetwork(5, 3, 4).double()
    w = g(torch.randn(10, 5, dtype=torch.float64))
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(1).detach().numpy(), 1.0, atol=1e-12)
    u = UniformGate(4)(torch.zeros(3, 2))
    np.testing.assert_allclose(u.numpy(), 0.25)
