"""GCN / GraphSAGE / GIN encoders over a fixed topology."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from taipan.graph import AttributedGraph

VARIANTS = ("GCN", "GraphSAGE", "GIN")

ACTIVATIONS = {
    "elu": F.elu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


def _to_torch_sparse(m: sp.spmatrix, dtype) -> torch.Tensor:
    m = m.tocoo()
    idx = torch.from_numpy(np.vstack([m.row, m.col]).astype(np.int64))
    return torch.sparse_coo_tensor(
        idx, torch.from_numpy(m.data).to(dtype), m.shape, check_invariants=False
    ).coalesce()


class GraphTensors:
    """Propagation operators for one topology, built once and reused by every expert."""

    def __init__(self, adjacency: sp.spmatrix, dtype=torch.float64):
        a = sp.csr_matrix(adjacency, dtype=np.float64)
        n = a.shape[0]
        self.num_nodes = n
        deg = np.asarray(a.sum(axis=1)).ravel()
        a_hat = a + sp.eye(n, format="csr")
        d_inv_sqrt = 1.0 / np.sqrt(deg + 1.0)
        gcn = sp.diags(d_inv_sqrt) @ a_hat @ sp.diags(d_inv_sqrt)
        inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        self.gcn = _to_torch_sparse(gcn, dtype)
        self.mean = _to_torch_sparse(sp.diags(inv_deg) @ a, dtype)
        self.sum = _to_torch_sparse(a, dtype)

    @classmethod
    def from_graph(cls, g: AttributedGraph, dtype=torch.float64) -> "GraphTensors":
        return cls(g.adjacency, dtype)


@dataclass
class GnnEncoderConfig:
    variant: str = "GCN"
    layers: int = 2
    hidden_dim: int = 16
    activation: str = "elu"
    dropout: float = 0.05

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}; choose from {VARIANTS}")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class GnnEncoder(nn.Module):
    """Stack of message-passing layers, activation applied after every layer.

    GCN: act(Â H W + b) with Â the symmetric-normalised adjacency plus self-loops.
    GraphSAGE: act(W [h_v || mean_{u in N(v)} h_u] + b).
    GIN: act(MLP(h_v + sum_{u in N(v)} h_u)), i.e. epsilon fixed at 0.
    """

    def __init__(self, in_dim: int, config: GnnEncoderConfig):
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        self.act = ACTIVATIONS[config.activation]
        dims = [in_dim] + [config.hidden_dim] * config.layers
        self.layers = nn.ModuleList()
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            if config.variant == "GCN":
                self.layers.append(nn.Linear(d_in, d_out))
            elif config.variant == "GraphSAGE":
                self.layers.append(nn.Linear(2 * d_in, d_out))
            else:
                self.layers.append(nn.Sequential(nn.Linear(d_in, d_out), nn.ELU(), nn.Linear(d_out, d_out)))

    def forward(self, gt: GraphTensors, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"encoder expects width {self.in_dim}, got {x.shape[-1]}")
        if x.shape[0] != gt.num_nodes:
            raise ValueError(f"feature rows {x.shape[0]} != node count {gt.num_nodes}")
        h = x
        variant = self.config.variant
        for layer in self.layers:
            h = F.dropout(h, self.config.dropout, self.training)
            if variant == "GCN":
                h = torch.sparse.mm(gt.gcn, h @ layer.weight.T) + layer.bias
            elif variant == "GraphSAGE":
                h = layer(torch.cat([h, torch.sparse.mm(gt.mean, h)], dim=1))
            else:
                h = layer(h + torch.sparse.mm(gt.sum, h))
            h = self.act(h)
        return h


class GateNetwork(nn.Module):
    """softmax(act(MLP(x))) over ``n_experts`` with a two-layer MLP."""

    def __init__(self, in_dim: int, n_experts: int, hidden_dim: int, activation: str = "elu"):
        super().__init__()
        self.act = ACTIVATIONS[activation]
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, n_experts)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.act(self.fc2(self.act(self.fc1(x)))), dim=-1)


class UniformGate(nn.Module):
    """Fixed equal mixing weights (gating ablation)."""

    def __init__(self, n_experts: int):
        super().__init__()
        self.n_experts = n_experts

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.new_full((x.shape[0], self.n_experts), 1.0 / self.n_experts)
