"""Node/edge propagation layers, the GCN baseline layer, pooling and the VAE parts.

All functions compose :mod:`censnet.autodiff` operations, so gradients
reach every weight (including the gate projections ``P_e``/``P_v``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .exceptions import ShapeError, ValidationError
from .graph import LineGraphBundle
from .optim import glorot_init

__all__ = [
    "ACTIVATIONS",
    "LayerParams",
    "CensNet",
    "EncoderOutput",
    "VAEParams",
    "node_layer",
    "edge_layer",
    "gcn_layer",
    "mean_pool",
    "vae_encode",
    "reparameterize",
    "vae_decode",
    "vae_decode_logits",
]

LOG_SIGMA_CLAMP = 10.0

ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "identity": ad.identity,
}


def _activation(sigma):
    if callable(sigma):
        return sigma
    try:
        return ACTIVATIONS[sigma]
    except KeyError:
        raise ValidationError(f"unknown activation {sigma!r}; choose from {sorted(ACTIVATIONS)}") from None


def node_layer(H_v, H_e, bundle: LineGraphBundle, W_v, P_e, sigma="relu", add_identity=False):
    """Node update gated by edge embeddings.

    ``sigma((T diag(H_e P_e) T^T (.) norm_Av) H_v W_v)``, evaluated on the
    sparsity pattern of ``norm_Av``.
    """
    H_v, H_e = ad._wrap(H_v), ad._wrap(H_e)
    if H_v.shape[0] != bundle.num_nodes or H_e.shape[0] != bundle.num_edges:
        raise ShapeError(
            f"node_layer: embeddings {H_v.shape}/{H_e.shape} vs graph "
            f"({bundle.num_nodes} nodes, {bundle.num_edges} edges)"
        )
    gate = ad.edge_gate_on_pattern(
        bundle.T, ad.matmul(H_e, P_e), bundle.norm_Av, add_identity, index=bundle.edge_gate
    )
    fused = ad.masked_hadamard_var(gate, bundle.norm_Av)
    return _activation(sigma)(ad.sparse_matmul(fused, bundle.norm_Av, ad.matmul(H_v, W_v)))


def edge_layer(H_e, H_v, bundle: LineGraphBundle, W_e, P_v, sigma="relu", add_identity=False):
    """Edge update gated by node embeddings, on the line graph."""
    H_v, H_e = ad._wrap(H_v), ad._wrap(H_e)
    if H_v.shape[0] != bundle.num_nodes or H_e.shape[0] != bundle.num_edges:
        raise ShapeError(
            f"edge_layer: embeddings {H_v.shape}/{H_e.shape} vs graph "
            f"({bundle.num_nodes} nodes, {bundle.num_edges} edges)"
        )
    gate = ad.node_gate_on_pattern(
        bundle.T, ad.matmul(H_v, P_v), bundle.norm_Ae, add_identity, index=bundle.node_gate
    )
    fused = ad.masked_hadamard_var(gate, bundle.norm_Ae)
    return _activation(sigma)(ad.sparse_matmul(fused, bundle.norm_Ae, ad.matmul(H_e, W_e)))


def gcn_layer(H, norm_A, W, sigma="relu"):
    """Plain GCN propagation ``sigma(norm_A H W)``."""
    return _activation(sigma)(ad.spmm_const(norm_A, ad.matmul(H, W)))


def mean_pool(H_v, segment_ids, num_graphs=None):
    return ad.mean_pool_rows(H_v, segment_ids, num_graphs)


@dataclass
class LayerParams:
    """Weights of one layer.

    ``kind == "node"``: ``W`` maps node widths and ``P`` projects edge
    embeddings to the gate. ``kind == "edge"``: the roles swap.
    """

    kind: str
    W: Variable
    P: Variable


class CensNet:
    """A stack of node and edge layers (default Node -> Edge -> Node).

    ``layers`` lists ``(kind, width)`` pairs. Hidden layers use ``activation``;
    the last layer uses ``output_activation``. Dropout hits both the node
    and edge inputs of every layer in training mode.
    """

    def __init__(self, node_dim, edge_dim, layers, rng, activation="relu",
                 output_activation="identity", dropout=0.0, add_identity=False):
        if not layers:
            raise ValidationError("at least one layer is required")
        self.node_dim, self.edge_dim = int(node_dim), int(edge_dim)
        self.layer_spec = [(str(k), int(w)) for k, w in layers]
        self.activation = activation
        self.output_activation = output_activation
        self.dropout = float(dropout)
        self.add_identity = bool(add_identity)
        self.layers = []
        dv, de = self.node_dim, self.edge_dim
        for i, (kind, width) in enumerate(self.layer_spec):
            if width <= 0:
                raise ValidationError("layer widths must be positive")
            if kind == "node":
                W, P = glorot_init(dv, width, rng), glorot_init(de, 1, rng)
                dv = width
            elif kind == "edge":
                W, P = glorot_init(de, width, rng), glorot_init(dv, 1, rng)
                de = width
            else:
                raise ValidationError(f"layer kind must be 'node' or 'edge', got {kind!r}")
            self.layers.append(LayerParams(
                kind,
                Variable(W, requires_grad=True, name=f"{kind}{i}.W"),
                Variable(P, requires_grad=True, name=f"{kind}{i}.P"),
            ))
        self.out_node_dim, self.out_edge_dim = dv, de

    def parameters(self):
        return [t for layer in self.layers for t in (layer.W, layer.P)]

    def forward(self, X, Z, bundle, train=False, rng=None, num_layers=None):
        """Return ``(H_v, H_e)`` after the first ``num_layers`` layers (default all)."""
        H_v, H_e = ad._wrap(X), ad._wrap(Z)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers[:num_layers]):
            sigma = self.output_activation if i == last else self.activation
            H_v_in = ad.dropout(H_v, self.dropout, rng, train)
            H_e_in = ad.dropout(H_e, self.dropout, rng, train)
            if layer.kind == "node":
                H_v = node_layer(H_v_in, H_e_in, bundle, layer.W, layer.P, sigma, self.add_identity)
            else:
                H_e = edge_layer(H_e_in, H_v_in, bundle, layer.W, layer.P, sigma, self.add_identity)
        return H_v, H_e

    def get_weights(self):
        return [p.value.copy() for p in self.parameters()]

    def set_weights(self, weights):
        params = self.parameters()
        if len(weights) != len(params):
            raise ShapeError(f"expected {len(params)} weight arrays, got {len(weights)}")
        for p, w in zip(params, weights):
            w = np.asarray(w, dtype=np.float64)
            if w.shape != p.shape:
                raise ShapeError(f"{p.name}: expected {p.shape}, got {w.shape}")
            p.value = w.copy()


# -- variational autoencoder ---------------------------------------------------

@dataclass
class EncoderOutput:
    mu: Variable
    log_sigma: Variable


@dataclass
class VAEParams:
    """Edge layer -> node layer -> two linear heads."""

    W_e: Variable
    P_v: Variable
    W_v: Variable
    P_e: Variable
    W_mu: Variable
    W_sigma: Variable

    @classmethod
    def init(cls, node_dim, edge_dim, rng, hidden=64, latent=32, edge_hidden=32):
        def var(r, c, name):
            return Variable(glorot_init(r, c, rng), requires_grad=True, name=name)

        return cls(
            W_e=var(edge_dim, edge_hidden, "W_e"),
            P_v=var(node_dim, 1, "P_v"),
            W_v=var(node_dim, hidden, "W_v"),
            P_e=var(edge_hidden, 1, "P_e"),
            W_mu=var(hidden, latent, "W_mu"),
            W_sigma=var(hidden, latent, "W_sigma"),
        )

    def parameters(self):
        return [self.W_e, self.P_v, self.W_v, self.P_e, self.W_mu, self.W_sigma]

    def get_weights(self):
        return [p.value.copy() for p in self.parameters()]

    def set_weights(self, weights):
        for p, w in zip(self.parameters(), weights):
            w = np.asarray(w, dtype=np.float64)
            if w.shape != p.shape:
                raise ShapeError(f"{p.name}: expected {p.shape}, got {w.shape}")
            p.value = w.copy()


def vae_encode(X, Z, bundle: LineGraphBundle, params: VAEParams, add_identity=False,
               dropout=0.0, rng=None, train=False):
    """Means and log standard deviations of the per-node latent Gaussians."""
    X, Z = ad.dropout(X, dropout, rng, train), ad.dropout(Z, dropout, rng, train)
    H_e = edge_layer(Z, X, bundle, params.W_e, params.P_v, "relu", add_identity)
    hidden = node_layer(X, H_e, bundle, params.W_v, params.P_e, "relu", add_identity)
    mu = ad.spmm_const(bundle.norm_Av, ad.matmul(hidden, params.W_mu))
    log_sigma = ad.spmm_const(bundle.norm_Av, ad.matmul(hidden, params.W_sigma))
    return EncoderOutput(mu, log_sigma)


def _clamp(x, lo, hi):
    x = ad._wrap(x)
    inside = (x.value > lo) & (x.value < hi)
    return ad.custom_op(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def reparameterize(enc: EncoderOutput, rng, eps=None):
    """``mu + exp(log_sigma) * eps`` with standard-normal ``eps``."""
    if eps is None:
        eps = rng.standard_normal(enc.mu.shape)
    sigma = ad.exp(_clamp(enc.log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
    return ad.add(enc.mu, ad.elementwise_mul(sigma, eps))


def vae_decode_logits(M):
    """Pairwise inner products ``M M^T``, symmetric to the last bit."""
    M = ad._wrap(M)
    m = M.value
    G = m @ m.T
    G = 0.5 * (G + G.T)
    return ad.custom_op(G, (M,), lambda g: ((g + g.T) @ m,))


def vae_decode(M):
    """Reconstructed adjacency ``sigmoid(M M^T)``."""
    return ad.sigmoid(vae_decode_logits(M))
