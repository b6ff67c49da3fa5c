"""Hypergraph capsule clustering, cross-cluster propagation and read-back.

Layouts: region embeddings are (B, R, T, d); routing logits and weights are
(B, H_S, R, T); cluster embeddings are (B, H_S, T, d).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .features import make_highlevel_hypergraph, make_region_output_params, make_spatial_hypergraph
from .params import ParamBank
from .tensor import Tensor, einsum, leaky_relu, mul, softmax, squash, tabs, vector_norm

ROUTING_AXES = {"regions": 2, "clusters": 1}


@dataclass
class Transfer:
    """Region-to-cluster transferred information in factored form.

    ``squash(h * v) * v == (h * |h| * |v| / (1 + h^2 |v|^2)) * (v * v)``, so the
    (B, H_S, R, T, d) tensor is represented by a per-(i, r, t) ``scale`` and the
    per-(r, t) vector ``vv = v * v``.
    """

    scale: Tensor  # (B, H_S, R, T)
    vv: Tensor     # (B, R, T, d)

    def dense(self) -> Tensor:
        return einsum("birt,brtd->birtd", self.scale, self.vv)


TransferLike = Union[Transfer, Tensor]


@dataclass
class ClusterState:
    v: Tensor
    transfer: TransferLike
    h_prime: Tensor
    b: Tensor
    c: Tensor
    s: Tensor
    c_bar: Tensor
    s_bar: Tensor
    s_hat: Tensor
    psi: Tensor


def capsule_init(gamma: Tensor, v_mat: Tensor, c_bias: Tensor, h_prime: Tensor):
    """Normalised region capsules and the transferred information.

    ``v = squash(Gamma V^T + c)``; the transfer is returned factored
    (see :class:`Transfer`).
    """
    v = squash(einsum("brtd,ed->brte", gamma, v_mat) + c_bias, axis=-1)
    n = vector_norm(v, axis=-1)                       # (B, R, T)
    nb = n.reshape(n.shape[0], 1, n.shape[1], n.shape[2])
    h_abs_n = tabs(h_prime) * nb
    scale = h_prime * h_abs_n / (1.0 + h_abs_n * h_abs_n)
    return v, Transfer(scale, mul(v, v))


def transfer_dense(v: Tensor, h_prime: Tensor) -> Tensor:
    """Literal ``squash(H'[i,r,t] * v[r,t]) * v[r,t]`` as a (B, H_S, R, T, d) tensor."""
    scaled = einsum("birt,brtd->birtd", h_prime, v)
    vb = v.reshape(v.shape[0], 1, *v.shape[1:])
    return squash(scaled, axis=-1) * vb


def _aggregate(weights: Tensor, transfer: TransferLike) -> Tensor:
    if isinstance(transfer, Transfer):
        return einsum("birt,brtd->bitd", weights * transfer.scale, transfer.vv)
    return einsum("birt,birtd->bitd", weights, transfer)


def dynamic_routing(v: Tensor, transfer: TransferLike, iterations: int = 2,
                    norm: str = "regions"):
    """Agreement routing from region capsules to cluster capsules.

    Each iteration takes ``c = softmax(b)`` along the configured axis, forms
    ``s_i = sum_r c * vbar_{i|r}`` and adds ``v_r . squash(s_i)`` to ``b``,
    starting from ``b = 0``.  Returns the final ``(b, c, s)``.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    axis = ROUTING_AXES[norm]
    scale_shape = (v.shape[0], _clusters(transfer), v.shape[1], v.shape[2])
    b = Tensor(np.zeros(scale_shape))
    c = s = None
    for _ in range(iterations):
        c = softmax(b, axis=axis)
        s = _aggregate(c, transfer)
        b = b + einsum("brtd,bitd->birt", v, squash(s, axis=-1))
    return b, c, s


def _clusters(transfer: TransferLike) -> int:
    return transfer.scale.shape[1] if isinstance(transfer, Transfer) else transfer.shape[1]


def merge_weights(b: Tensor, h_prime: Tensor, transfer: TransferLike, norm: str = "regions"):
    """``c_bar = softmax(b + H')`` on the routing axis and ``s_bar = sum_r c_bar * vbar``."""
    c_bar = softmax(b + h_prime, axis=ROUTING_AXES[norm])
    return c_bar, _aggregate(c_bar, transfer)


def cross_cluster_pass(s_bar: Tensor, h2: Tensor, slope: float = 0.01) -> Tensor:
    """``squash(sigma(H''^T sigma(H'' S)) + S)`` on the (H_S*T, d) cluster matrix.

    ``s_bar`` (B, H_S, T, d), ``h2`` (B, H_M, H_S*T); rows are ordered
    cluster-major.  Returns (B, H_S, T, d).
    """
    bsz, n_clusters, steps, d = s_bar.shape
    if h2.shape[2] != n_clusters * steps:
        raise ValueError(f"high-level hypergraph {h2.shape} incompatible with {s_bar.shape}")
    flat = s_bar.reshape(bsz, n_clusters * steps, d)
    edges = leaky_relu(einsum("bmn,bnd->bmd", h2, flat), slope)
    back = leaky_relu(einsum("bmn,bmd->bnd", h2, edges), slope)
    return squash(back + flat, axis=-1).reshape(bsz, n_clusters, steps, d)


def propagate_back(s_hat: Tensor, weights: Tensor, w_out: Tensor, b_out: Tensor,
                   gamma: Tensor, slope: float = 0.01) -> Tensor:
    """``Psi[r,t] = sigma(sum_i w[i,r,t] s_hat[i,t] W''_r + b''_r + Gamma[r,t])``.

    ``w_out`` (R, d, d) and ``b_out`` (R, d) are region-specific.
    """
    agg = einsum("birt,bitd->brtd", weights, s_hat)
    mixed = einsum("brtd,rde->brte", agg, w_out)
    bias = b_out.reshape(1, b_out.shape[0], 1, b_out.shape[1])
    return leaky_relu(mixed + bias + gamma, slope)


def cluster_distribution(c_bar, norm: str = "regions") -> np.ndarray:
    """Per-(r, t) distribution over clusters derived from merged weights.

    With region-normalised routing the weights sum to one over regions, so they
    are renormalised over the cluster axis.  Returns a plain array.
    """
    arr = c_bar.data if isinstance(c_bar, Tensor) else np.asarray(c_bar)
    if norm == "clusters":
        return arr
    return arr / arr.sum(axis=1, keepdims=True)


class SpatialEncoder:
    """Capsule clustering over regions followed by cross-cluster propagation."""

    def __init__(self, bank: ParamBank, prefix: str, d: int, d_prime: int, h_s: int, h_m: int,
                 regions: int, window: int, rng: np.random.Generator, routing_iters: int = 2,
                 routing_norm: str = "regions", slope: float = 0.01):
        self.prefix = prefix
        self.slope = slope
        self.routing_iters = routing_iters
        self.routing_norm = routing_norm
        self.v_mat = bank.add(f"{prefix}.v", (d, d), d, rng)
        self.c_bias = bank.add(f"{prefix}.c", (d,), d, rng)
        # zero start: H' is uniform until the data pulls regions towards clusters
        self.hs_base = bank.add(f"{prefix}.hs_base", (d_prime, h_s, regions), None, rng)
        self.hm_base = bank.add(f"{prefix}.hm_base", (d_prime, h_m, h_s * window), h_s * window, rng)
        self.w_base = bank.add(f"{prefix}.w_base", (d_prime, d, d), d, rng)
        self.b_base = bank.add(f"{prefix}.b_base", (d_prime, d), d, rng)

    def __call__(self, gamma: Tensor, d_t: Tensor, d_prime_t: Tensor, c: Tensor,
                 readback_weights: str = "merged") -> ClusterState:
        h_prime = make_spatial_hypergraph(d_prime_t, self.hs_base)
        v, transfer = capsule_init(gamma, self.v_mat, self.c_bias, h_prime)
        b, c_route, s = dynamic_routing(v, transfer, self.routing_iters, self.routing_norm)
        c_bar, s_bar = merge_weights(b, h_prime, transfer, self.routing_norm)
        h2 = make_highlevel_hypergraph(d_t, self.hm_base)
        s_hat = cross_cluster_pass(s_bar, h2, self.slope)
        w_out, b_out = make_region_output_params(c, self.w_base, self.b_base)
        weights = c_bar if readback_weights == "merged" else c_route
        psi = propagate_back(s_hat, weights, w_out, b_out, gamma, self.slope)
        return ClusterState(v=v, transfer=transfer, h_prime=h_prime, b=b, c=c_route, s=s,
                            c_bar=c_bar, s_bar=s_bar, s_hat=s_hat, psi=psi)
