"""Initial embedding and the customized temporal hypergraph encoder."""
from __future__ import annotations

import numpy as np

from .features import make_region_hypergraph, make_time_params
from .params import ParamBank
from .tensor import Tensor, as_tensor, einsum, leaky_relu


class InputError(ValueError):
    """Non-finite or malformed model input."""


def initial_embed(x_norm, mask, e0: Tensor) -> Tensor:
    """``E[b,r,t] = (M[b,r,t] * Xn[b,r,t]) @ E0``.

    ``x_norm`` (B, R, T, F); ``mask`` (B, R, T) cell mask or (B, R, T, F);
    ``e0`` (F, d).  Returns (B, R, T, d).
    """
    x = as_tensor(x_norm)
    if not np.all(np.isfinite(x.data)):
        raise InputError("normalized input contains NaN or Inf")
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == x.ndim - 1:
        m = m[..., None]
    if m.shape[:3] != x.shape[:3]:
        raise InputError(f"mask shape {m.shape} does not match input {x.shape}")
    return einsum("brtf,fd->brtd", x * m, e0)


def hyper_propagate(h: Tensor, e: Tensor, slope: float) -> Tensor:
    """``sigma(H^T sigma(H E))`` per region.

    ``h`` (R, H_T, T), ``e`` (B, R, T, d) -> (B, R, T, d).
    """
    edges = leaky_relu(einsum("rht,brtd->brhd", h, e), slope)
    return leaky_relu(einsum("rht,brhd->brtd", h, edges), slope)


def temporal_hypergraph_pass(e: Tensor, h: Tensor, w_t: Tensor, b_t: Tensor,
                             slope: float = 0.01) -> Tensor:
    """``Gamma_t = sigma(Ebar_t W_t + b_t + E_t)`` with ``Ebar`` from :func:`hyper_propagate`.

    ``e`` (B, R, T, d); ``h`` (R, H_T, T); ``w_t`` (B, T, d, d); ``b_t`` (B, T, d).
    """
    if h.shape[0] != e.shape[1] or h.shape[2] != e.shape[2]:
        raise InputError(f"hypergraph {h.shape} incompatible with embeddings {e.shape}")
    e_bar = hyper_propagate(h, e, slope)
    mixed = einsum("brtd,btde->brte", e_bar, w_t)
    bias = b_t.reshape(b_t.shape[0], 1, b_t.shape[1], b_t.shape[2])
    return leaky_relu(mixed + bias + e, slope)


class TemporalEncoder:
    """One temporal hypergraph layer owning its own customized-parameter bases."""

    def __init__(self, bank: ParamBank, prefix: str, d: int, d_prime: int, h_t: int,
                 window: int, rng: np.random.Generator, slope: float = 0.01):
        self.prefix = prefix
        self.slope = slope
        self.h_base = bank.add(f"{prefix}.h_base", (d_prime, h_t, window), window, rng)
        self.w_base = bank.add(f"{prefix}.w_base", (d_prime, d, d), d, rng)
        self.b_base = bank.add(f"{prefix}.b_base", (d_prime, d), d, rng)

    def __call__(self, e: Tensor, d_t: Tensor, c: Tensor) -> Tensor:
        h = make_region_hypergraph(c, self.h_base)
        w_t, b_t = make_time_params(d_t, self.w_base, self.b_base)
        return temporal_hypergraph_pass(e, h, w_t, b_t, self.slope)
