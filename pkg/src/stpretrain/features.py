"""Time features and the customized parameter learner.

Every customized weight is a contraction of a small feature vector (a time
embedding ``d_t`` or a region embedding ``c_r``) against a shared base tensor
along the ``d'`` axis.  Shapes carry an explicit batch axis ``B`` wherever the
feature depends on the input window.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .params import ParamBank
from .tensor import Tensor, as_tensor, einsum, leaky_relu, mean, softmax


@dataclass(frozen=True)
class TimeFeatures:
    """Normalised time-of-day and day-of-week per slot, both in [0, 1)."""

    tod: np.ndarray
    dow: np.ndarray

    def __post_init__(self):
        for name in ("tod", "dow"):
            arr = getattr(self, name)
            if np.any(arr < 0) or np.any(arr >= 1):
                raise ValueError(f"{name} values must lie in [0, 1)")

    def window(self, start: int, length: int) -> "TimeFeatures":
        return TimeFeatures(self.tod[start:start + length], self.dow[start:start + length])


def time_features(n_slots: int, slots_per_day: int, start_day_of_week: int = 0,
                  offset: int = 0) -> TimeFeatures:
    slots = np.arange(offset, offset + n_slots)
    tod = (slots % slots_per_day) / slots_per_day
    day = (start_day_of_week + slots // slots_per_day) % 7
    return TimeFeatures(tod.astype(np.float64), day / 7.0)


def init_time_mlp(bank: ParamBank, prefix: str, d_prime: int, rng: np.random.Generator) -> None:
    bank.add(f"{prefix}.e1", (d_prime,), 1, rng)
    bank.add(f"{prefix}.e2", (d_prime,), 1, rng)
    bank.add(f"{prefix}.w1", (d_prime, d_prime), d_prime, rng)
    bank.add(f"{prefix}.b1", (d_prime,), d_prime, rng)
    bank.add(f"{prefix}.w2", (d_prime, d_prime), d_prime, rng)
    bank.add(f"{prefix}.b2", (d_prime,), d_prime, rng)


def time_embedding(bank: ParamBank, prefix: str, tod, dow, slope: float = 0.01) -> Tensor:
    """``d_t = MLP(tod * e1 + dow * e2)`` for ``tod, dow`` of shape (B, T).

    The MLP is two affine layers with a LeakyReLU between them.
    Returns (B, T, d').
    """
    tod, dow = as_tensor(tod), as_tensor(dow)
    z = einsum("bt,k->btk", tod, bank[f"{prefix}.e1"]) + einsum("bt,k->btk", dow, bank[f"{prefix}.e2"])
    h = leaky_relu(einsum("btk,kj->btj", z, bank[f"{prefix}.w1"]) + bank[f"{prefix}.b1"], slope)
    return einsum("btk,kj->btj", h, bank[f"{prefix}.w2"]) + bank[f"{prefix}.b2"]


def make_time_params(d_t: Tensor, w_base: Tensor, b_base: Tensor) -> Tuple[Tensor, Tensor]:
    """Time-dynamic ``W_t`` (B, T, d, d) and ``b_t`` (B, T, d) from ``d_t`` (B, T, d')."""
    return einsum("btk,kde->btde", d_t, w_base), einsum("btk,kd->btd", d_t, b_base)


def make_region_hypergraph(c: Tensor, h_base: Tensor, r: Optional[int] = None) -> Tensor:
    """Region-specific temporal hypergraph ``H_r = c_r^T H_base``.

    With ``r`` given returns (H_T, T) for that region, else (R, H_T, T).
    """
    if r is not None:
        if not 0 <= r < c.shape[0]:
            raise IndexError(f"region {r} out of range for {c.shape[0]} regions")
        return einsum("k,kht->ht", _row(c, r), h_base)
    return einsum("rk,kht->rht", c, h_base)


def make_spatial_hypergraph(d_prime_t: Tensor, h_base: Tensor) -> Tensor:
    """Region-to-cluster membership per slot, softmax over the cluster axis.

    ``d_prime_t`` (B, T, d'), ``h_base`` (d', H_S, R) -> (B, H_S, R, T).
    """
    logits = einsum("btk,kir->birt", d_prime_t, h_base)
    return softmax(logits, axis=1)


def make_highlevel_hypergraph(d_t: Tensor, h_base: Tensor) -> Tensor:
    """Cluster-level hypergraph from time embeddings mean-pooled over the window.

    ``d_t`` (B, T, d'), ``h_base`` (d', H_M, H_S*T) -> (B, H_M, H_S*T).
    """
    pooled = mean(d_t, axis=1)
    return einsum("bk,kmn->bmn", pooled, h_base)


def make_region_output_params(c: Tensor, w_base: Tensor, b_base: Tensor,
                              r: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """Region-specific ``W''_r`` (d, d) and ``b''_r`` (d); all regions when ``r`` is None."""
    if r is not None:
        if not 0 <= r < c.shape[0]:
            raise IndexError(f"region {r} out of range for {c.shape[0]} regions")
        row = _row(c, r)
        return einsum("k,kde->de", row, w_base), einsum("k,kd->d", row, b_base)
    return einsum("rk,kde->rde", c, w_base), einsum("rk,kd->rd", c, b_base)


def _row(c: Tensor, r: int) -> Tensor:
    onehot = np.zeros(c.shape[0])
    onehot[r] = 1.0
    return einsum("r,rk->k", Tensor(onehot), c)
