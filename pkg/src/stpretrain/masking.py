"""Cluster-aware adaptive masking, the cluster classifier and its KL alignment loss."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .params import ParamBank
from .tensor import ContractError, Tensor, as_tensor, einsum, leaky_relu, log, softmax, tsum

VISIBLE, RANDOM, ADAPTIVE = 0, 1, 2
ORIGIN_NAMES = {VISIBLE: "visible", RANDOM: "random", ADAPTIVE: "adaptive"}


@dataclass
class MaskPlan:
    """Cell mask for one window: ``cell_mask`` is 1 where visible, 0 where masked."""

    cell_mask: np.ndarray  # (R, T) int8
    origin: np.ndarray     # (R, T) uint8, see ORIGIN_NAMES
    epoch: int
    r_t: float
    r_a: float

    @property
    def masked_count(self) -> int:
        return int((self.cell_mask == 0).sum())

    def to_json(self) -> str:
        rows = [{"region": int(r), "t": int(t), "origin": ORIGIN_NAMES[int(self.origin[r, t])]}
                for r, t in zip(*np.nonzero(self.cell_mask == 0))]
        return json.dumps({"shape": list(self.cell_mask.shape), "epoch": self.epoch,
                           "r_t": self.r_t, "r_a": self.r_a, "masked": rows})

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        doc = json.loads(text)
        cell = np.ones(doc["shape"], dtype=np.int8)
        origin = np.zeros(doc["shape"], dtype=np.uint8)
        codes = {v: k for k, v in ORIGIN_NAMES.items()}
        for row in doc["masked"]:
            cell[row["region"], row["t"]] = 0
            origin[row["region"], row["t"]] = codes[row["origin"]]
        return cls(cell, origin, doc["epoch"], doc["r_t"], doc["r_a"])


def adaptive_ratio(epoch: int, max_epochs: int, gamma: float = 1.0) -> float:
    """Easy-to-hard schedule ``(e / E) ** gamma``."""
    if max_epochs <= 0:
        raise ContractError("max_epochs must be positive")
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    if not 0 <= epoch <= max_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {max_epochs}]")
    return (epoch / max_epochs) ** gamma


def build_mask(labels: np.ndarray, r_t: float, r_a: float, rng: np.random.Generator,
               epoch: int = 0) -> MaskPlan:
    """Mask ``round(J * r_t)`` of the ``J = R * T`` cells.

    ``round(m_t * r_a)`` of them are taken cluster by cluster: categories are
    drawn in random order, the first n-1 are masked whole and the n-th is
    masked partially to hit the adaptive budget exactly.  The rest are masked
    uniformly at random among the still-visible cells.
    """
    if not 0.0 < r_t < 1.0:
        raise ValueError(f"total mask ratio must lie in (0, 1), got {r_t}")
    if not 0.0 <= r_a <= 1.0:
        raise ValueError(f"adaptive ratio must lie in [0, 1], got {r_a}")
    labels = np.asarray(labels)
    flat = labels.reshape(-1)
    n_cells = flat.size
    m_t = int(round(n_cells * r_t))
    m_a = int(round(m_t * r_a))
    m_r = m_t - m_a

    origin = np.zeros(n_cells, dtype=np.uint8)
    if m_a > 0:
        remaining = m_a
        for cat in rng.permutation(np.unique(flat)):
            members = np.flatnonzero(flat == cat)
            if members.size <= remaining:
                origin[members] = ADAPTIVE
                remaining -= members.size
            else:
                origin[rng.choice(members, size=remaining, replace=False)] = ADAPTIVE
                remaining = 0
            if remaining == 0:
                break
    if m_r > 0:
        visible = np.flatnonzero(origin == VISIBLE)
        origin[rng.choice(visible, size=m_r, replace=False)] = RANDOM

    origin = origin.reshape(labels.shape)
    cell_mask = (origin == VISIBLE).astype(np.int8)
    return MaskPlan(cell_mask, origin, epoch, r_t, r_a)


def random_mask(shape: Tuple[int, int], r_t: float, rng: np.random.Generator,
                epoch: int = 0) -> MaskPlan:
    return build_mask(np.zeros(shape, dtype=int), r_t, 0.0, rng, epoch)


def apply_mask(x_norm: np.ndarray, cell_mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Zero masked cells across all features; returns (masked input, feature mask)."""
    m = np.broadcast_to(np.asarray(cell_mask, dtype=np.float64)[..., None], x_norm.shape)
    return x_norm * m, np.array(m)


class ClusterClassifier:
    """Two customized affine layers (region-specific, then time-dynamic) and a
    linear softmax head predicting each cell's cluster from the unmasked input."""

    def __init__(self, bank: ParamBank, prefix: str, features: int, d: int, d_prime: int,
                 h_s: int, rng: np.random.Generator, slope: float = 0.01):
        self.slope = slope
        self.e0 = bank.add(f"{prefix}.e0", (features, d), features, rng)
        self.wr_base = bank.add(f"{prefix}.wr_base", (d_prime, d, d), d, rng)
        self.br_base = bank.add(f"{prefix}.br_base", (d_prime, d), d, rng)
        self.wt_base = bank.add(f"{prefix}.wt_base", (d_prime, d, d), d, rng)
        self.bt_base = bank.add(f"{prefix}.bt_base", (d_prime, d), d, rng)
        self.w_head = bank.add(f"{prefix}.w_head", (d, h_s), d, rng)
        self.b_head = bank.add(f"{prefix}.b_head", (h_s,), d, rng)

    def __call__(self, x_norm, d_t: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns ``(Q, q)`` with ``Q`` (B, R, T, d) and ``q`` (B, H_S, R, T)."""
        e_p = einsum("brtf,fd->brtd", as_tensor(x_norm), self.e0)
        w_r = einsum("rk,kde->rde", c, self.wr_base)
        b_r = einsum("rk,kd->rd", c, self.br_base)
        w_t = einsum("btk,kde->btde", d_t, self.wt_base)
        b_t = einsum("btk,kd->btd", d_t, self.bt_base)
        h1 = leaky_relu(einsum("brtd,rde->brte", e_p, w_r)
                        + b_r.reshape(1, b_r.shape[0], 1, b_r.shape[1]), self.slope)
        big_q = leaky_relu(einsum("brtd,btde->brte", h1, w_t)
                           + b_t.reshape(b_t.shape[0], 1, b_t.shape[1], b_t.shape[2]), self.slope)
        logits = einsum("brtd,di->birt", big_q, self.w_head) \
            + self.b_head.reshape(1, self.b_head.shape[0], 1, 1)
        return big_q, softmax(logits, axis=1)


def kl_alignment_loss(target, q: Tensor, eps: float = 1e-12) -> Tensor:
    """``sum_{i,r,t} c (log c - log q)`` per window, averaged over the batch.

    ``target`` is treated as a constant; both inputs are (B, H_S, R, T) and
    normalised over the cluster axis.
    """
    c = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if c.shape != q.shape:
        raise ValueError(f"target shape {c.shape} does not match prediction {q.shape}")
    const = float((c * np.log(np.maximum(c, eps))).sum())
    cross = tsum(Tensor(c) * log(q, floor=eps))
    return (const - cross) * (1.0 / c.shape[0])


def labels_from_q(q) -> np.ndarray:
    arr = q.data if isinstance(q, Tensor) else np.asarray(q)
    return arr.argmax(axis=1)


def batch_masks(labels: np.ndarray, r_t: float, r_a: float, rng: np.random.Generator,
                epoch: int = 0) -> List[MaskPlan]:
    return [build_mask(lab, r_t, r_a, rng, epoch) for lab in labels]
