"""Model assembly: embedding, stacked encoder blocks, reconstruction head and losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import Config
from .features import init_time_mlp, time_embedding
from .masking import ClusterClassifier, kl_alignment_loss
from .params import ParamBank
from .spatial import ClusterState, SpatialEncoder, cluster_distribution
from .temporal import TemporalEncoder, initial_embed
from .tensor import ContractError, Tensor, einsum, tabs, tsum


@dataclass
class Batch:
    """Normalised windows with their time features."""

    x: np.ndarray    # (B, R, T, F)
    tod: np.ndarray  # (B, T)
    dow: np.ndarray  # (B, T)

    @property
    def size(self) -> int:
        return self.x.shape[0]


@dataclass
class ForwardResult:
    zeta: Tensor
    y_hat: Tensor
    states: List[ClusterState] = field(default_factory=list)

    @property
    def c_bar(self) -> Tensor:
        return self.states[-1].c_bar


class PretrainModel:
    """Masked spatio-temporal autoencoder.

    Each block is ``temporal_per_block`` temporal hypergraph layers followed by
    one spatial capsule encoder; blocks are chained and a linear head maps the
    final hidden state back to the feature space.
    """

    def __init__(self, config: Config, regions: int, features: int, seed: Optional[int] = None):
        self.config = config
        self.regions = regions
        self.features = features
        rng = np.random.default_rng(config.seed if seed is None else seed)
        cfg = config
        bank = self.bank = ParamBank()
        init_time_mlp(bank, "time", cfg.d_prime, rng)
        init_time_mlp(bank, "time_s", cfg.d_prime, rng)
        self.c = bank.add("region.c", (regions, cfg.d_prime), cfg.d_prime, rng)
        self.e0 = bank.add("embed.e0", (features, cfg.d), features, rng)
        self.blocks = []
        for b in range(cfg.blocks):
            temporal = [TemporalEncoder(bank, f"block{b}.te{k}", cfg.d, cfg.d_prime, cfg.h_t,
                                        cfg.window, rng, cfg.slope)
                        for k in range(cfg.temporal_per_block)]
            spatial = SpatialEncoder(bank, f"block{b}.se", cfg.d, cfg.d_prime, cfg.h_s, cfg.h_m,
                                     regions, cfg.window, rng, cfg.routing_iters,
                                     cfg.routing_norm, cfg.slope)
            self.blocks.append((temporal, spatial))
        self.classifier = ClusterClassifier(bank, "classifier", features, cfg.d, cfg.d_prime,
                                            cfg.h_s, rng, cfg.slope)
        self.w_out = bank.add("head.w", (cfg.d, features), cfg.d, rng)
        self.b_out = bank.add("head.b", (features,), cfg.d, rng)

    # -- pieces ------------------------------------------------------------

    def time_embeddings(self, batch: Batch):
        slope = self.config.slope
        return (time_embedding(self.bank, "time", batch.tod, batch.dow, slope),
                time_embedding(self.bank, "time_s", batch.tod, batch.dow, slope))

    def encode(self, e: Tensor, d_t: Tensor, d_prime_t: Tensor) -> (Tensor, List[ClusterState]):
        states = []
        h = e
        for temporal, spatial in self.blocks:
            for layer in temporal:
                h = layer(h, d_t, self.c)
            state = spatial(h, d_t, d_prime_t, self.c)
            states.append(state)
            h = state.psi
        return h, states

    def forward(self, batch: Batch, cell_mask: np.ndarray, time_emb=None) -> ForwardResult:
        d_t, d_prime_t = time_emb if time_emb is not None else self.time_embeddings(batch)
        e = initial_embed(batch.x, cell_mask, self.e0)
        zeta, states = self.encode(e, d_t, d_prime_t)
        y_hat = einsum("brtd,df->brtf", zeta, self.w_out) + self.b_out
        return ForwardResult(zeta, y_hat, states)

    def classify(self, batch: Batch, time_emb=None) -> Tensor:
        d_t, _ = time_emb if time_emb is not None else self.time_embeddings(batch)
        _, q = self.classifier(batch.x, d_t, self.c)
        return q

    def embed(self, batch: Batch) -> np.ndarray:
        """Unmasked final representation (B, R, T, d) as a plain array."""
        mask = np.ones(batch.x.shape[:3])
        return self.forward(batch, mask).zeta.data

    def kl_target(self, result: ForwardResult) -> np.ndarray:
        return cluster_distribution(result.c_bar, self.config.routing_norm)


def reconstruction_loss(x_norm, y_hat: Tensor, cell_mask: np.ndarray, r_t: float) -> Tensor:
    """Absolute error on masked entries, divided by ``R*T*F*r_t`` per window and
    averaged over the batch."""
    if r_t <= 0:
        raise ContractError("reconstruction loss needs a positive mask ratio")
    x = np.asarray(x_norm)
    if x.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y_hat.shape}")
    bsz, r, t, f = x.shape
    hidden = 1.0 - np.broadcast_to(np.asarray(cell_mask, dtype=np.float64)[..., None], x.shape)
    err = tsum(tabs((Tensor(x) - y_hat) * Tensor(hidden)))
    return err * (1.0 / (r * t * f * r_t * bsz))


def total_loss(l_r: Tensor, l_kl: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return l_r + l_kl * lam


@dataclass
class LossParts:
    total: Tensor
    recon: Tensor
    kl: Tensor
    result: ForwardResult
    q: Tensor
    target: np.ndarray


def pretrain_loss(model: PretrainModel, batch: Batch, cell_mask: np.ndarray,
                  kl_target: Optional[np.ndarray] = None, time_emb=None,
                  q: Optional[Tensor] = None) -> LossParts:
    """Full pre-training objective for one batch under a fixed mask.

    ``kl_target`` overrides the (detached) merged-weight target; pass it to
    hold the target constant, e.g. for finite-difference checks.  ``time_emb``
    and ``q`` may be supplied when already computed on the same tape.
    """
    cfg = model.config
    if time_emb is None:
        time_emb = model.time_embeddings(batch)
    if q is None:
        q = model.classify(batch, time_emb)
    result = model.forward(batch, cell_mask, time_emb)
    target = model.kl_target(result) if kl_target is None else kl_target
    l_r = reconstruction_loss(batch.x, result.y_hat, cell_mask, cfg.mask_ratio)
    l_kl = kl_alignment_loss(target, q, cfg.kl_eps)
    return LossParts(total_loss(l_r, l_kl, cfg.lam), l_r, l_kl, result, q, target)
