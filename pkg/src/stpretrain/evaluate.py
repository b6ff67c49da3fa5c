"""Cluster reports and the adaptive-versus-random mask comparison."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import Config
from .features import TimeFeatures
from .metrics import cluster_purity, region_assignments
from .spatial import cluster_distribution
from .train import PretrainResult, make_batch, masked_mae, pretrain, split_bounds, window_starts


@dataclass
class ClusterReport:
    purity_cbar: float
    purity_q: float
    region_cbar: np.ndarray   # (R,) per-region assignment from merged weights
    region_q: np.ndarray      # (R,) per-region assignment from the classifier
    slot_cbar: np.ndarray     # (R, slots) argmax over clusters per covered slot
    slot_q: np.ndarray
    slots: np.ndarray         # absolute slot index of each column

    def table(self) -> str:
        lines = ["region\tt\targmax_cbar\targmax_q"]
        for r in range(self.slot_cbar.shape[0]):
            for j, t in enumerate(self.slots):
                lines.append(f"{r}\t{t}\t{self.slot_cbar[r, j]}\t{self.slot_q[r, j]}")
        return "\n".join(lines) + "\n"


def cluster_report(result: PretrainResult, values: np.ndarray, tf: TimeFeatures,
                   labels: Optional[np.ndarray] = None, batch_size: int = 64) -> ClusterReport:
    """Cluster assignments over non-overlapping unmasked windows covering the series.

    A region's cluster is the argmax of its cluster distribution averaged over
    every covered slot; purity uses the best one-to-one label matching.
    """
    model = result.model
    cfg = model.config
    x_norm = result.stats.apply(values)
    starts = window_starts(0, values.shape[1], cfg.window, cfg.window)
    if len(starts) == 0:
        raise ValueError("series shorter than one window")
    dists, qs = [], []
    for lo in range(0, len(starts), batch_size):
        batch = make_batch(x_norm, tf, starts[lo:lo + batch_size], cfg.window)
        out = model.forward(batch, np.ones(batch.x.shape[:3]))
        dists.append(cluster_distribution(out.c_bar, cfg.routing_norm))
        qs.append(model.classify(batch).data)
    dist, q = np.concatenate(dists), np.concatenate(qs)     # (N, H_S, R, T)
    region_c, region_q = region_assignments(dist), region_assignments(q)

    def per_slot(arr):
        a = arr.argmax(axis=1)                               # (N, R, T)
        return a.transpose(1, 0, 2).reshape(a.shape[1], -1)

    slots = (starts[:, None] + np.arange(cfg.window)[None, :]).reshape(-1)
    nan = float("nan")
    return ClusterReport(
        cluster_purity(region_c, labels) if labels is not None else nan,
        cluster_purity(region_q, labels) if labels is not None else nan,
        region_c, region_q, per_slot(dist), per_slot(q), slots)


@dataclass
class AblationRun:
    seed: int
    adaptive: float
    random: float


@dataclass
class AblationReport:
    runs: List[AblationRun]
    config: Dict = field(default_factory=dict)

    @property
    def mean_adaptive(self) -> float:
        return float(np.mean([r.adaptive for r in self.runs]))

    @property
    def mean_random(self) -> float:
        return float(np.mean([r.random for r in self.runs]))

    @property
    def adaptive_wins(self) -> int:
        return sum(r.adaptive < r.random for r in self.runs)

    def to_text(self) -> str:
        lines = ["# held-out masked-reconstruction MAE (normalised units)",
                 "seed\tadaptive\trandom\tratio"]
        for r in self.runs:
            lines.append(f"{r.seed}\t{r.adaptive:.6f}\t{r.random:.6f}\t{r.adaptive / r.random:.6f}")
        lines.append(f"mean\t{self.mean_adaptive:.6f}\t{self.mean_random:.6f}\t"
                     f"{self.mean_adaptive / self.mean_random:.6f}")
        lines.append(f"# adaptive_wins\t{self.adaptive_wins}/{len(self.runs)}")
        lines.append("# config")
        lines.extend(f"# {k}\t{v}" for k, v in self.config.items())
        return "\n".join(lines) + "\n"


def heldout_masked_mae(result: PretrainResult, values: np.ndarray, tf: TimeFeatures,
                       mask_seed: int) -> float:
    """Masked-reconstruction MAE on test-split windows under seeded random masks."""
    cfg = result.model.config
    _, _, (lo, hi) = split_bounds(values.shape[1], cfg.split_train, cfg.split_val)
    starts = window_starts(lo, hi, cfg.window, cfg.window)
    return masked_mae(result.model, result.stats.apply(values), tf, starts, mask_seed)


def mask_ablation(values: np.ndarray, tf: TimeFeatures, config: Config,
                  seeds: Sequence[int] = (0,), progress=None) -> AblationReport:
    """Pre-train with adaptive and with random masking at the same ``mask_ratio``
    and compare held-out masked MAE; both arms share seeds and evaluation masks."""
    runs = []
    for seed in seeds:
        scores = {}
        for mode in ("adaptive", "random"):
            cfg = config.replace(mask_mode=mode, seed=int(seed))
            res = pretrain(values, tf, cfg)
            scores[mode] = heldout_masked_mae(res, values, tf, mask_seed=int(seed) + 1000)
            if progress is not None:
                progress(seed, mode, scores[mode])
        runs.append(AblationRun(int(seed), scores["adaptive"], scores["random"]))
    echo = config.to_dict()
    echo["seeds"] = list(map(int, seeds))
    return AblationReport(runs, echo)
