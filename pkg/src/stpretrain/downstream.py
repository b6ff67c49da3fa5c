"""Downstream forecasting with and without pre-trained representations.

A per-region affine readout maps an L-slot input window to the next P slots.
The raw arm reads the plain embedding ``E' = Xn @ E0``; the fused arm reads a
sigmoid-gated mix of ``E'`` and the frozen pre-trained representation ``zeta``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .config import Config
from .metrics import ForecastMetrics, forecast_metrics
from .model import Batch, PretrainModel
from .params import ParamBank
from .temporal import initial_embed
from .tensor import Tape, Tensor, backward, detach, einsum, sigmoid, tabs, tsum
from .train import NormStats, Optimizer, PretrainResult, make_batch, split_bounds, window_starts

ARMS = ("raw", "fused")


def gated_fusion(zeta, e_raw, w1: Tensor, w2: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """``z = sigmoid(zeta W1 + E' W2 + b)``, ``H = z * zeta + (1 - z) * E'``.

    ``zeta`` is detached.  Returns ``(H, z)``.
    """
    zeta = detach(zeta)
    e_raw = e_raw if isinstance(e_raw, Tensor) else Tensor(e_raw)
    if zeta.shape != e_raw.shape:
        raise ValueError(f"fusion inputs differ in shape: {zeta.shape} vs {e_raw.shape}")
    z = sigmoid(einsum("brtd,de->brte", zeta, w1) + einsum("brtd,de->brte", e_raw, w2) + b)
    return z * zeta + (1.0 - z) * e_raw, z


def raw_embedding(model: PretrainModel, x_norm) -> Tensor:
    """Unmasked ``Xn @ E0`` with the checkpoint's ``E0`` held fixed."""
    return initial_embed(x_norm, np.ones(np.shape(x_norm)[:3]), detach(model.e0))


def pretrained_features(model: PretrainModel, batch: Batch) -> Tuple[Tensor, Tensor]:
    """``(zeta, E')`` for a batch, both cut from the pre-trained graph."""
    zeta = model.forward(batch, np.ones(batch.x.shape[:3])).zeta
    return detach(zeta), raw_embedding(model, batch.x)


class Readout:
    """Per-region affine map from a flattened (L, d) window to (P, F) outputs.

    Starts at zero, so an untrained readout predicts zeros.
    """

    def __init__(self, bank: ParamBank, regions: int, length: int, d: int, horizon: int,
                 features: int, rng: np.random.Generator):
        self.horizon, self.features = horizon, features
        self.w = bank.add("readout.w", (regions, length * d, horizon * features), None, rng)
        self.b = bank.add("readout.b", (regions, horizon * features), None, rng)

    def __call__(self, h: Tensor) -> Tensor:
        bsz, regions, length, d = h.shape
        flat = h.reshape(bsz, regions, length * d)
        out = einsum("brk,rkp->brp", flat, self.w) + self.b
        return out.reshape(bsz, regions, self.horizon, self.features)


class DownstreamModel:
    """Readout plus, for the fused arm, the gate parameters."""

    def __init__(self, arm: str, regions: int, length: int, d: int, horizon: int,
                 features: int, seed: int):
        if arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {arm!r}")
        self.arm = arm
        rng = np.random.default_rng([seed, 11])
        self.bank = ParamBank()
        self.readout = Readout(self.bank, regions, length, d, horizon, features, rng)
        if arm == "fused":
            self.w1 = self.bank.add("fusion.w1", (d, d), d, rng)
            self.w2 = self.bank.add("fusion.w2", (d, d), d, rng)
            self.b = self.bank.add("fusion.b", (d,), d, rng)

    def predict(self, zeta, e_raw) -> Tensor:
        """Normalised forecast (B, R, P, F)."""
        if self.arm == "fused":
            h, _ = gated_fusion(zeta, e_raw, self.w1, self.w2, self.b)
        else:
            h = e_raw if isinstance(e_raw, Tensor) else Tensor(e_raw)
        return self.readout(h)


def mae_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return tsum(tabs(pred - Tensor(target))) * (1.0 / target.size)


def _targets(x_norm: np.ndarray, starts: np.ndarray, length: int, horizon: int) -> np.ndarray:
    idx = np.asarray(starts)[:, None] + length + np.arange(horizon)[None, :]
    return np.ascontiguousarray(x_norm[:, idx, :].transpose(1, 0, 2, 3))  # (B, R, P, F)


@dataclass
class FeatureCache:
    starts: np.ndarray
    zeta: np.ndarray
    e_raw: np.ndarray
    target: np.ndarray


def build_cache(model: PretrainModel, x_norm: np.ndarray, tf, starts: np.ndarray,
                horizon: int, chunk: int = 64) -> FeatureCache:
    length = model.config.window
    zs, es = [], []
    for lo in range(0, len(starts), chunk):
        batch = make_batch(x_norm, tf, starts[lo:lo + chunk], length)
        z, e = pretrained_features(model, batch)
        zs.append(z.data)
        es.append(e.data)
    d = model.config.d
    empty = np.zeros((0, model.regions, length, d))
    return FeatureCache(np.asarray(starts),
                        np.concatenate(zs) if zs else empty,
                        np.concatenate(es) if es else empty,
                        _targets(x_norm, starts, length, horizon))


def train_downstream(arm: str, train: FeatureCache, config: Config, seed: int,
                     regions: int, features: int) -> DownstreamModel:
    """Fit one arm with MAE on normalised targets (Adam, ``ds_lr``, ``ds_epochs``)."""
    cfg = config
    model = DownstreamModel(arm, regions, cfg.window, cfg.d, cfg.horizon, features, seed)
    model.bank.set_requires_grad(True)
    params = dict(model.bank.items())
    opt = Optimizer("adam", cfg.ds_lr, cfg.clip_norm)
    order_rng = np.random.default_rng([seed, 12])
    n = len(train.starts)
    for _ in range(cfg.ds_epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with Tape() as tape:
                loss = mae_loss(model.predict(train.zeta[idx], train.e_raw[idx]), train.target[idx])
            opt.step(model.bank, backward(loss, tape, params))
    model.bank.set_requires_grad(False)
    return model


def forecast(model: DownstreamModel, cache: FeatureCache, chunk: int = 128) -> np.ndarray:
    outs = [model.predict(cache.zeta[lo:lo + chunk], cache.e_raw[lo:lo + chunk]).data
            for lo in range(0, len(cache.starts), chunk)]
    return np.concatenate(outs)


def denormalise(y_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.inverse(y_norm)


def last_value_forecast(x_norm: np.ndarray, starts: np.ndarray, length: int, horizon: int):
    last = x_norm[:, np.asarray(starts) + length - 1, :].transpose(1, 0, 2)  # (B, R, F)
    return np.repeat(last[:, :, None, :], horizon, axis=2)


@dataclass
class ArmResult:
    seed: int
    raw: ForecastMetrics
    fused: ForecastMetrics

    @property
    def delta_mae(self) -> float:
        return self.fused.mae - self.raw.mae


@dataclass
class EnhanceReport:
    runs: list
    baseline: ForecastMetrics
    config: Dict = field(default_factory=dict)
    test_windows: int = 0

    def mean(self, arm: str, metric: str = "mae") -> float:
        return float(np.mean([getattr(getattr(r, arm), metric) for r in self.runs]))

    def to_text(self) -> str:
        lines = ["# downstream enhancement report",
                 f"# test_windows\t{self.test_windows}",
                 "seed\tarm\tmae\trmse\tmape\tmape_excluded"]
        for r in self.runs:
            for arm in ARMS:
                m = getattr(r, arm)
                lines.append(f"{r.seed}\t{arm}\t{m.mae:.6f}\t{m.rmse:.6f}\t{m.mape:.6f}\t{m.mape_excluded}")
        b = self.baseline
        lines.append(f"-\tlast_value\t{b.mae:.6f}\t{b.rmse:.6f}\t{b.mape:.6f}\t{b.mape_excluded}")
        lines.append("metric\traw_mean\tfused_mean\tdelta")
        for metric in ("mae", "rmse", "mape"):
            raw, fused = self.mean("raw", metric), self.mean("fused", metric)
            lines.append(f"{metric}\t{raw:.6f}\t{fused:.6f}\t{fused - raw:+.6f}")
        lines.append("# config")
        lines.extend(f"# {k}\t{v}" for k, v in self.config.items())
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict:
        return {"runs": [{"seed": r.seed, "raw": asdict(r.raw), "fused": asdict(r.fused)}
                         for r in self.runs],
                "baseline": asdict(self.baseline), "config": self.config,
                "test_windows": self.test_windows}


def enhance_and_compare(values: np.ndarray, tf, pretrained: Optional[PretrainResult],
                        config: Optional[Config] = None, seeds=(0,)) -> EnhanceReport:
    """Train the raw and fused readouts with identical seeds and epochs and
    report test-split metrics in original units."""
    if pretrained is None:
        raise ValueError("enhance_and_compare needs a pre-trained checkpoint")
    model, stats = pretrained.model, pretrained.stats
    cfg = (config or model.config)
    # architecture comes from the checkpoint; only downstream keys may differ
    cfg = model.config.replace(horizon=cfg.horizon, ds_epochs=cfg.ds_epochs, ds_lr=cfg.ds_lr,
                               ds_stride=cfg.ds_stride, mape_eps=cfg.mape_eps,
                               batch_size=cfg.batch_size)
    regions, steps, features = values.shape
    (tr_lo, tr_hi), _, (te_lo, te_hi) = split_bounds(steps, cfg.split_train, cfg.split_val)
    x_norm = stats.apply(values)
    length, horizon = cfg.window, cfg.horizon
    train_starts = window_starts(tr_lo, tr_hi, length, cfg.ds_stride, tail=horizon)
    test_starts = window_starts(te_lo, te_hi, length, cfg.ds_stride, tail=horizon)
    if len(train_starts) == 0 or len(test_starts) == 0:
        raise ValueError("splits too short for one input window plus horizon")
    train = build_cache(model, x_norm, tf, train_starts, horizon)
    test = build_cache(model, x_norm, tf, test_starts, horizon)
    truth = denormalise(test.target, stats)
    runs = []
    for seed in seeds:
        scores = {}
        for arm in ARMS:
            fitted = train_downstream(arm, train, cfg, seed, regions, features)
            scores[arm] = forecast_metrics(denormalise(forecast(fitted, test), stats), truth,
                                           cfg.mape_eps)
        runs.append(ArmResult(int(seed), scores["raw"], scores["fused"]))
    naive = denormalise(last_value_forecast(x_norm, test_starts, length, horizon), stats)
    echo = cfg.to_dict()
    echo["seeds"] = list(map(int, seeds))
    return EnhanceReport(runs, forecast_metrics(naive, truth, cfg.mape_eps), echo, len(test_starts))
