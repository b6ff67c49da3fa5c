"""Normalisation, windowing, optimisers, the pre-training loop and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import Config
from .features import TimeFeatures
from .masking import adaptive_ratio, batch_masks, labels_from_q, random_mask
from .model import Batch, PretrainModel, pretrain_loss, reconstruction_loss
from .params import ParamBank
from .tensor import Tape, backward

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PathLike = Union[str, Path]


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    mean: np.ndarray  # (F,)
    std: np.ndarray   # (F,)

    @classmethod
    def fit(cls, x_train: np.ndarray) -> "NormStats":
        """Per-feature mean and population std over every axis but the last."""
        if x_train.size == 0:
            raise ValueError("training split is empty")
        axes = tuple(range(x_train.ndim - 1))
        mean = x_train.mean(axis=axes)
        std = x_train.std(axis=axes)
        bad = np.flatnonzero(~(std > 0))
        if bad.size:
            raise ValueError(f"zero-variance feature(s) {bad.tolist()} in training split")
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def zscore_fit_apply(x_train: np.ndarray, *others: np.ndarray):
    """Fit on ``x_train`` only; returns ``(normalised..., stats)``."""
    stats = NormStats.fit(x_train)
    return (stats.apply(x_train), *[stats.apply(o) for o in others], stats)


# ---------------------------------------------------------------------------
# splits and windows


def split_bounds(steps: int, train: float = 0.6, val: float = 0.2) -> Tuple[Tuple[int, int], ...]:
    """Contiguous (start, stop) slot ranges for train / val / test along time."""
    n_train = int(round(steps * train))
    n_val = int(round(steps * val))
    return (0, n_train), (n_train, n_train + n_val), (n_train + n_val, steps)


def window_starts(lo: int, hi: int, length: int, stride: int, tail: int = 0) -> np.ndarray:
    """Starts of windows ``[s, s + length + tail)`` fully inside ``[lo, hi)``."""
    last = hi - length - tail
    if last < lo:
        return np.zeros(0, dtype=int)
    return np.arange(lo, last + 1, stride)


def make_batch(x_norm: np.ndarray, tf: TimeFeatures, starts: Sequence[int], length: int) -> Batch:
    idx = np.asarray(starts)[:, None] + np.arange(length)[None, :]
    x = x_norm[:, idx, :].transpose(1, 0, 2, 3)  # (B, R, L, F)
    return Batch(np.ascontiguousarray(x), tf.tod[idx], tf.dow[idx])


# ---------------------------------------------------------------------------
# optimisers


class Optimizer:
    """Plain gradient descent (``theta -= lr * g``) or Adam, with optional
    global-norm clipping applied before the update."""

    def __init__(self, kind: str = "sgd", lr: float = 0.01, clip_norm: Optional[float] = None,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.clip_norm = kind, lr, clip_norm
        self.betas, self.eps = betas, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, bank: ParamBank, grads: Dict[str, np.ndarray]) -> float:
        """Apply one update in place; returns the pre-clip global gradient norm."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name}")
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            p = bank[name]
            if scale != 1.0:
                g = g * scale
            if self.kind == "sgd":
                p.data = p.data - self.lr * g
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = b1 * m + (1 - b1) * g if m is not None else (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g if v is not None else (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    kl: float
    total: float
    val_recon: float
    adaptive_ratio: float


@dataclass
class PretrainResult:
    model: PretrainModel
    stats: NormStats
    trace: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    rng_state: Dict = field(default_factory=dict)


def first_nonfinite(tape: Tape) -> str:
    for i, node in enumerate(tape.nodes):
        if not np.all(np.isfinite(node.out.data)):
            op = node.backward.__qualname__.split(".")[0]
            return f"node {i} ({op}) with shape {node.out.shape}"
    return "no intermediate tensor (loss assembly)"


def masked_mae(model: PretrainModel, x_norm: np.ndarray, tf: TimeFeatures, starts: np.ndarray,
               seed: int, batch_size: int = 64) -> float:
    """Masked-reconstruction MAE over windows under seeded random masks.

    The same ``seed`` always yields the same masks, so two models evaluated
    with one seed see identical hidden cells.
    """
    if len(starts) == 0:
        return float("nan")
    cfg = model.config
    rng = np.random.default_rng([seed, 7])
    total, count = 0.0, 0
    for lo in range(0, len(starts), batch_size):
        chunk = starts[lo:lo + batch_size]
        batch = make_batch(x_norm, tf, chunk, cfg.window)
        masks = np.stack([random_mask(batch.x.shape[1:3], cfg.mask_ratio, rng).cell_mask
                          for _ in range(batch.size)])
        y = model.forward(batch, masks).y_hat
        total += reconstruction_loss(batch.x, y, masks, cfg.mask_ratio).item() * batch.size
        count += batch.size
    return total / count


def pretrain(values: np.ndarray, tf: TimeFeatures, config: Config,
             model: Optional[PretrainModel] = None, progress=None,
             mask_log=None) -> PretrainResult:
    """Masked pre-training on raw ``values`` (R, T_total, F).

    Statistics are fitted on the training split; the parameters with the lowest
    validation masked-reconstruction MAE are kept.  ``progress`` receives each
    :class:`EpochRecord`; ``mask_log(starts, plans)`` receives every batch's
    window starts and mask plans.
    """
    cfg = config.validate()
    (tr_lo, tr_hi), (va_lo, va_hi), _ = split_bounds(values.shape[1], cfg.split_train, cfg.split_val)
    stats = NormStats.fit(values[:, tr_lo:tr_hi])
    x_norm = stats.apply(values)
    regions, _, features = values.shape
    if model is None:
        model = PretrainModel(cfg, regions, features)
    train_starts = window_starts(tr_lo, tr_hi, cfg.window, cfg.stride)
    val_starts = window_starts(va_lo, va_hi, cfg.window, cfg.stride)
    if len(train_starts) == 0:
        raise ValueError("training split shorter than one window")

    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    mask_rng = np.random.default_rng([cfg.seed, 3])
    opt = Optimizer(cfg.optimizer, cfg.lr, cfg.clip_norm)
    params = dict(model.bank.items())
    model.bank.set_requires_grad(True)
    result = PretrainResult(model, stats)
    best_state = model.bank.state()
    if cfg.epochs == 0:
        result.best_val = masked_mae(model, x_norm, tf, val_starts, cfg.seed)

    for epoch in range(1, cfg.epochs + 1):
        r_a = adaptive_ratio(epoch, cfg.epochs, cfg.gamma) if cfg.mask_mode == "adaptive" else 0.0
        order = shuffle_rng.permutation(train_starts)
        sums = np.zeros(3)
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            batch = make_batch(x_norm, tf, chunk, cfg.window)
            with Tape() as tape:
                time_emb = model.time_embeddings(batch)
                q = model.classify(batch, time_emb)
                labels = labels_from_q(q)
                plans = batch_masks(labels, cfg.mask_ratio, r_a, mask_rng, epoch)
                masks = np.stack([p.cell_mask for p in plans])
                if mask_log is not None:
                    mask_log(chunk, plans)
                parts = pretrain_loss(model, batch, masks, time_emb=time_emb, q=q)
            if not np.isfinite(parts.total.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}; first: {first_nonfinite(tape)}")
            grads = backward(parts.total, tape, params)
            opt.step(model.bank, grads)
            sums += np.array([parts.recon.item(), parts.kl.item(), parts.total.item()]) * batch.size
        sums /= len(order)
        val = masked_mae(model, x_norm, tf, val_starts, cfg.seed)
        record = EpochRecord(epoch, *sums.tolist(), val, r_a)
        result.trace.append(record)
        if progress is not None:
            progress(record)
        log.info("epoch %d recon=%.5f kl=%.5f total=%.5f val=%.5f", epoch, *sums, val)
        if not val_starts.size or val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best_state = model.bank.state()
    model.bank.load_state(best_state)
    result.rng_state = {"shuffle": shuffle_rng.bit_generator.state,
                        "mask": mask_rng.bit_generator.state}
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: PathLike, result: PretrainResult, extra: Optional[Dict] = None) -> None:
    """Write a zip container: ``meta.json`` plus one ``.npy`` per parameter.

    ``meta.json`` holds the format version, config echo, region/feature
    counts, normalisation stats, best epoch, loss trace and rng state.
    """
    model = result.model
    meta = {
        "format": "stpretrain-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "regions": model.regions,
        "features": model.features,
        "norm": {"mean": result.stats.mean.tolist(), "std": result.stats.std.tolist()},
        "epoch": result.best_epoch,
        "best_val": result.best_val if np.isfinite(result.best_val) else None,
        "trace": [vars(r) for r in result.trace],
        "rng_state": result.rng_state,
        "params": {k: list(v.shape) for k, v in model.bank.items()},
    }
    if extra:
        meta["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, default=_json_default))
        for name, tensor in model.bank.items():
            buf = io.BytesIO()
            np.save(buf, tensor.data, allow_pickle=False)
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def load_checkpoint(path: PathLike) -> PretrainResult:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != "stpretrain-checkpoint":
            raise ValueError(f"{path} is not a checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} unsupported")
        state = {name: np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                 for name in meta["params"]}
    config = Config.from_dict(meta["config"])
    model = PretrainModel(config, meta["regions"], meta["features"])
    model.bank.load_state(state)
    stats = NormStats(np.array(meta["norm"]["mean"]), np.array(meta["norm"]["std"]))
    trace = [EpochRecord(**r) for r in meta["trace"]]
    best_val = meta["best_val"] if meta["best_val"] is not None else float("inf")
    return PretrainResult(model, stats, trace, meta["epoch"], best_val, meta["rng_state"])
