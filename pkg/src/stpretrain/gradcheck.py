"""Central finite-difference oracle for tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .tensor import ContractError, Tape, Tensor, backward


class NondeterministicFunction(ContractError):
    """Two evaluations at the same point disagreed."""


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: Dict[str, float] = field(default_factory=dict)
    worst: str = ""
    coordinates: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def numeric_gradient(f: Callable[[], float], param: Tensor, eps: float) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``param``.

    ``param.data`` is perturbed in place and restored afterwards.
    """
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    return out.reshape(param.shape)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-6, names: Optional[list] = None) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must build its loss from the tensors in ``params`` (read at call
    time) and be deterministic.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``; the maximum is returned.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    def value() -> float:
        return float(loss_fn().data)

    first, second = value(), value()
    if first != second:
        raise NondeterministicFunction(
            f"loss differs across evaluations at the same point: {first!r} vs {second!r}")

    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = True
    try:
        with Tape() as tape:
            loss = loss_fn()
        analytic = backward(loss, tape, params)
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]

    result = GradCheckResult(max_rel_error=0.0)
    for name in names or list(params):
        numeric = numeric_gradient(value, params[name], eps)
        err = np.abs(analytic[name] - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = float(err.max()) if err.size else 0.0
        result.per_param[name] = worst
        result.coordinates += numeric.size
        if worst >= result.max_rel_error:
            result.max_rel_error = worst
            result.worst = name
    return result


def check_pretrain_gradients(config, regions: int = 6, features: int = 1, batch_size: int = 2,
                             seed: int = 0, eps: float = 1e-6) -> GradCheckResult:
    """Finite-difference check of the full pre-training loss over every parameter.

    Inputs and time features are random; the cell mask and the KL target are
    computed once and held fixed, since both are constants to the gradient.
    """
    from .masking import random_mask
    from .model import Batch, PretrainModel, pretrain_loss

    rng = np.random.default_rng([seed, 5])
    model = PretrainModel(config, regions, features, seed=seed)
    t = config.window
    batch = Batch(rng.normal(size=(batch_size, regions, t, features)),
                  rng.uniform(0, 1, (batch_size, t)), rng.uniform(0, 1, (batch_size, t)))
    mask = np.stack([random_mask((regions, t), config.mask_ratio, rng).cell_mask
                     for _ in range(batch_size)])
    target = pretrain_loss(model, batch, mask).target
    return finite_diff_check(lambda: pretrain_loss(model, batch, mask, target).total,
                             dict(model.bank.items()), eps=eps)
