"""Named collection of trainable tensors."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Optional, Sequence

import numpy as np

from .tensor import Tensor


class ParamBank:
    """Ordered mapping ``name -> Tensor`` holding every trainable parameter.

    Initialisation is uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from the
    generator passed to :meth:`add`.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, shape: Sequence[int], fan_in: Optional[int],
            rng: np.random.Generator) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        if fan_in is None:
            data = np.zeros(tuple(shape))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=tuple(shape))
        t = Tensor(data, requires_grad=False, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def subset(self, prefix: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def size(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def set_requires_grad(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for k, arr in state.items():
            if arr.shape != self._params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self._params[k].shape}")
            self._params[k].data = np.array(arr, dtype=np.float64)
