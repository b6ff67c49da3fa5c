"""Dataset file format, synthetic generator with planted clusters, and label files.

Dataset file layout (little-endian)::

    offset  size  field
    0       4     magic b"STDS"
    4       2     format version (uint16, currently 1)
    6       2     reserved, zero
    8       4     R regions (uint32)
    12      4     T_total time slots (uint32)
    16      4     F features (uint32)
    20      4     slots_per_day (uint32, must divide 1440 minutes)
    24      4     start_day_of_week (uint32, 0..6)
    28      8*R*T*F  float64 payload, row-major (region, time, feature)
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import yaml

from .features import TimeFeatures, time_features

MAGIC = b"STDS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHIIIII")
PathLike = Union[str, Path]


class DatasetFormatError(ValueError):
    """Malformed or incompatible dataset file."""


@dataclass
class Dataset:
    values: np.ndarray  # (R, T_total, F)
    slots_per_day: int
    start_day_of_week: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DatasetFormatError(f"dataset values must be (R, T, F), got {self.values.shape}")
        if self.slots_per_day < 1 or 1440 % self.slots_per_day:
            raise DatasetFormatError(f"slots_per_day={self.slots_per_day} does not divide a day")
        if not 0 <= self.start_day_of_week < 7:
            raise DatasetFormatError("start_day_of_week must lie in 0..6")

    @property
    def regions(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1]

    @property
    def features(self) -> int:
        return self.values.shape[2]

    def time_features(self) -> TimeFeatures:
        return time_features(self.steps, self.slots_per_day, self.start_day_of_week)


def write_dataset(path: PathLike, ds: Dataset) -> None:
    r, t, f = ds.values.shape
    header = HEADER.pack(MAGIC, FORMAT_VERSION, 0, r, t, f, ds.slots_per_day, ds.start_day_of_week)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.values, dtype="<f8").tobytes())


def read_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetFormatError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, _, r, t, f, spd, dow = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = r * t * f * 8
    payload = raw[HEADER.size:]
    if len(payload) != expected:
        raise DatasetFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected} (truncated?)")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(r, t, f)
    return Dataset(values, spd, dow)


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels))


def read_labels(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    return np.array([int(line) for line in path.read_text().split()], dtype=int)


@dataclass
class SyntheticSpec:
    """Planted-cluster generator settings.

    Every region follows its cluster's signal: a periodic waveform (cluster i
    defaults to period ``slots_per_day / (i + 1)``) plus a cluster-wide AR(1)
    latent, plus ``coupling`` times the latent of the next cluster (cyclically)
    delayed by ``lag`` slots, plus iid noise whose scale is ``noise`` times the
    cluster amplitude.  ``seasonal`` scales the waveform alone.
    """

    regions: int = 30
    steps: int = 2880
    features: int = 2
    clusters: int = 3
    slots_per_day: int = 48
    start_day_of_week: int = 0
    noise: float = 0.1
    amplitudes: Optional[List[float]] = None
    periods: Optional[List[float]] = None
    phases: Optional[List[float]] = None
    seasonal: float = 1.0
    latent_scale: float = 0.5
    ar_coef: float = 0.8
    coupling: float = 0.5
    lag: int = 3
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.clusters < 1:
            raise ValueError("clusters must be >= 1")
        if self.clusters > self.regions:
            raise ValueError(f"cluster_count {self.clusters} exceeds region count {self.regions}")
        for name in ("amplitudes", "periods", "phases"):
            vals = getattr(self, name)
            if vals is not None and len(vals) != self.clusters:
                raise ValueError(f"{name} needs one entry per cluster")
        if self.noise < 0 or self.lag < 0:
            raise ValueError("noise and lag must be non-negative")
        return self

    def resolved(self):
        k = self.clusters
        amps = self.amplitudes or [1.0 + 0.5 * i for i in range(k)]
        periods = self.periods or [self.slots_per_day / (i + 1.0) for i in range(k)]
        phases = self.phases or [2.0 * np.pi * i / k for i in range(k)]
        return np.array(amps, float), np.array(periods, float), np.array(phases, float)

    @classmethod
    def load(cls, path: PathLike) -> "SyntheticSpec":
        data = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**data).validate()

    def dump(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=False)


def cluster_signals(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free per-cluster series (K, T, F)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    amps, periods, phases = spec.resolved()
    k, steps, feats = spec.clusters, spec.steps, spec.features
    t = np.arange(steps)
    latent = np.zeros((k, steps))
    innov = rng.normal(scale=spec.latent_scale * np.sqrt(1 - spec.ar_coef ** 2), size=(k, steps))
    latent[:, 0] = rng.normal(scale=spec.latent_scale, size=k)
    for s in range(1, steps):
        latent[:, s] = spec.ar_coef * latent[:, s - 1] + innov[:, s]
    out = np.zeros((k, steps, feats))
    for c in range(k):
        src = (c + 1) % k
        coupled = np.zeros(steps)
        if k > 1 and spec.coupling:
            coupled[spec.lag:] = spec.coupling * latent[src, :steps - spec.lag]
        for f in range(feats):
            angle = 2 * np.pi * t / periods[c] + phases[c] + 0.7 * f
            seasonal = spec.seasonal * amps[c] * (1.0 - 0.3 * f) * (np.sin(angle) + 0.4 * np.sin(2 * angle))
            out[c, :, f] = seasonal + amps[c] * (latent[c] + coupled)
    return out


def generate_synthetic(spec: SyntheticSpec):
    """Returns ``(Dataset, labels)``; labels are balanced and shuffled by seed."""
    spec.validate()
    signals = cluster_signals(spec)
    rng = np.random.default_rng([spec.seed, 1])
    labels = rng.permutation(np.arange(spec.regions) % spec.clusters)
    amps, _, _ = spec.resolved()
    values = signals[labels].copy()
    if spec.noise > 0:
        values += rng.normal(size=values.shape) * (spec.noise * amps[labels])[:, None, None]
    return Dataset(values, spec.slots_per_day, spec.start_day_of_week), labels
