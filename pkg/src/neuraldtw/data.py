"""Dataset containers, preprocessing, slicing/pair sampling and a synthetic EEG-like generator."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import InvalidInput, normalize_dtw  # noqa: F401  (re-exported)

SPLITS = ("train", "val", "test")


@dataclass
class TimeSeries:
    values: np.ndarray
    id: str = ""
    label: int | None = None
    group: str | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).ravel()
        if self.values.size == 0:
            raise InvalidInput(f"time series {self.id!r} is empty")

    def __len__(self):
        return self.values.size

    @property
    def length(self) -> int:
        return self.values.size

    def with_values(self, values) -> "TimeSeries":
        return replace(self, values=values)


@dataclass
class Dataset:
    signals: list[TimeSeries]
    splits: list[str] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.signals)
        if len(self.splits) != len(self.signals):
            raise InvalidInput("one split tag per signal required")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise InvalidInput(f"unknown split tags {sorted(bad)}")

    def __len__(self):
        return len(self.signals)

    def split(self, name: str) -> "Dataset":
        keep = [k for k, s in enumerate(self.splits) if s == name]
        return Dataset([self.signals[k] for k in keep], [name] * len(keep), self.provenance)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.signals])

    def map_values(self, fn) -> "Dataset":
        return Dataset([s.with_values(fn(s.values)) for s in self.signals], list(self.splits), self.provenance)

    def check_split_integrity(self) -> None:
        seen: dict[str, str] = {}
        for s, tag in zip(self.signals, self.splits):
            if s.group is None:
                continue
            if seen.setdefault(s.group, tag) != tag:
                raise InvalidInput(f"group {s.group!r} appears in more than one split")


@dataclass(frozen=True)
class PreprocessStats:
    p1: float
    p99: float
    min: float
    max: float


def compute_stats(dataset: Dataset) -> PreprocessStats:
    """Pooled 1st/99th percentiles and the post-clipping range."""
    if len(dataset) == 0:
        raise InvalidInput("cannot compute statistics of an empty dataset")
    pooled = np.concatenate([s.values for s in dataset.signals]).astype(np.float64)
    p1, p99 = np.percentile(pooled, [1, 99], method="linear")
    # range of the values clip() will actually produce (it clips at f32 bounds)
    clipped = np.clip(pooled, np.float32(p1), np.float32(p99))
    return PreprocessStats(float(p1), float(p99), float(clipped.min()), float(clipped.max()))


def clip(dataset: Dataset, stats: PreprocessStats) -> Dataset:
    lo, hi = np.float32(stats.p1), np.float32(stats.p99)
    return dataset.map_values(lambda v: np.clip(v, lo, hi))


def minmax(dataset: Dataset, stats: PreprocessStats) -> Dataset:
    if not stats.max > stats.min:
        raise InvalidInput("degenerate dataset: max == min")
    lo, span = stats.min, stats.max - stats.min
    # f64 arithmetic, then clamp the f32 cast so rounding cannot leave [0, 1]
    return dataset.map_values(
        lambda v: np.clip(((v.astype(np.float64) - lo) / span).astype(np.float32), 0.0, 1.0)
    )


def preprocess(dataset: Dataset, stats: PreprocessStats | None = None):
    """clip -> minmax. Returns the processed dataset and the stats used."""
    stats = compute_stats(dataset) if stats is None else stats
    return minmax(clip(dataset, stats), stats), stats


def slice_fixed(signals, L: int, rng: np.random.Generator) -> list[TimeSeries]:
    """Uniformly placed contiguous window of length ``L`` from each signal."""
    out = []
    for s in signals:
        n = len(s)
        if n < L:
            raise InvalidInput(f"signal {s.id!r} has length {n} < {L}")
        start = int(rng.integers(0, n - L + 1))
        out.append(s.with_values(s.values[start : start + L].copy()))
    return out


def sample_lengths(signals, Lmin: int, Lmax: int, rng: np.random.Generator) -> list[TimeSeries]:
    if Lmin > Lmax:
        raise InvalidInput("Lmin must not exceed Lmax")
    out = []
    for s in signals:
        L = int(rng.integers(Lmin, Lmax + 1))
        out.extend(slice_fixed([s], L, rng))
    return out


def sample_pairs(N: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct ordered pairs (i, j) over N signals, without replacement."""
    total = N * N
    if n_pairs > total:
        raise InvalidInput(f"cannot draw {n_pairs} distinct pairs from {total}")
    flat = rng.choice(total, size=n_pairs, replace=False)
    return np.stack([flat // N, flat % N], axis=1).astype(np.int64)


@dataclass
class SynthConfig:
    """Desk-scale stand-in for sleep EEG: per-class sinusoid bands plus AR(1) noise."""

    n_classes: int = 3
    per_class: int = 100
    length_range: tuple[int, int] = (256, 256)
    bands: tuple = ((0.5, 2.0), (4.0, 7.0), (12.0, 20.0))
    fs: float = 100.0
    n_components: int = 3
    noise: float = 0.3
    ar_coef: float = 0.9
    n_groups: int = 20
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(self.length_range)
        self.bands = tuple(tuple(b) for b in self.bands)
        self.split_fractions = tuple(self.split_fractions)
        if min(self.n_classes, self.per_class, self.n_components, self.n_groups) < 1:
            raise InvalidInput("synthetic config counts must be positive")
        if len(self.bands) < self.n_classes:
            raise InvalidInput("need one frequency band per class")
        if any(hi > self.fs / 2 or lo < 0 or lo > hi for lo, hi in self.bands):
            raise InvalidInput("bands must lie within [0, fs/2]")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise InvalidInput("bad length range")


def assign_splits(groups: list[str], fractions, rng: np.random.Generator) -> dict[str, str]:
    """Map each group to one split, so no group spans two splits."""
    uniq = sorted(set(groups))
    order = rng.permutation(len(uniq))
    n = len(uniq)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = {}
    for rank, k in enumerate(order):
        tags[uniq[k]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


def synth_gen(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    signals = []
    for k in range(cfg.n_classes):
        lo_f, hi_f = cfg.bands[k]
        for r in range(cfg.per_class):
            L = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
            t = np.arange(L) / cfg.fs
            freqs = rng.uniform(lo_f, hi_f, cfg.n_components)
            amps = rng.uniform(0.5, 1.5, cfg.n_components)
            phases = rng.uniform(0, 2 * np.pi, cfg.n_components)
            clean = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
            eps = rng.normal(0.0, 1.0, L)
            ar = np.empty(L)
            ar[0] = eps[0]
            for n in range(1, L):
                ar[n] = cfg.ar_coef * ar[n - 1] + eps[n]
            ar *= np.sqrt(1 - cfg.ar_coef**2)
            group = f"s{int(rng.integers(cfg.n_groups)):03d}"
            signals.append(TimeSeries(clean + cfg.noise * ar, id=f"c{k}_{r:05d}", label=k, group=group))
    tags = assign_splits([s.group for s in signals], cfg.split_fractions, rng)
    return Dataset(signals, [tags[s.group] for s in signals], provenance=f"synthetic {json.dumps(asdict(cfg))}")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_dataset(dataset: Dataset, root) -> None:
    """Directory layout: ``manifest.json`` plus one raw little-endian f32 file per signal."""
    root = Path(root)
    (root / "signals").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (s, tag) in enumerate(zip(dataset.signals, dataset.splits)):
        rel = f"signals/{k:06d}.f32"
        _atomic_write(root / rel, s.values.astype("<f4").tobytes())
        entries.append({"id": s.id, "path": rel, "length": len(s), "label": s.label,
                        "group": s.group, "split": tag})
    manifest = {"provenance": dataset.provenance, "signals": entries}
    _atomic_write(root / "manifest.json", json.dumps(manifest, indent=1).encode())


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    signals, splits = [], []
    for e in manifest["signals"]:
        values = np.fromfile(root / e["path"], dtype="<f4")
        if len(values) != e["length"]:
            raise InvalidInput(f"{e['path']}: manifest says {e['length']} samples, found {len(values)}")
        signals.append(TimeSeries(values, id=e["id"], label=e.get("label"), group=e.get("group")))
        splits.append(e.get("split", "train"))
    return Dataset(signals, splits, manifest.get("provenance", ""))


def read_signal_csv(path) -> np.ndarray:
    """One value per line; blank lines ignored."""
    with open(path) as fh:
        return np.array([float(line) for line in fh if line.strip()], dtype=np.float64)


def import_csv_dir(paths, labels=None, splits=None, provenance="csv import") -> Dataset:
    signals = []
    for k, p in enumerate(paths):
        label = None if labels is None else labels[k]
        signals.append(TimeSeries(read_signal_csv(p), id=Path(p).stem, label=label, group=Path(p).stem))
    return Dataset(signals, list(splits) if splits else [], provenance)
