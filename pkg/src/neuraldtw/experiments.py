"""End-to-end desk-scale pipeline: generate -> preprocess -> slice -> pairs -> ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, PreprocessStats, SynthConfig, TimeSeries, preprocess, slice_fixed, sample_pairs, synth_gen
from .metrics import PairGroundTruth, build_ground_truth
from .training import TrainConfig


@dataclass
class Prepared:
    train: list[TimeSeries]
    val: list[TimeSeries]
    test: list[TimeSeries]
    train_gt: PairGroundTruth
    val_gt: PairGroundTruth
    stats: PreprocessStats


def desk_synth(seed: int = 0, per_class: int = 350, length_range=(300, 600), **kw) -> SynthConfig:
    base = dict(n_classes=3, per_class=per_class, length_range=length_range, n_groups=40,
                split_fractions=(0.6, 0.15, 0.25), seed=seed)
    base.update(kw)
    return SynthConfig(**base)


def take(dataset: Dataset, split: str, n: int, rng: np.random.Generator) -> list[TimeSeries]:
    """Random subset of ``n`` signals of a split, in dataset order (splits are often sorted by class)."""
    signals = dataset.split(split).signals
    if len(signals) < n:
        raise ValueError(f"split {split!r} has {len(signals)} signals, {n} requested")
    return [signals[k] for k in np.sort(rng.choice(len(signals), n, replace=False))]


def prepare(cfg: TrainConfig, dataset: Dataset, seed: int | None = None, workers: int | None = None,
            stats: PreprocessStats | None = None, already_processed: bool = False) -> Prepared:
    """Preprocess a raw dataset, slice to ``cfg.L`` and build train/val ground truth.

    Ground truth is computed after the final slicing.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    if already_processed:
        processed = dataset
    else:
        processed, stats = preprocess(dataset, stats)
    train = slice_fixed(take(processed, "train", cfg.N, rng), cfg.L, rng)
    val = slice_fixed(take(processed, "val", cfg.n_val, rng), cfg.L, rng)
    test = take(processed, "test", cfg.n_test, rng)
    train_pairs = sample_pairs(len(train), cfg.n_pairs, rng)
    val_pairs = sample_pairs(len(val), cfg.n_val_pairs, rng)
    train_gt = build_ground_truth(train, train_pairs, workers=workers)
    val_gt = build_ground_truth(val, val_pairs, workers=workers)
    return Prepared(train, val, test, train_gt, val_gt, stats)


def prepare_synthetic(cfg: TrainConfig, synth: SynthConfig | None = None, workers: int | None = None) -> Prepared:
    synth = desk_synth(cfg.seed) if synth is None else synth
    return prepare(cfg, synth_gen(synth), workers=workers)


def eval_signals(signals, L: int, seed: int = 0) -> list[TimeSeries]:
    """Fixed-length evaluation copies (one random window per signal)."""
    return slice_fixed(signals, L, np.random.default_rng([seed, 2]))


def synthetic_test_split(seed: int, L: int, n: int | None = None) -> list[TimeSeries]:
    """Test split of a fresh desk-scale synthetic dataset, preprocessed on its own statistics."""
    processed, _ = preprocess(synth_gen(desk_synth(seed)))
    test = processed.split("test").signals
    return eval_signals(test[:n] if n else test, L, seed)
