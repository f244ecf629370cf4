"""Siamese encoder-decoder and direct-regression trainers."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .diffnet import AdamState, Checkpoint, adam_step, backward, forward
from .metrics import PairGroundTruth
from .models import DirectModel, SiameseModel, pad_batch

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    L: int = 1000
    H: int = 500
    batch_size: int = 128
    lam: float = 1.0
    lr: float = 1e-5
    max_epochs: int = 50
    patience: int = 8
    seed: int = 0
    model_kind: str = "siamese"
    N: int = 10_000
    n_pairs: int = 1_000_000
    n_val: int = 1000
    n_val_pairs: int = 100_000
    n_test: int = 1000
    n_test_pairs: int = 100_000
    symmetrize: bool = False
    eval_batch: int = 256

    def __post_init__(self):
        counts = (self.L, self.H, self.batch_size, self.max_epochs, self.patience, self.N, self.n_pairs)
        if min(counts) < 1:
            raise ValueError("all counts must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.model_kind not in ("siamese", "direct"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Small CPU-sized preset used by the tests and the example scripts."""
    base = dict(L=256, H=128, batch_size=128, lam=1.0, lr=3e-3, max_epochs=8, patience=3,
                N=500, n_pairs=20_000, n_val=100, n_val_pairs=2000, n_test=150, n_test_pairs=2000)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    wall_time: float = 0.0

    def to_dict(self):
        return asdict(self)

    def curve_csv(self) -> str:
        keys = ["epoch", "train_approx", "train_recon", "train_total", "val_approx", "val_recon", "val_total"]
        rows = [",".join(keys)]
        for e in self.epochs:
            rows.append(",".join("" if e.get(k) is None else repr(e[k]) for k in keys))
        return "\n".join(rows) + "\n"


class EarlyStopping:
    """Tracks the best loss; ``should_stop`` after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _stack(signals) -> np.ndarray:
    arrs = [np.asarray(getattr(s, "values", s), dtype=np.float32) for s in signals]
    if len({len(a) for a in arrs}) != 1:
        raise ValueError("siamese training needs equal-length signals; slice them first")
    return np.stack(arrs)


def _check_gt(gt: PairGroundTruth, n: int):
    if len(gt) == 0:
        raise ValueError("empty ground truth")
    if gt.value.min() < 0 or gt.value.max() > 1:
        raise ValueError("ground-truth values must be normalized to [0, 1]")
    if gt.i.max() >= n or gt.j.max() >= n:
        raise ValueError("ground-truth index out of range for the given signals")


# -- per-batch losses and gradients ------------------------------------------

def siamese_step(model: SiameseModel, xa, xb, y, lam: float, mode: str = "train", need_grads: bool = True):
    """Losses (and gradients) for one batch of pairs.

    ``xa``, ``xb``: ``[B, L]``; ``y``: normalized DTW targets. Returns
    ``(losses, grads)`` where ``grads`` is ``None`` unless requested.
    """
    B, L = xa.shape
    x = np.concatenate([xa, xb])[:, None, :]
    z, enc_cache = forward(model.encoder, model.params, x, mode)
    diff = z[:B] - z[B:]
    dist = np.sqrt((diff * diff).sum(axis=1))
    err = dist - y
    approx = float(np.mean(err.astype(np.float64) ** 2))
    xhat, dec_cache = forward(model.decoder, model.params, z, mode, target_length=L)
    resid = xhat - x
    # two per-signal-set MSEs, each a mean over B*L values
    recon = float((resid.astype(np.float64) ** 2).sum() / (B * L))
    losses = {"approx": approx, "recon": recon, "total": approx + lam * recon}
    if not need_grads:
        return losses, None

    g_dist = (2.0 / B) * err
    safe = np.where(dist > 0, dist, 1.0)
    gz = np.where(dist[:, None] > 0, (g_dist / safe)[:, None] * diff, 0.0).astype(z.dtype)
    g_z = np.concatenate([gz, -gz])
    g_xhat = (lam * 2.0 / (B * L)) * resid
    dec_grads, g_z_dec = backward(model.decoder, model.params, dec_cache, g_xhat.astype(xhat.dtype))
    enc_grads, _ = backward(model.encoder, model.params, enc_cache, g_z + g_z_dec)
    return losses, {**enc_grads, **dec_grads}


def direct_step(model: DirectModel, xa, xb, y, mode: str = "train", need_grads: bool = True):
    """``xa``, ``xb``: lists of 1-D signals, padded together to the longest in the batch."""
    L = max(max(len(a) for a in xa), max(len(b) for b in xb))
    a, b = pad_batch(xa, L), pad_batch(xb, L)
    out, cache = forward(model.spec, model.params, (a, b), mode)
    err = out[:, 0] - y
    mse = float(np.mean(err.astype(np.float64) ** 2))
    losses = {"approx": mse, "recon": 0.0, "total": mse}
    if not need_grads:
        return losses, None
    grads, _ = backward(model.spec, model.params, cache, ((2.0 / len(y)) * err)[:, None].astype(out.dtype))
    return losses, grads


# -- validation ----------------------------------------------------------------

def validate(model, signals, gt: PairGroundTruth, lam: float = 1.0, batch_size: int = 256) -> dict:
    """Inference-mode losses over a pair subset; never mutates parameters."""
    sums = {"approx": 0.0, "recon": 0.0}
    n = len(gt)
    if model.kind == "siamese":
        X = _stack(signals)
    for s in range(0, n, batch_size):
        i, j, y = gt.i[s : s + batch_size], gt.j[s : s + batch_size], gt.value[s : s + batch_size]
        if model.kind == "siamese":
            losses, _ = siamese_step(model, X[i], X[j], y.astype(np.float32), lam, "infer", need_grads=False)
        else:
            losses, _ = direct_step(model, [signals[k] for k in i], [signals[k] for k in j],
                                    y.astype(np.float32), "infer", need_grads=False)
        for k in sums:
            sums[k] += losses[k] * len(y)
    approx, recon = sums["approx"] / n, sums["recon"] / n
    return {"approx_mse": approx, "recon_mse": recon, "total": approx + lam * recon}


# -- training loops -------------------------------------------------------------

def _train(cfg: TrainConfig, model, train_signals, train_gt, val_signals, val_gt, on_epoch=None):
    _check_gt(train_gt, len(train_signals))
    _check_gt(val_gt, len(val_signals))
    lam = cfg.lam if model.kind == "siamese" else 0.0
    opt = AdamState(lr=cfg.lr)
    report = TrainReport()
    stopper = EarlyStopping(cfg.patience)
    t0 = time.perf_counter()
    X = _stack(train_signals) if model.kind == "siamese" else None

    def record(epoch, train_losses):
        val = validate(model, val_signals, val_gt, lam, cfg.eval_batch)
        row = {"epoch": epoch,
               "train_approx": train_losses and train_losses["approx"],
               "train_recon": train_losses and train_losses["recon"],
               "train_total": train_losses and train_losses["total"],
               "val_approx": val["approx_mse"], "val_recon": val["recon_mse"], "val_total": val["total"],
               "time": time.perf_counter() - t0}
        if not np.isfinite(row["val_total"]):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}: {row}")
        report.epochs.append(row)
        log.info("epoch %d val_approx=%.6f val_recon=%.6f", epoch, row["val_approx"], row["val_recon"])
        if on_epoch is not None:
            on_epoch(row)
        return row["val_total"]

    # epoch 0 is the untrained model
    stopper.update(0, record(0, None))
    best_params = model.params.copy()

    n = len(train_gt)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = {"approx": 0.0, "recon": 0.0, "total": 0.0}
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            i, j = train_gt.i[idx], train_gt.j[idx]
            y = train_gt.value[idx].astype(np.float32)
            if model.kind == "siamese":
                losses, grads = siamese_step(model, X[i], X[j], y, lam)
            else:
                losses, grads = direct_step(model, [train_signals[k] for k in i],
                                            [train_signals[k] for k in j], y)
            if not np.isfinite(losses["total"]):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {s // cfg.batch_size}: "
                                       f"{losses}")
            adam_step(model.params, grads, opt)
            for k in sums:
                sums[k] += losses[k] * len(idx)
        train_losses = {k: v / n for k, v in sums.items()}
        if stopper.update(epoch, record(epoch, train_losses)):
            best_params = model.params.copy()
        if stopper.should_stop:
            report.stopped_early = True
            break

    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    report.wall_time = time.perf_counter() - t0
    model.params = best_params
    ckpt = Checkpoint(model.kind, model.specs, best_params, opt, asdict(cfg),
                      {"epoch": stopper.best_epoch, "val_loss": stopper.best})
    return ckpt, report


def train_siamese(cfg: TrainConfig, train_signals, train_gt, val_signals, val_gt, model=None, on_epoch=None):
    """Jointly fits encoder and decoder; returns the best-epoch checkpoint and the report."""
    if model is None:
        model = SiameseModel.create(cfg.H, np.random.default_rng(cfg.seed))
    return _train(cfg, model, train_signals, train_gt, val_signals, val_gt, on_epoch)


def train_direct(cfg: TrainConfig, train_signals, train_gt, val_signals, val_gt, model=None, on_epoch=None):
    if model is None:
        model = DirectModel.create(cfg.H, np.random.default_rng(cfg.seed), symmetrize=cfg.symmetrize)
    return _train(cfg, model, train_signals, train_gt, val_signals, val_gt, on_epoch)


def train(cfg: TrainConfig, *args, **kwargs):
    fn = train_siamese if cfg.model_kind == "siamese" else train_direct
    return fn(cfg, *args, **kwargs)
