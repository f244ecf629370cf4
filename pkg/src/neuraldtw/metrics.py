"""Reference similarity metrics: exact DTW, brute-force oracle, FastDTW, SoftDTW.

All metrics take plain 1-D arrays (or :class:`~neuraldtw.data.TimeSeries`)
and use the absolute point cost unless ``cost`` says otherwise.
"""

from __future__ import annotations

import csv
import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

COST_KINDS = {"absolute": _kernels.ABSOLUTE, "squared": _kernels.SQUARED}
BRUTE_LIMIT = 100


class InvalidInput(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    values = getattr(x, "values", x)
    arr = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InvalidInput("series must be non-empty")
    return arr


def _cost_code(cost: str) -> int:
    try:
        return COST_KINDS[cost]
    except KeyError:
        raise InvalidInput(f"unknown cost kind {cost!r}; expected one of {sorted(COST_KINDS)}") from None


@dataclass(frozen=True)
class WarpingPath:
    """Monotone alignment between two series, stored 0-based.

    ``steps`` is an ``(k, 2)`` integer array; :meth:`one_based` gives the
    conventional (1,1)..(n,m) form.
    """

    steps: np.ndarray

    def __len__(self):
        return len(self.steps)

    def one_based(self) -> list[tuple[int, int]]:
        return [(int(i) + 1, int(j) + 1) for i, j in self.steps]

    def cost(self, x, y, cost: str = "absolute") -> float:
        x, y = _as_array(x), _as_array(y)
        d = x[self.steps[:, 0]] - y[self.steps[:, 1]]
        c = np.abs(d) if cost == "absolute" else d * d
        return float(np.cumsum(c)[-1])

    def validate(self, n: int, m: int) -> None:
        s = self.steps
        if len(s) == 0 or tuple(s[0]) != (0, 0) or tuple(s[-1]) != (n - 1, m - 1):
            raise InvalidInput("path must start at (1,1) and end at (n,m)")
        steps = np.diff(s, axis=0)
        ok = np.isin(steps[:, 0], (0, 1)) & np.isin(steps[:, 1], (0, 1)) & (steps.sum(axis=1) > 0)
        if not ok.all():
            raise InvalidInput("path is not monotone and continuous")
        if len(s) > n + m - 1:
            raise InvalidInput("path longer than n + m - 1")


@dataclass(frozen=True)
class SoftDtwConfig:
    gamma: float = 0.1
    cost: str = "absolute"

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidInput(f"gamma must be positive, got {self.gamma}")
        _cost_code(self.cost)


def dtw(x, y, cost: str = "absolute", return_path: bool = True):
    """Exact DTW.

    Returns ``(value, WarpingPath)``, or just the value when
    ``return_path`` is false (two-row memory in that case).
    """
    x, y = _as_array(x), _as_array(y)
    kind = _cost_code(cost)
    if not return_path:
        return float(_kernels.dtw_value(x, y, kind))
    D = _kernels.dtw_matrix(x, y, kind)
    return float(D[-1, -1]), WarpingPath(_kernels.backtrack(D))


@functools.lru_cache(maxsize=None)
def _all_paths(n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Every monotone path on an n x m grid, as padded flat cell indices.

    Padding points at an extra zero-cost cell (index n*m).
    """
    paths = []

    def walk(i, j, acc):
        acc.append(i * m + j)
        if i == n - 1 and j == m - 1:
            paths.append(list(acc))
        else:
            if i + 1 < n and j + 1 < m:
                walk(i + 1, j + 1, acc)
            if i + 1 < n:
                walk(i + 1, j, acc)
            if j + 1 < m:
                walk(i, j + 1, acc)
        acc.pop()

    walk(0, 0, [])
    width = n + m - 1
    out = np.full((len(paths), width), n * m, dtype=np.int64)
    for k, p in enumerate(paths):
        out[k, : len(p)] = p
    return out, np.array([len(p) for p in paths])


def dtw_brute(x, y, cost: str = "absolute") -> tuple[float, int]:
    """Minimum path cost by enumerating every warping path.

    Test oracle only: refuses grids with more than 100 cells. Returns
    ``(value, number_of_paths)``.
    """
    x, y = _as_array(x), _as_array(y)
    n, m = len(x), len(y)
    if n * m > BRUTE_LIMIT:
        raise InvalidInput(f"brute force limited to n*m <= {BRUTE_LIMIT}, got {n * m}")
    d = x[:, None] - y[None, :]
    c = np.abs(d) if cost == "absolute" else d * d
    flat = np.append(c.ravel(), 0.0)
    paths, _ = _all_paths(n, m)
    # sequential summation along each path, matching the DP's order
    totals = np.cumsum(flat[paths], axis=1)[:, -1]
    return float(totals.min()), len(paths)


def soft_dtw(x, y, cfg: SoftDtwConfig | None = None, gamma: float | None = None) -> float:
    cfg = _soft_cfg(cfg, gamma)
    x, y = _as_array(x), _as_array(y)
    return float(_kernels.soft_dtw_value(x, y, cfg.gamma, _cost_code(cfg.cost)))


def soft_dtw_grad(x, y, cfg: SoftDtwConfig | None = None, gamma: float | None = None):
    """SoftDTW value and its gradient with respect to ``x``."""
    cfg = _soft_cfg(cfg, gamma)
    x, y = _as_array(x), _as_array(y)
    value, grad = _kernels.soft_dtw_grad(x, y, cfg.gamma, _cost_code(cfg.cost))
    return float(value), grad


def _soft_cfg(cfg, gamma):
    if cfg is None:
        cfg = SoftDtwConfig(gamma=0.1 if gamma is None else gamma)
    elif gamma is not None:
        cfg = SoftDtwConfig(gamma=gamma, cost=cfg.cost)
    return cfg


def _coarsen(x: np.ndarray) -> np.ndarray:
    # odd tails are dropped; the window projection restores the last row
    half = len(x) // 2
    return (x[0 : 2 * half : 2] + x[1 : 2 * half : 2]) / 2.0


def _project_window(path: np.ndarray, n: int, m: int, radius: int):
    """Per-row column bounds at full resolution from a coarse path."""
    nc, mc = (n // 2), (m // 2)
    row_lo = np.full(nc, mc, dtype=np.int64)
    row_hi = np.full(nc, -1, dtype=np.int64)
    np.minimum.at(row_lo, path[:, 0], path[:, 1])
    np.maximum.at(row_hi, path[:, 0], path[:, 1])
    # spread every path cell by `radius` in both directions
    span = 2 * radius + 1
    lo_c = sliding_window_view(np.pad(row_lo, radius, constant_values=mc), span).min(axis=1) - radius
    hi_c = sliding_window_view(np.pad(row_hi, radius, constant_values=-1), span).max(axis=1) + radius
    lo_c = np.clip(lo_c, 0, mc - 1)
    hi_c = np.clip(hi_c, 0, mc - 1)

    lo = np.repeat(2 * lo_c, 2)
    hi = np.repeat(2 * hi_c + 1, 2)
    if n % 2:
        lo = np.append(lo, lo[-1])
        hi = np.append(hi, hi[-1])
    hi = np.minimum(hi, m - 1)
    lo[0] = 0
    hi[-1] = m - 1
    # keep bounds monotone and rows connected so a full path always exists
    hi = np.maximum.accumulate(hi)
    lo = np.minimum.accumulate(lo[::-1])[::-1]
    lo[1:] = np.minimum(lo[1:], hi[:-1] + 1)
    return lo, hi


def fast_dtw(x, y, radius: int = 1, cost: str = "absolute"):
    """Multi-resolution DTW approximation.

    Coarsens by pairwise averaging until either series has length
    ``<= radius + 2``, solves that level exactly, then projects the path
    up one level at a time and refines it inside a band of ``radius``
    cells. Returns ``(value, WarpingPath)``; the value is never below the
    exact DTW.
    """
    if radius < 0:
        raise InvalidInput("radius must be non-negative")
    x, y = _as_array(x), _as_array(y)
    kind = _cost_code(cost)
    value, path = _fast_dtw(x, y, int(radius), kind)
    return float(value), WarpingPath(path)


def _fast_dtw(x, y, radius, kind):
    min_size = radius + 2
    if len(x) <= min_size or len(y) <= min_size:
        D = _kernels.dtw_matrix(x, y, kind)
        return D[-1, -1], _kernels.backtrack(D)
    _, coarse = _fast_dtw(_coarsen(x), _coarsen(y), radius, kind)
    lo, hi = _project_window(coarse, len(x), len(y), radius)
    return _kernels.windowed_dtw(x, y, lo, hi, kind)


@dataclass
class PairGroundTruth:
    """Normalized reference DTW values for sampled signal pairs."""

    i: np.ndarray
    j: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        if not (len(self.i) == len(self.j) == len(self.value)):
            raise InvalidInput("ground-truth columns differ in length")

    def __len__(self):
        return len(self.value)

    @property
    def entries(self):
        return list(zip(self.i.tolist(), self.j.tolist(), self.value.tolist()))

    def check(self, normalized: bool = True) -> None:
        keys = self.i * (max(self.j.max(initial=0), self.i.max(initial=0)) + 1) + self.j
        if len(np.unique(keys)) != len(keys):
            raise InvalidInput("duplicate (i, j) entries in ground truth")
        if normalized and len(self) and (self.value.min() < 0 or self.value.max() > 1):
            raise InvalidInput("normalized ground-truth values must lie in [0, 1]")

    def subset(self, mask) -> "PairGroundTruth":
        return PairGroundTruth(self.i[mask], self.j[mask], self.value[mask])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "value"])
            for a, b, v in zip(self.i, self.j, self.value.astype(np.float32)):
                w.writerow([int(a), int(b), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "PairGroundTruth":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["i", "j", "value"]:
            raise InvalidInput(f"{path}: expected header i,j,value")
        body = rows[1:]
        i = [int(r[0]) for r in body]
        j = [int(r[1]) for r in body]
        v = np.array([float(r[2]) for r in body], dtype=np.float32)
        return cls(i, j, v.astype(np.float64))

    def to_bin(self, path) -> None:
        rec = np.empty(len(self), dtype=[("i", "<u4"), ("j", "<u4"), ("v", "<f4")])
        rec["i"], rec["j"], rec["v"] = self.i, self.j, self.value
        Path(path).write_bytes(rec.tobytes())

    @classmethod
    def from_bin(cls, path) -> "PairGroundTruth":
        rec = np.frombuffer(Path(path).read_bytes(), dtype=[("i", "<u4"), ("j", "<u4"), ("v", "<f4")])
        return cls(rec["i"], rec["j"], rec["v"].astype(np.float64))

    def save(self, path) -> None:
        (self.to_bin if str(path).endswith(".bin") else self.to_csv)(path)

    @classmethod
    def load(cls, path) -> "PairGroundTruth":
        return cls.from_bin(path) if str(path).endswith(".bin") else cls.from_csv(path)


def pack_signals(signals) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arrays = [_as_array(s) for s in signals]
    lengths = np.array([len(a) for a in arrays], dtype=np.int64)
    offsets = np.zeros(len(arrays), dtype=np.int64)
    offsets[1:] = np.cumsum(lengths)[:-1]
    return np.concatenate(arrays), offsets, lengths


def pairwise_values(signals, pairs, metric: str = "dtw", cost: str = "absolute",
                    gamma: float = 0.1, radius: int = 1, workers: int | None = None) -> np.ndarray:
    """Raw metric values for index pairs into ``signals``.

    Exact and soft DTW run in a parallel numba kernel; FastDTW fans out
    over a thread pool. Output order follows ``pairs``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros(0)
    if pairs.min() < 0 or pairs.max() >= len(signals):
        raise InvalidInput("pair index out of range")
    kind = _cost_code(cost)
    if metric in ("dtw", "soft_dtw"):
        flat, offsets, lengths = pack_signals(signals)
        if workers:
            import numba

            numba.set_num_threads(min(workers, numba.config.NUMBA_NUM_THREADS))
        a, b = np.ascontiguousarray(pairs[:, 0]), np.ascontiguousarray(pairs[:, 1])
        if metric == "dtw":
            return _kernels.dtw_pairs(flat, offsets, lengths, a, b, kind)
        SoftDtwConfig(gamma=gamma, cost=cost)
        return _kernels.soft_dtw_pairs(flat, offsets, lengths, a, b, float(gamma), kind)
    if metric == "fast_dtw":
        arrays = [_as_array(s) for s in signals]

        def one(p):
            return _fast_dtw(arrays[p[0]], arrays[p[1]], radius, kind)[0]

        if workers == 1:
            return np.array([one(p) for p in pairs])
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return np.array(list(ex.map(one, pairs)))
    raise InvalidInput(f"unknown metric {metric!r}")


def normalize_dtw(raw, len_x, len_y):
    """Scale a DTW value on [0,1]-valued series by the longer length."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise InvalidInput("raw DTW must be non-negative")
    out = raw / np.maximum(len_x, len_y)
    return float(out) if out.ndim == 0 else out


def build_ground_truth(signals, pairs, normalize: bool = True, cost: str = "absolute",
                       workers: int | None = None) -> PairGroundTruth:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    raw = pairwise_values(signals, pairs, "dtw", cost=cost, workers=workers)
    if normalize:
        lengths = np.array([len(_as_array(s)) for s in signals])
        raw = normalize_dtw(raw, lengths[pairs[:, 0]], lengths[pairs[:, 1]])
    gt = PairGroundTruth(pairs[:, 0], pairs[:, 1], raw)
    gt.check(normalized=False)
    return gt

