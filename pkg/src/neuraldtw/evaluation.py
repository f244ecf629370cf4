"""Experiment harnesses: retrieval agreement, KNN macro-F1, timing, prototype learning."""

from __future__ import annotations

import csv
import io
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as M
from .diffnet import AdamState, ParamStore, adam_step, backward, forward, load_checkpoint
from .models import DirectModel, SiameseModel, model_from_checkpoint

log = logging.getLogger(__name__)

METRIC_KINDS = ("exact_dtw", "fast_dtw", "soft_dtw", "model_siamese", "model_direct", "random")


@dataclass
class MetricHandle:
    """A named pair-distance function.

    ``params`` carries ``radius`` (FastDTW), ``gamma`` (SoftDTW),
    ``checkpoint`` or ``model`` (trained models), ``seed`` (random baseline),
    ``normalize`` (DP metrics divided by the longer length, the scale the
    models are trained on).
    """

    name: str
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        self._model = self.params.get("model")

    @property
    def model(self):
        if self._model is None and self.kind.startswith("model_"):
            self._model = model_from_checkpoint(load_checkpoint(self.params["checkpoint"]))
        return self._model

    def _raw(self):
        if self.kind == "exact_dtw":
            return dict(metric="dtw")
        if self.kind == "fast_dtw":
            return dict(metric="fast_dtw", radius=int(self.params.get("radius", 1)))
        return dict(metric="soft_dtw", gamma=float(self.params.get("gamma", 0.1)))

    def _scale(self, vals, la, lb):
        return M.normalize_dtw(vals, la, lb) if self.params.get("normalize") else vals

    def distance(self, x, y) -> float:
        if self.kind == "random":
            return float(np.random.default_rng().random())
        if self.kind.startswith("model_"):
            return self.model.distance(x, y)
        x, y = _vals(x), _vals(y)
        if self.kind == "exact_dtw":
            v = M.dtw(x, y, return_path=False)
        elif self.kind == "fast_dtw":
            v = M.fast_dtw(x, y, int(self.params.get("radius", 1)))[0]
        else:
            v = M.soft_dtw(x, y, gamma=float(self.params.get("gamma", 0.1)))
        return float(self._scale(v, len(x), len(y)))

    def pairwise(self, signals, workers: int | None = None) -> np.ndarray:
        """Full ``n x n`` distance matrix (row = query)."""
        n = len(signals)
        if self.kind == "random":
            rng = np.random.default_rng(self.params.get("seed", 0))
            return rng.random((n, n))
        if self.kind.startswith("model_"):
            return self.model.pairwise(signals)
        iu, ju = np.triu_indices(n, k=1)
        vals = M.pairwise_values(signals, np.stack([iu, ju], 1), workers=workers, **self._raw())
        lengths = np.array([len(_vals(s)) for s in signals])
        vals = self._scale(vals, lengths[iu], lengths[ju])
        D = np.zeros((n, n))
        D[iu, ju] = vals
        D[ju, iu] = vals
        if self.kind == "soft_dtw":
            # soft-DTW of a series with itself is negative, not zero
            k = np.arange(n)
            D[k, k] = self._scale(M.pairwise_values(signals, np.stack([k, k], 1), **self._raw()), lengths, lengths)
        return D

    def cross(self, queries, refs, workers: int | None = None) -> np.ndarray:
        if self.kind == "random":
            rng = np.random.default_rng(self.params.get("seed", 0))
            return rng.random((len(queries), len(refs)))
        if self.kind.startswith("model_"):
            return self.model.cross(queries, refs)
        pool = list(queries) + list(refs)
        nq = len(queries)
        ii, jj = np.divmod(np.arange(nq * len(refs)), len(refs))
        vals = M.pairwise_values(pool, np.stack([ii, jj + nq], 1), workers=workers, **self._raw())
        lengths = np.array([len(_vals(s)) for s in pool])
        vals = self._scale(vals, lengths[ii], lengths[jj + nq])
        return np.asarray(vals).reshape(nq, len(refs))


def _vals(s) -> np.ndarray:
    return np.asarray(getattr(s, "values", s), dtype=np.float64)


def model_metric(model, name: str | None = None) -> MetricHandle:
    kind = "model_siamese" if model.kind == "siamese" else "model_direct"
    return MetricHandle(name or kind, kind, {"model": model})


# -- nearest-neighbour retrieval ---------------------------------------------------

@dataclass
class RetrievalReport:
    metric: str
    reference: str
    n_t: int
    top_k: int
    per_rep: list[float]
    mean: float
    std: float


def top1_in_topk(D_metric: np.ndarray, D_ref: np.ndarray, top_k: int = 5) -> float:
    """Percentage of queries whose metric nearest neighbour is among the reference top-k.

    The query itself is excluded on both sides; ties resolve to the lower index.
    """
    n = len(D_metric)
    eye = np.eye(n, dtype=bool)
    Dm = np.where(eye, np.inf, D_metric)
    Dr = np.where(eye, np.inf, D_ref)
    nn = np.argmin(Dm, axis=1)  # first minimum, i.e. lowest index
    ranked = np.argsort(Dr, axis=1, kind="stable")[:, :top_k]
    hits = (ranked == nn[:, None]).any(axis=1)
    return 100.0 * hits.sum() / n


def nn_retrieval_agreement(metric: MetricHandle, reference: MetricHandle, signals, n_t: int, top_k: int = 5,
                           reps: int = 8, seed: int = 0, workers: int | None = None) -> RetrievalReport:
    if n_t < top_k + 2:
        raise ValueError(f"n_t must be at least top_k + 2 = {top_k + 2}")
    if n_t > len(signals):
        raise ValueError(f"n_t = {n_t} exceeds the {len(signals)} available signals")
    rng = np.random.default_rng(seed)
    subsets = [np.sort(rng.choice(len(signals), n_t, replace=False)) for _ in range(reps)]
    # distances are computed once over every signal any repetition touches
    pool = np.unique(np.concatenate(subsets))
    where = {g: k for k, g in enumerate(pool)}
    chosen = [signals[g] for g in pool]
    Dm = metric.pairwise(chosen, workers=workers)
    Dr = Dm if reference is metric else reference.pairwise(chosen, workers=workers)
    scores = []
    for sub in subsets:
        loc = np.array([where[g] for g in sub])
        scores.append(top1_in_topk(Dm[np.ix_(loc, loc)], Dr[np.ix_(loc, loc)], top_k))
    return RetrievalReport(metric.name, reference.name, n_t, top_k, scores,
                           float(np.mean(scores)), float(np.std(scores)))


# -- KNN classification ---------------------------------------------------------------

@dataclass
class ClassifReport:
    metric: str
    k: int
    n_signals: int
    per_rep: list[float]
    per_class: list[list[float]]
    classes: list[int]
    mean: float
    std: float


def macro_f1(y_true, y_pred, labels) -> tuple[float, np.ndarray]:
    """Unweighted mean of per-class F1 over ``labels``; a class never seen nor predicted scores 0."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    scores = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    scores = np.array(scores, dtype=float)
    return float(scores.mean()), scores


def knn_predict(D: np.ndarray, train_labels, k: int = 1) -> np.ndarray:
    """Majority vote over the ``k`` nearest training signals (rows of ``D`` are queries).

    Vote ties go to the class with the smallest mean distance among its
    voters, then to the lowest class id.
    """
    train_labels = np.asarray(train_labels)
    out = np.empty(len(D), dtype=train_labels.dtype)
    for q, row in enumerate(D):
        near = np.argsort(row, kind="stable")[:k]
        labs, dists = train_labels[near], row[near]
        classes, counts = np.unique(labs, return_counts=True)
        top = classes[counts == counts.max()]
        if len(top) == 1:
            out[q] = top[0]
        else:
            means = np.array([dists[labs == c].mean() for c in top])
            out[q] = top[np.flatnonzero(means == means.min())[0]]
    return out


def knn_eval(metric: MetricHandle, train_signals, test_signals, k: int = 1, labels=None,
             workers: int | None = None) -> tuple[float, np.ndarray]:
    ytr = np.array([s.label for s in train_signals])
    yte = np.array([s.label for s in test_signals])
    labels = sorted(set(ytr) | set(yte)) if labels is None else labels
    missing = set(labels) - set(ytr)
    if missing:
        warnings.warn(f"classes {sorted(missing)} have no training signals", stacklevel=2)
    D = metric.cross(test_signals, train_signals, workers=workers)
    return macro_f1(yte, knn_predict(D, ytr, k), labels)


def knn_macro_f1(metric: MetricHandle, signals, n_signals: int | None = None, k: int = 1, reps: int = 5,
                 seed: int = 0, labels=None, workers: int | None = None) -> ClassifReport:
    """Per repetition: draw ``n_signals``, split 50/50, fit KNN on one half, score the other."""
    n_signals = len(signals) if n_signals is None else n_signals
    labels = sorted({s.label for s in signals}) if labels is None else list(labels)
    rng = np.random.default_rng(seed)
    per_rep, per_class = [], []
    for _ in range(reps):
        idx = rng.choice(len(signals), n_signals, replace=False)
        half = n_signals // 2
        train = [signals[i] for i in idx[:half]]
        test = [signals[i] for i in idx[half:]]
        score, vec = knn_eval(metric, train, test, k, labels, workers)
        per_rep.append(score)
        per_class.append(vec.tolist())
    return ClassifReport(metric.name, k, n_signals, per_rep, per_class, [int(c) for c in labels],
                         float(np.mean(per_rep)), float(np.std(per_rep)))


# -- timing -----------------------------------------------------------------------------

@dataclass
class TimingReport:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "length", "reps", "total_seconds", "seconds_per_1000"])
        for r in self.rows:
            w.writerow([r["metric"], r["length"], r["reps"], repr(r["total_seconds"]),
                        repr(r["total_seconds"] / r["reps"] * 1000)])
        return buf.getvalue()

    def total(self, metric: str, length: int) -> float:
        for r in self.rows:
            if r["metric"] == metric and r["length"] == length:
                return r["total_seconds"]
        raise KeyError((metric, length))


def timing_bench(metrics: list[MetricHandle], lengths, reps: int = 1000, seed: int = 0, warmup: int = 3) -> TimingReport:
    """Serial wall-clock time of ``reps`` single-pair evaluations per (metric, length).

    Each repetition draws a fresh uniform random pair; warm-up calls are not timed.
    """
    try:
        import numba

        numba.set_num_threads(1)
    except Exception:  # pragma: no cover
        pass
    rows = []
    for L in lengths:
        rng = np.random.default_rng([seed, L])
        xs = rng.random((reps, L))
        ys = rng.random((reps, L))
        for m in metrics:
            for w in range(warmup):
                m.distance(xs[w % reps], ys[w % reps])
            per = np.empty(reps)
            for r in range(reps):
                t = time.perf_counter()
                m.distance(xs[r], ys[r])
                per[r] = time.perf_counter() - t
            rows.append({"metric": m.name, "length": int(L), "reps": reps,
                         "total_seconds": float(per.sum()), "per_call": per.tolist()})
            log.info("%s L=%d: %.4fs for %d calls", m.name, L, per.sum(), reps)
    return TimingReport(rows)


# -- prototype learning -------------------------------------------------------------------

@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # [K, L]
    classes: np.ndarray

    def to_dict(self):
        return {"classes": self.classes.tolist(), "prototypes": self.prototypes.tolist()}


def classify_by_prototype(protos: PrototypeSet, metric: MetricHandle, xs) -> np.ndarray:
    """Nearest prototype under ``metric``; ties go to the lowest class id."""
    single = isinstance(xs, np.ndarray) and xs.ndim == 1 or hasattr(xs, "values")
    batch = [xs] if single else list(xs)
    D = metric.cross(batch, list(protos.prototypes))
    order = np.argsort(protos.classes, kind="stable")
    pick = order[np.argmin(D[:, order], axis=1)]
    out = protos.classes[pick]
    return out[0] if single else out


def init_prototypes(signals, rng: np.random.Generator, per_class: int = 10) -> PrototypeSet:
    labels = np.array([s.label for s in signals])
    classes = np.unique(labels)
    protos = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        pick = members if len(members) < per_class else rng.choice(members, per_class, replace=False)
        protos.append(np.mean([signals[i].values for i in pick], axis=0))
    return PrototypeSet(np.array(protos, dtype=np.float32), classes)


def _proto_loss_siamese(model: SiameseModel, P, X, labels_idx, beta):
    """Loss and d(loss)/dP for a batch; the encoder stays in inference mode."""
    zp_raw, cache = forward(model.encoder, model.params, P[:, None, :], "infer")
    zx, _ = forward(model.encoder, model.params, X[:, None, :], "infer")
    zp, zx = zp_raw.astype(np.float64), zx.astype(np.float64)
    diff = zx[:, None, :] - zp[None, :, :]                # [B, K, H]
    d = np.sqrt((diff**2).sum(-1))                        # [B, K]
    ce, g_d = _softmax_ce(-d, labels_idx)
    g_d = -g_d
    safe = np.where(d > 0, d, 1.0)
    g_zp = -(g_d / safe)[:, :, None] * diff               # d d_bk / d zp_k = -(zx_b - zp_k)/d
    g_zp = g_zp.sum(0)
    rep, g_zp_rep = _repulsion(zp)
    loss = ce - beta * rep
    g_zp = g_zp - beta * g_zp_rep
    _, gP = backward(model.encoder, model.params, cache, g_zp.astype(zp_raw.dtype))
    return loss, gP[:, 0, :]


def _proto_loss_direct(model: DirectModel, P, X, labels_idx, beta):
    B, K = len(X), len(P)
    L = P.shape[1]
    xa = np.repeat(X, K, axis=0)[:, None, :]
    pb = np.tile(P, (B, 1))[:, None, :]
    out, cache = forward(model.spec, model.params, (xa, pb), "infer")
    d = out[:, 0].astype(np.float64).reshape(B, K)
    ce, g_d = _softmax_ce(-d, labels_idx)
    g_d = -g_d
    _, (_, g_pb) = backward(model.spec, model.params, cache, g_d.reshape(-1, 1).astype(out.dtype))
    gP = g_pb[:, 0, :].reshape(B, K, L).sum(0)
    loss = ce
    if K > 1 and beta:
        kk, ll = np.nonzero(~np.eye(K, dtype=bool))
        out2, cache2 = forward(model.spec, model.params, (P[kk][:, None, :], P[ll][:, None, :]), "infer")
        rep = float(out2.mean())
        g = np.full_like(out2, 1.0 / len(kk))
        _, (ga, gb) = backward(model.spec, model.params, cache2, g)
        g_rep = np.zeros_like(P, dtype=np.float64)
        np.add.at(g_rep, kk, ga[:, 0, :])
        np.add.at(g_rep, ll, gb[:, 0, :])
        loss -= beta * rep
        gP = gP - beta * g_rep
    return loss, gP


def _softmax_ce(logits, target):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    B = len(target)
    loss = float(-np.log(p[np.arange(B), target] + 1e-300).mean())
    g = p.copy()
    g[np.arange(B), target] -= 1
    return loss, g / B


def _repulsion(zp):
    """Mean pairwise Euclidean distance between prototype embeddings, and its gradient."""
    K = len(zp)
    if K < 2:
        return 0.0, np.zeros_like(zp)
    iu, ju = np.triu_indices(K, 1)
    diff = zp[iu] - zp[ju]
    d = np.sqrt((diff**2).sum(-1))
    safe = np.where(d > 0, d, 1.0)
    g = (diff / safe[:, None]) / len(iu)
    grad = np.zeros_like(zp)
    np.add.at(grad, iu, g)
    np.add.at(grad, ju, -g)
    return float(d.mean()), grad


def prototype_accuracy(protos: PrototypeSet, metric: MetricHandle, signals) -> float:
    pred = classify_by_prototype(protos, metric, signals)
    return float(np.mean(pred == np.array([s.label for s in signals])))


def train_prototypes(model, train_signals, val_signals, epochs: int = 10, lr: float = 1e-2, beta: float = 0.1,
                     batch_size: int = 32, seed: int = 0):
    """Learn one prototype per class through a frozen distance model.

    Returns ``(PrototypeSet, accuracy_curve)`` where entry 0 of the curve
    is the mean-initialized baseline.
    """
    rng = np.random.default_rng(seed)
    protos = init_prototypes(train_signals, rng)
    metric = model_metric(model)
    X = np.stack([s.values for s in train_signals]).astype(np.float32)
    if X.shape[1] != protos.prototypes.shape[1]:
        raise ValueError("prototype training needs equal-length signals")
    class_pos = {c: k for k, c in enumerate(protos.classes)}
    y = np.array([class_pos[s.label] for s in train_signals])
    store = ParamStore({"prototypes": protos.prototypes.astype(np.float64)})
    opt = AdamState(lr=lr)
    step = _proto_loss_siamese if model.kind == "siamese" else _proto_loss_direct
    curve = [prototype_accuracy(protos, metric, val_signals)]
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for s in range(0, len(X), batch_size):
            idx = order[s : s + batch_size]
            P = store["prototypes"].astype(np.float32)
            loss, gP = step(model, P, X[idx], y[idx], beta)
            adam_step(store, {"prototypes": np.asarray(gP, dtype=np.float64)}, opt)
            total += loss * len(idx)
        protos = PrototypeSet(store["prototypes"].astype(np.float32), protos.classes)
        losses.append(total / len(X))
        curve.append(prototype_accuracy(protos, metric, val_signals))
        log.info("prototype epoch %d loss=%.4f val_acc=%.3f", epoch + 1, losses[-1], curve[-1])
    return protos, curve


def report_dict(report) -> dict:
    return asdict(report)
