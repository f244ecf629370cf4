"""Trained-model wrappers that turn parameter stores into pair distances."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .diffnet import (Checkpoint, NetworkSpec, ParamStore, ShapeError, build_decoder, build_direct,
                      build_encoder, forward, init_params)


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float32).ravel()


def pad_batch(arrays, length: int | None = None) -> np.ndarray:
    """Right-pad 1-D arrays with zeros into a ``[B, 1, length]`` batch."""
    arrays = [_values(a) for a in arrays]
    L = max(len(a) for a in arrays) if length is None else length
    out = np.zeros((len(arrays), 1, L), dtype=np.float32)
    for k, a in enumerate(arrays):
        if len(a) > L:
            raise ShapeError(f"signal of length {len(a)} does not fit pad length {L}")
        out[k, 0, : len(a)] = a
    return out


def siamese_distance(encoder: NetworkSpec, params: ParamStore, x, y) -> float:
    """Euclidean distance between the two embeddings (inference mode)."""
    x, y = _values(x), _values(y)
    if len(x) == len(y):
        z, _ = forward(encoder, params, np.stack([x, y])[:, None, :], "infer")
        zx, zy = z[:1], z[1:]
    else:
        zx, _ = forward(encoder, params, x[None, None, :], "infer")
        zy, _ = forward(encoder, params, y[None, None, :], "infer")
    return float(np.linalg.norm((zx[0] - zy[0]).astype(np.float64)))


class SiameseModel:
    kind = "siamese"

    def __init__(self, encoder: NetworkSpec, decoder: NetworkSpec, params: ParamStore):
        self.encoder, self.decoder, self.params = encoder, decoder, params

    @classmethod
    def create(cls, H: int, rng: np.random.Generator, dtype=np.float32) -> "SiameseModel":
        enc, dec = build_encoder(H), build_decoder(H)
        return cls(enc, dec, init_params(enc, rng, dtype).merge(init_params(dec, rng, dtype)))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SiameseModel":
        return cls(ckpt.specs["encoder"], ckpt.specs["decoder"], ckpt.params)

    @property
    def specs(self):
        return {"encoder": self.encoder, "decoder": self.decoder}

    def embed(self, signals, batch_size: int = 256) -> np.ndarray:
        """Embeddings for a list of signals; equal-length signals share a batch."""
        arrays = [_values(s) for s in signals]
        by_len = defaultdict(list)
        for k, a in enumerate(arrays):
            by_len[len(a)].append(k)
        H = self.encoder.layers[-1].out_f
        out = np.empty((len(arrays), H))
        for _, idx in sorted(by_len.items()):
            for s in range(0, len(idx), batch_size):
                chunk = idx[s : s + batch_size]
                batch = np.stack([arrays[k] for k in chunk])[:, None, :]
                z, _ = forward(self.encoder, self.params, batch, "infer")
                out[chunk] = z
        return out

    def distance(self, x, y) -> float:
        return siamese_distance(self.encoder, self.params, x, y)

    def pairwise(self, signals) -> np.ndarray:
        return squareform(pdist(self.embed(signals)))

    def cross(self, queries, refs) -> np.ndarray:
        return cdist(self.embed(queries), self.embed(refs))


class DirectModel:
    kind = "direct"

    def __init__(self, spec: NetworkSpec, params: ParamStore, symmetrize: bool = False):
        self.spec, self.params, self.symmetrize = spec, params, symmetrize

    @classmethod
    def create(cls, H: int, rng: np.random.Generator, dtype=np.float32, symmetrize: bool = False):
        spec = build_direct(H)
        return cls(spec, init_params(spec, rng, dtype), symmetrize)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DirectModel":
        return cls(ckpt.specs["direct"], ckpt.params, bool(ckpt.config.get("symmetrize", False)))

    @property
    def specs(self):
        return {"direct": self.spec}

    def predict(self, xs, ys, pad_to: int | None = None, batch_size: int = 512) -> np.ndarray:
        """Scalar prediction per (x, y) pair; all pairs padded to one length."""
        if len(xs) != len(ys):
            raise ValueError("xs and ys must pair up")
        if pad_to is None:
            pad_to = max(max(len(_values(a)) for a in xs), max(len(_values(b)) for b in ys))
        out = np.empty(len(xs))
        for s in range(0, len(xs), batch_size):
            a = pad_batch(xs[s : s + batch_size], pad_to)
            b = pad_batch(ys[s : s + batch_size], pad_to)
            y, _ = forward(self.spec, self.params, (a, b), "infer")
            if self.symmetrize:
                y2, _ = forward(self.spec, self.params, (b, a), "infer")
                y = 0.5 * (y + y2)
            out[s : s + batch_size] = y[:, 0]
        return out

    def distance(self, x, y) -> float:
        return float(self.predict([x], [y])[0])

    def pairwise(self, signals) -> np.ndarray:
        n = len(signals)
        ii, jj = np.nonzero(~np.eye(n, dtype=bool))
        L = max(len(_values(s)) for s in signals)
        vals = self.predict([signals[i] for i in ii], [signals[j] for j in jj], pad_to=L)
        d = np.zeros((n, n))
        d[ii, jj] = vals
        return d

    def cross(self, queries, refs) -> np.ndarray:
        nq, nr = len(queries), len(refs)
        ii, jj = np.divmod(np.arange(nq * nr), nr)
        L = max(len(_values(s)) for s in list(queries) + list(refs))
        vals = self.predict([queries[i] for i in ii], [refs[j] for j in jj], pad_to=L)
        return vals.reshape(nq, nr)


def model_from_checkpoint(ckpt: Checkpoint):
    return SiameseModel.from_checkpoint(ckpt) if ckpt.kind == "siamese" else DirectModel.from_checkpoint(ckpt)
