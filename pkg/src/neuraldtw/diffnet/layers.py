"""Layer descriptors, parameter store, and the forward/backward sweeps.

Activations are batched: ``[batch, channels, length]`` for sequence layers
and ``[batch, features]`` after pooling. Each layer type has a forward that
returns ``(out, layer_cache)`` and a backward that maps the output gradient
to ``(input_grad, {param_name: grad})``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class StaleCache(RuntimeError):
    pass


@dataclass(frozen=True)
class Conv1d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1
    name: str = ""
    kind: str = field(default="conv1d", init=False)

    def param_shapes(self):
        return {"weight": (self.out_ch, self.in_ch, self.kernel), "bias": (self.out_ch,)}

    def out_length(self, L: int) -> int:
        span = self.dilation * (self.kernel - 1) + 1
        return (L + sum(self.padding) - span) // self.stride + 1


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    name: str = ""
    kind: str = field(default="batchnorm", init=False)

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def buffer_shapes(self):
        return {"running_mean": (self.channels,), "running_var": (self.channels,)}


@dataclass(frozen=True)
class ReLU:
    name: str = ""
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class GlobalMaxPool:
    name: str = ""
    kind: str = field(default="global_max_pool", init=False)


@dataclass(frozen=True)
class Dense:
    in_f: int
    out_f: int
    name: str = ""
    kind: str = field(default="dense", init=False)

    def param_shapes(self):
        return {"weight": (self.out_f, self.in_f), "bias": (self.out_f,)}


@dataclass(frozen=True)
class UpsampleNearest:
    """Nearest-neighbour resize along time; ``target_length=None`` means set at call time.

    A ``[batch, features]`` input is read as a one-channel sequence.
    """

    target_length: int | None = None
    name: str = ""
    kind: str = field(default="upsample_nearest", init=False)


@dataclass(frozen=True)
class ConcatChannels:
    name: str = ""
    kind: str = field(default="concat_channels", init=False)


LAYER_TYPES = {cls.__dataclass_fields__["kind"].default: cls
               for cls in (Conv1d, BatchNorm, ReLU, GlobalMaxPool, Dense, UpsampleNearest, ConcatChannels)}


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    min_length: int | None = None
    max_length: int | None = None

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = asdict(layer)
            if "padding" in d:
                d["padding"] = list(d["padding"])
            layers.append(d)
        return {"name": self.name, "layers": layers,
                "min_length": self.min_length, "max_length": self.max_length}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("kind")
            if "padding" in ld:
                ld["padding"] = tuple(ld["padding"])
            layers.append(LAYER_TYPES[kind](**ld))
        return cls(d["name"], tuple(layers), d.get("min_length"), d.get("max_length"))

    def pname(self, layer, key: str) -> str:
        return f"{self.name}.{layer.name}.{key}"

    def param_shapes(self) -> dict[str, tuple]:
        out = {}
        for layer in self.layers:
            if hasattr(layer, "param_shapes"):
                for k, shape in layer.param_shapes().items():
                    out[self.pname(layer, k)] = shape
        return out

    def buffer_shapes(self) -> dict[str, tuple]:
        out = {}
        for layer in self.layers:
            if hasattr(layer, "buffer_shapes"):
                for k, shape in layer.buffer_shapes().items():
                    out[self.pname(layer, k)] = shape
        return out


class ParamStore:
    """Named parameter arrays plus non-trained buffers (batch-norm running stats).

    ``version`` is bumped by every optimizer step so caches taken before an
    update can be detected.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None, trainable=None):
        self.arrays: dict[str, np.ndarray] = dict(arrays or {})
        self.trainable: set[str] = set(self.arrays if trainable is None else trainable)
        self.version = 0

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def merge(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore({**self.arrays, **other.arrays}, self.trainable | other.trainable)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v.copy() for k, v in self.arrays.items()}, self.trainable)
        out.version = self.version
        return out

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self.arrays.items()}, self.trainable)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Uniform fan-in initialization; BN starts as identity."""
    arrays = {}
    for layer in spec.layers:
        if isinstance(layer, Conv1d):
            fan_in = layer.in_ch * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            arrays[spec.pname(layer, "weight")] = rng.uniform(-bound, bound, layer.param_shapes()["weight"])
            arrays[spec.pname(layer, "bias")] = rng.uniform(-1, 1, layer.out_ch) / np.sqrt(fan_in)
        elif isinstance(layer, Dense):
            bound = 1.0 / np.sqrt(layer.in_f)
            arrays[spec.pname(layer, "weight")] = rng.uniform(-bound, bound, (layer.out_f, layer.in_f))
            arrays[spec.pname(layer, "bias")] = rng.uniform(-bound, bound, layer.out_f)
        elif isinstance(layer, BatchNorm):
            arrays[spec.pname(layer, "gamma")] = np.ones(layer.channels)
            arrays[spec.pname(layer, "beta")] = np.zeros(layer.channels)
    trainable = set(arrays)
    for name, shape in spec.buffer_shapes().items():
        arrays[name] = np.ones(shape) if name.endswith("running_var") else np.zeros(shape)
    return ParamStore({k: np.asarray(v, dtype=dtype) for k, v in arrays.items()}, trainable)


# -- per-layer kernels -------------------------------------------------------

def _windows(xp, layer: Conv1d, L_out: int):
    span = layer.dilation * (layer.kernel - 1) + 1
    win = sliding_window_view(xp, span, axis=2)[:, :, : (L_out - 1) * layer.stride + 1 : layer.stride, :: layer.dilation]
    B, C = xp.shape[:2]
    return win.transpose(0, 2, 1, 3).reshape(B * L_out, C * layer.kernel)


def _conv_fwd(spec, layer: Conv1d, params, x, mode):
    if x.ndim != 3 or x.shape[1] != layer.in_ch:
        raise ShapeError(f"{spec.name}.{layer.name}: expected [B, {layer.in_ch}, L] input, got {x.shape}")
    B, _, L = x.shape
    L_out = layer.out_length(L)
    if L_out < 1:
        raise ShapeError(f"{spec.name}.{layer.name}: input length {L} too short")
    pl, pr = layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr))) if pl or pr else x
    W = params[spec.pname(layer, "weight")]
    b = params[spec.pname(layer, "bias")]
    cols = _windows(xp, layer, L_out)
    out = cols @ W.reshape(layer.out_ch, -1).T + b
    # im2col buffer is kept for backward in train mode only
    return out.reshape(B, L_out, layer.out_ch).transpose(0, 2, 1), (xp, L, L_out, cols if mode == "train" else None)


def _conv_bwd(spec, layer: Conv1d, params, cache, g):
    xp, L, L_out, cols = cache
    B = g.shape[0]
    W = params[spec.pname(layer, "weight")]
    g2 = g.transpose(0, 2, 1).reshape(B * L_out, layer.out_ch)
    if cols is None:
        cols = _windows(xp, layer, L_out)
    dW = (cols.T @ g2).T.reshape(W.shape)
    db = g2.sum(axis=0)
    # [C*K, out] @ [B, out, L_out] lands directly in [B, C, K, L_out] order
    dcols = np.matmul(W.reshape(layer.out_ch, -1).T, g).reshape(B, layer.in_ch, layer.kernel, L_out)
    dxp = np.zeros(xp.shape, dtype=np.result_type(xp, g))
    stop = (L_out - 1) * layer.stride + 1
    for k in range(layer.kernel):
        s = k * layer.dilation
        dxp[:, :, s : s + stop : layer.stride] += dcols[:, :, k]
    pl = layer.padding[0]
    return dxp[:, :, pl : pl + L], {spec.pname(layer, "weight"): dW, spec.pname(layer, "bias"): db}


def _bn_axes(x):
    return (0, 2) if x.ndim == 3 else (0,)


def _bn_view(v, x):
    return v[None, :, None] if x.ndim == 3 else v[None, :]


def _bn_fwd(spec, layer: BatchNorm, params, x, mode):
    if x.shape[1] != layer.channels:
        raise ShapeError(f"{spec.name}.{layer.name}: expected {layer.channels} channels, got {x.shape[1]}")
    gamma = params[spec.pname(layer, "gamma")]
    beta = params[spec.pname(layer, "beta")]
    rm_name, rv_name = spec.pname(layer, "running_mean"), spec.pname(layer, "running_var")
    axes = _bn_axes(x)
    if mode == "train":
        n = x.size // x.shape[1]
        if n < 2:
            raise ShapeError(f"{spec.name}.{layer.name}: batch statistics need more than one value per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = layer.momentum
        rm, rv = params[rm_name], params[rv_name]
        rm[...] = (1 - m) * rm + m * mean
        rv[...] = (1 - m) * rv + m * var * (n / (n - 1))
    else:
        mean, var = params[rm_name], params[rv_name]
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - _bn_view(mean, x)) * _bn_view(inv_std, x)
    out = _bn_view(gamma, x) * xhat + _bn_view(beta, x)
    return out, (xhat, inv_std, mode)


def _bn_bwd(spec, layer: BatchNorm, params, cache, g):
    xhat, inv_std, mode = cache
    gamma = params[spec.pname(layer, "gamma")]
    axes = _bn_axes(g)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * _bn_view(gamma, g)
    if mode == "train":
        n = g.size // g.shape[1]
        dx = _bn_view(inv_std / n, g) * (
            n * dxhat - _bn_view(dxhat.sum(axis=axes), g) - xhat * _bn_view((dxhat * xhat).sum(axis=axes), g)
        )
    else:
        dx = dxhat * _bn_view(inv_std, g)
    return dx, {spec.pname(layer, "gamma"): dgamma, spec.pname(layer, "beta"): dbeta}


def _relu_fwd(spec, layer, params, x, mode):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(spec, layer, params, mask, g):
    return g * mask, {}


def _pool_fwd(spec, layer, params, x, mode):
    if x.ndim != 3:
        raise ShapeError(f"{spec.name}.{layer.name}: expected [B, C, L] input, got {x.shape}")
    idx = x.argmax(axis=2)
    return np.take_along_axis(x, idx[:, :, None], axis=2)[:, :, 0], (idx, x.shape)


def _pool_bwd(spec, layer, params, cache, g):
    idx, shape = cache
    dx = np.zeros(shape, dtype=g.dtype)
    np.put_along_axis(dx, idx[:, :, None], g[:, :, None], axis=2)
    return dx, {}


def _dense_fwd(spec, layer: Dense, params, x, mode):
    if x.ndim != 2 or x.shape[1] != layer.in_f:
        raise ShapeError(f"{spec.name}.{layer.name}: expected [B, {layer.in_f}] input, got {x.shape}")
    W = params[spec.pname(layer, "weight")]
    b = params[spec.pname(layer, "bias")]
    return x @ W.T + b, x


def _dense_bwd(spec, layer: Dense, params, x, g):
    W = params[spec.pname(layer, "weight")]
    return g @ W, {spec.pname(layer, "weight"): g.T @ x, spec.pname(layer, "bias"): g.sum(axis=0)}


def _upsample_index(H: int, T: int) -> np.ndarray:
    return (np.arange(T) * H) // T


def _up_fwd(spec, layer: UpsampleNearest, params, x, mode, target_length=None):
    T = layer.target_length if layer.target_length is not None else target_length
    if T is None:
        raise ShapeError(f"{spec.name}.{layer.name}: target length must be supplied")
    flat = x.ndim == 2
    x3 = x[:, None, :] if flat else x
    H = x3.shape[2]
    idx = _upsample_index(H, T)
    return x3[:, :, idx], (idx, x3.shape, flat)


def _up_bwd(spec, layer, params, cache, g):
    idx, shape, flat = cache
    dx = np.zeros(shape, dtype=g.dtype)
    uniq, starts = np.unique(idx, return_index=True)
    dx[:, :, uniq] = np.add.reduceat(g, starts, axis=2)
    return (dx[:, 0, :] if flat else dx), {}


def _concat_fwd(spec, layer, params, x, mode):
    parts = list(x)
    lengths = {p.shape[2] for p in parts}
    if len(lengths) != 1:
        raise ShapeError(f"{spec.name}.{layer.name}: inputs must share a length (pad first), got {sorted(lengths)}")
    return np.concatenate(parts, axis=1), [p.shape[1] for p in parts]


def _concat_bwd(spec, layer, params, widths, g):
    return tuple(np.split(g, np.cumsum(widths)[:-1], axis=1)), {}


_FWD = {"conv1d": _conv_fwd, "batchnorm": _bn_fwd, "relu": _relu_fwd, "global_max_pool": _pool_fwd,
        "dense": _dense_fwd, "upsample_nearest": _up_fwd, "concat_channels": _concat_fwd}
_BWD = {"conv1d": _conv_bwd, "batchnorm": _bn_bwd, "relu": _relu_bwd, "global_max_pool": _pool_bwd,
        "dense": _dense_bwd, "upsample_nearest": _up_bwd, "concat_channels": _concat_bwd}


def _input_length(x):
    if isinstance(x, (tuple, list)):
        return x[0].shape[-1]
    return x.shape[-1] if x.ndim == 3 else None


def forward(spec: NetworkSpec, params: ParamStore, x, mode: str = "infer", target_length: int | None = None):
    """Run ``spec`` on a batch. Returns ``(output, cache)``.

    ``mode='train'`` normalizes with batch statistics and updates the
    running averages; ``'infer'`` uses the running averages.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    L = _input_length(x)
    if L is not None:
        if spec.min_length is not None and L < spec.min_length:
            raise ShapeError(f"{spec.name}: input length {L} below admissible minimum {spec.min_length}")
        if spec.max_length is not None and L > spec.max_length:
            raise ShapeError(f"{spec.name}: input length {L} above admissible maximum {spec.max_length}")
    caches = []
    for layer in spec.layers:
        if layer.kind == "upsample_nearest":
            x, c = _up_fwd(spec, layer, params, x, mode, target_length)
        else:
            x, c = _FWD[layer.kind](spec, layer, params, x, mode)
        caches.append(c)
    return x, {"layers": caches, "version": params.version, "params": id(params), "mode": mode}


def backward(spec: NetworkSpec, params: ParamStore, cache, grad_out):
    """Reverse sweep. Returns ``(param_grads, input_grad)``."""
    if cache["params"] != id(params) or cache["version"] != params.version:
        raise StaleCache(f"{spec.name}: cache was produced with different or since-updated parameters")
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    for layer, c in zip(reversed(spec.layers), reversed(cache["layers"])):
        g, pg = _BWD[layer.kind](spec, layer, params, c, g)
        grads.update(pg)
    return grads, g
