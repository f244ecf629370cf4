"""Central finite-difference checks for the reverse sweep."""

from __future__ import annotations

import numpy as np

from .layers import NetworkSpec, ParamStore, backward, forward


def rel_error(a, b, floor: float = 1e-6) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps identically-zero gradients (a bias feeding batch norm)
    from turning finite-difference round-off into a spurious failure.
    """
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _pattern(spec: NetworkSpec, cache) -> list[np.ndarray]:
    """Activation pattern: ReLU masks and max-pool winners."""
    out = []
    for layer, c in zip(spec.layers, cache["layers"]):
        if layer.kind == "relu":
            out.append(c)
        elif layer.kind == "global_max_pool":
            out.append(c[0])
    return out


def check_network(spec: NetworkSpec, params: ParamStore, x, rng: np.random.Generator, mode: str = "train",
                  target_length: int | None = None, step: float = 1e-4, max_entries: int = 12) -> dict[str, float]:
    """Compare analytic and numeric gradients of a random projection of the output.

    Checks up to ``max_entries`` sampled entries of every trainable array and
    of the input. An entry whose +/- step perturbation changes a ReLU mask or
    a max-pool winner sits on a kink where differences are meaningless; it is
    replaced by another entry. Returns the relative error per name
    (``"<input0>"``, ... for the inputs).
    """
    out, cache = forward(spec, params, x, mode, target_length)
    base = _pattern(spec, cache)
    proj = rng.normal(size=out.shape)
    grads, dx = backward(spec, params, cache, proj)

    def evaluate():
        y, c = forward(spec, params, x, mode, target_length)
        smooth = all(np.array_equal(a, b) for a, b in zip(base, _pattern(spec, c)))
        return float((y * proj).sum()), smooth

    def sample(arr, analytic):
        flat = arr.reshape(-1)
        num, ana = [], []
        for k in rng.permutation(arr.size):
            if len(num) == max_entries:
                break
            orig = flat[k]
            flat[k] = orig + step
            up, ok_up = evaluate()
            flat[k] = orig - step
            down, ok_down = evaluate()
            flat[k] = orig
            if ok_up and ok_down:
                num.append((up - down) / (2 * step))
                ana.append(analytic.reshape(-1)[k])
        return rel_error(np.array(num), np.array(ana))

    errors = {name: sample(params[name], grads[name]) for name in sorted(params.trainable)}
    inputs = list(x) if isinstance(x, (tuple, list)) else [x]
    dxs = list(dx) if isinstance(dx, (tuple, list)) else [dx]
    for k, (xi, gi) in enumerate(zip(inputs, dxs)):
        errors[f"<input{k}>"] = sample(xi, gi)
    return errors
