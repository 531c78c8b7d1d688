"""Central finite-difference checks of analytic gradients (float64)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-4,
                 indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_store(loss_fn: Callable[[ParamStore], Tensor], store: ParamStore, h: float = 1e-4,
                max_per_param: int | None = 40, seed: int = 0) -> dict[str, float]:
    """Relative error per parameter of ``loss_fn(store)``'s analytic gradient.

    ``store`` must be float64.  At most ``max_per_param`` entries of each
    parameter are perturbed (chosen with ``seed``); ``None`` checks all.
    """
    if store.dtype != np.float64:
        raise TypeError("gradient checks run in float64")
    store.zero_grad()
    loss = loss_fn(store)
    loss.backward()
    analytic = {k: v.copy() for k, v in store.grads().items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in store.params.items():
        n = t.data.size
        idx = None
        if max_per_param is not None and n > max_per_param:
            idx = np.sort(rng.choice(n, max_per_param, replace=False))
        num = numeric_grad(lambda: loss_fn(store).item(), t.data, h, idx)
        a = analytic[name]
        if idx is not None:
            errors[name] = relative_error(a.reshape(-1)[idx], num.reshape(-1)[idx])
        else:
            errors[name] = relative_error(a, num)
    return errors


def check_inputs(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-4,
                 seed: int = 0) -> list[float]:
    """Relative errors of d(sum(w * fn(*inputs)))/d(input) for a random probe w."""
    rng = np.random.default_rng(seed)
    xs = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    out = fn(*[Tensor(x) for x in xs])
    probe = rng.standard_normal(out.shape)

    def scalar(ts):
        from . import ops
        return ops.sum(ops.mul(fn(*ts), probe))

    ts = [Tensor(x, requires_grad=True) for x in xs]
    scalar(ts).backward()
    errs = []
    for i, t in enumerate(ts):
        num = numeric_grad(lambda: scalar([Tensor(x) for x in xs]).item(), xs[i], h)
        errs.append(relative_error(t.grad, num))
    return errs
