"""Named trainable parameters, initialization, and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> parameter tensor map with Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype).copy(), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self.params.items()}

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if np.shape(v) != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {np.shape(v)} vs {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.dtype).copy()

    def astype(self, dtype) -> "ParamStore":
        """Copy with values (and optimizer state) cast to ``dtype``."""
        out = ParamStore(dtype)
        for k, t in self.params.items():
            out.add(k, t.data)
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def freeze(self) -> dict[str, np.ndarray]:
        """Read-only snapshot of the current values."""
        snap = {}
        for k, t in self.params.items():
            a = t.data.copy()
            a.setflags(write=False)
            snap[k] = a
        return snap


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """U(-sqrt(1/fan_in), +sqrt(1/fan_in)); fan_in = product of all dims but the first."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv(store: ParamStore, rng, name: str, c_out: int, c_in: int, k: int | tuple[int, int],
             zero: bool = False) -> None:
    kh, kw = (k, k) if np.isscalar(k) else k
    shape = (c_out, c_in, kh, kw)
    store.add(f"{name}.w", np.zeros(shape) if zero else uniform_fan_in(rng, shape))
    store.add(f"{name}.b", np.zeros(c_out))


def add_fc(store: ParamStore, rng, name: str, d_out: int, d_in: int) -> None:
    store.add(f"{name}.w", uniform_fan_in(rng, (d_out, d_in)))
    store.add(f"{name}.b", np.zeros(d_out))


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, store: ParamStore, names=None) -> None:
        adam_step(store, self.lr, self.beta1, self.beta2, self.eps, names)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names=None) -> None:
    """One bias-corrected Adam update over ``names`` (default: all parameters)."""
    names = list(store.params) if names is None else list(names)
    missing = [k for k in names if store.params[k].grad is None]
    if missing:
        raise RuntimeError(f"adam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k in names:
        p = store.params[k]
        g = p.grad.astype(store.dtype, copy=False)
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(store.dtype)
        p.data = p.data - update
