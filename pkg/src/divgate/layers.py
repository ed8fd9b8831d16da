"""Parametered layers registered by name into a ParamStore.

Weights use fan-in scaled uniform init; construction order is fixed by the
caller, so a seeded generator makes the whole parameter set reproducible.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng, stride: int = 1, pad: int | None = None, bias: bool = True,
                 zero_init: bool = False):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        fan_in = cin * k * k
        w = np.zeros((cout, cin, k, k), np.float32) if zero_init else _uniform(rng, (cout, cin, k, k), fan_in)
        self.w = store.add(f"{name}.w", w)
        self.b = None
        if bias:
            b = np.zeros(cout, np.float32) if zero_init else _uniform(rng, (cout,), fan_in)
            self.b = store.add(f"{name}.b", b)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Linear:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, rng,
                 bias: bool = True):
        self.w = store.add(f"{name}.w", _uniform(rng, (cin, cout), cin))
        self.b = store.add(f"{name}.b", _uniform(rng, (cout,), cin)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y if self.b is None else T.add(y, self.b)


class GroupNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, groups: int):
        self.groups = groups
        self.g = store.add(f"{name}.g", np.ones(channels, np.float32))
        self.b = store.add(f"{name}.b", np.zeros(channels, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.g, self.b, self.groups)


class BatchNorm:
    """BatchNorm over the batch axis; running averages with momentum 0.1."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.g = store.add(f"{name}.g", np.ones(channels, np.float32))
        self.b = store.add(f"{name}.b", np.zeros(channels, np.float32))
        self.mean = store.add(f"{name}.mean", np.zeros(channels, np.float32), trainable=False)
        self.var = store.add(f"{name}.var", np.ones(channels, np.float32), trainable=False)

    def __call__(self, x: Tensor, train: bool, update: bool | None = None) -> Tensor:
        return T.batch_norm(x, self.g, self.b, self.mean, self.var, train, update)
