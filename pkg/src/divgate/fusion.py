"""Fusion blocks for the multi-modal branch.

Skip-level fusion gates each modality spatially, re-weights the channels of
the concatenated pair, and compresses back to one modality's width.  The
bottleneck is fused by cross-attention from vessel queries onto nuclei
keys/values, with a learned per-key uncertainty map attenuating the
attention logits; the spatial mean of that map is the divergence score the
branch selector consumes downstream.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv2d, Linear
from .tensor import ParamStore, ShapeMismatch, Tensor


class SpatialGate:
    """Single-channel sigmoid gate: conv -> BN -> ReLU -> conv -> BN -> sigmoid."""

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int, rng):
        hidden = max(1, channels // reduction)
        self.conv1 = Conv2d(store, f"{name}.conv1", channels, hidden, 3, rng, bias=False)
        self.bn1 = BatchNorm(store, f"{name}.bn1", hidden)
        self.conv2 = Conv2d(store, f"{name}.conv2", hidden, 1, 3, rng, bias=False)
        self.bn2 = BatchNorm(store, f"{name}.bn2", 1)

    def gate(self, x: Tensor, train: bool, update: bool | None = None) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), train, update))
        return T.sigmoid(self.bn2(self.conv2(h), train, update))

    def __call__(self, x: Tensor, train: bool = False, update: bool | None = None) -> Tensor:
        return T.mul(self.gate(x, train, update), x)


def spatial_attention(x: Tensor, gate: SpatialGate, train: bool = False) -> Tensor:
    """Gate (N,C,H,W) features with their own single-channel spatial map."""
    return gate(x, train)


class ChannelGate:
    """Squeeze-excitation over the channel axis, gates in (0,1)."""

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int, rng):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(store, f"{name}.fc1", channels, hidden, rng, bias=False)
        self.bn1 = BatchNorm(store, f"{name}.bn1", hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, channels, rng, bias=False)
        self.bn2 = BatchNorm(store, f"{name}.bn2", channels)

    def gate(self, x: Tensor, train: bool, update: bool | None = None) -> Tensor:
        pooled = T.global_avg_pool(x)
        h = T.relu(self.bn1(self.fc1(pooled), train, update))
        return T.sigmoid(self.bn2(self.fc2(h), train, update))

    def __call__(self, x: Tensor, train: bool = False, update: bool | None = None) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        return T.mul(x, T.reshape(self.gate(x, train, update), (n, c, 1, 1)))


def channel_attention(f: Tensor, gate: ChannelGate, train: bool = False) -> Tensor:
    """Re-weight each channel of (N,2C,H,W) by its squeeze-excitation gate."""
    return gate(f, train)


class SkipFusion:
    """Fuse a (vessel, nuclei) feature pair back to one modality's width."""

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int, rng):
        self.sa_v = SpatialGate(store, f"{name}.sa_v", channels, reduction, rng)
        self.sa_n = SpatialGate(store, f"{name}.sa_n", channels, reduction, rng)
        self.ca = ChannelGate(store, f"{name}.ca", 2 * channels, reduction, rng)
        self.compress = Conv2d(store, f"{name}.compress", 2 * channels, channels, 1, rng,
                               zero_init=True)
        # pass-through start: fused output = gated vessel + gated nuclei, so the
        # shared decoder sees in-distribution features before fusion has trained
        w = self.compress.w.data
        for c in range(channels):
            w[c, c, 0, 0] = 1.0
            w[c, channels + c, 0, 0] = 1.0

    def __call__(self, v: Tensor, n: Tensor, train: bool = False,
                 update: bool | None = None) -> Tensor:
        if v.shape != n.shape:
            raise ShapeMismatch(f"skip fusion: modality shapes {tuple(v.shape)} vs {tuple(n.shape)} differ")
        v_sp = T.mul(self.sa_v.gate(v, train, update), v)
        n_sp = T.mul(self.sa_n.gate(n, train, update), n)
        f_sp = T.concat([v_sp, n_sp], axis=1)
        f_se = self.ca(f_sp, train, update)
        return self.compress(f_se)


def uncertainty_cross_attention(q: Tensor, k: Tensor, v: Tensor, u: Tensor) -> Tensor:
    """softmax(Q K^T (1-U) / sqrt(d)) V with U in [0,1] scaling each key column.

    At U=0 this is plain cross-attention; at U=1 every logit vanishes and
    each output row is the mean of V's rows.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention: Q {tuple(q.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)} inconsistent")
    if u.shape[-2] != k.shape[-2] or u.shape[-1] != 1:
        raise ShapeMismatch(f"attention: U shape {tuple(u.shape)} does not index keys {tuple(k.shape)}")
    if np.any(u.data < 0.0) or np.any(u.data > 1.0):
        raise ValueError(f"uncertainty values outside [0,1]: range "
                         f"[{float(u.data.min()):.4g}, {float(u.data.max()):.4g}]")
    d = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)))
    keep = T.transpose(1.0 - u, tuple(range(u.data.ndim - 2)) + (u.data.ndim - 1, u.data.ndim - 2))
    attn = T.softmax(T.mul(scores, keep) / float(np.sqrt(d)), axis=-1)
    return T.matmul(attn, v)


class UncertaintyFusion:
    """Cross-attention bottleneck fusion emitting the uncertainty map.

    Queries come from the vessel tokens, keys/values and the uncertainty
    head from the nuclei tokens; the attended result is projected back and
    added residually to the vessel tokens.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, dim: int, rng):
        self.wq = store.add(f"{name}.wq", _proj(rng, channels, dim))
        self.wk = store.add(f"{name}.wk", _proj(rng, channels, dim))
        self.wv = store.add(f"{name}.wv", _proj(rng, channels, dim))
        # agnostic start: U = 0.5 everywhere (divergence sits on the gate
        # boundary) and the residual path passes the vessel tokens through
        self.wn = store.add(f"{name}.wn", np.zeros((channels, 1), np.float32))
        self.wo = store.add(f"{name}.wo", np.zeros((dim, channels), np.float32))

    def __call__(self, x_v: Tensor, x_n: Tensor) -> tuple[Tensor, Tensor]:
        """Tokens (..., HW, C) in, (fused tokens, U (..., HW, 1)) out."""
        if x_v.shape != x_n.shape:
            raise ShapeMismatch(f"bottleneck fusion: token shapes {tuple(x_v.shape)} vs {tuple(x_n.shape)} differ")
        u = T.sigmoid(T.matmul(x_n, self.wn))
        q = T.matmul(x_v, self.wq)
        k = T.matmul(x_n, self.wk)
        v = T.matmul(x_n, self.wv)
        attended = uncertainty_cross_attention(q, k, v, u)
        return T.add(T.matmul(attended, self.wo), x_v), u


def _proj(rng, cin, cout):
    return rng.uniform(-1.0 / np.sqrt(cin), 1.0 / np.sqrt(cin), size=(cin, cout)).astype(np.float32)
