"""Canned finite-difference audits over every differentiable building block.

Each case wires a tiny random instance (4x4 to 8x8 spatial sizes) into a
smooth scalar, registers the inputs as parameters too, and hands the whole
thing to grad_check.  ``run_audits`` merges per-case reports; the CLI's
gradcheck command and the acceptance suite both drive it.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .fusion import SkipFusion, UncertaintyFusion
from .gradcheck import GradReport, grad_check
from .layers import BatchNorm, Conv2d, GroupNorm, Linear
from .network import NetConfig, ResBlock
from .tensor import ParamStore, Tensor


def _store_with(rng, shapes, dtype):
    store = ParamStore()
    out = []
    for name, shape in shapes:
        t = store.add(name, rng.uniform(-1, 1, size=shape).astype(np.float32))
        if dtype is not np.float32:
            t.data = t.data.astype(dtype)
            t.grad = np.zeros_like(t.data)
        out.append(t)
    return store, out


def _sq_mean(x):
    return T.mean(T.mul(x, x))


def _cast_store(store: ParamStore, dtype):
    for _, t in store.items():
        t.data = t.data.astype(dtype)
        t.grad = np.zeros_like(t.data)
    return store


def _randomize(store: ParamStore, rng):
    # move zero-initialized weights off their degenerate point before auditing
    for name, t in store.trainable_items():
        t.data = rng.uniform(-0.5, 0.5, size=t.data.shape).astype(np.float32)


def _case_elementwise(rng, dtype):
    store, (a, b, c) = _store_with(rng, [("a", (3, 4)), ("b", (3, 4)), ("c", (1, 4))], dtype)

    def fn():
        y = T.add(T.mul(a, b), T.sub(a, c))           # broadcast add/mul/sub
        y = T.div(y, 2.0 + _sq_mean(b))
        return T.mean(T.add(T.mul(y, y), y * 0.5 + 0.1))  # scalar ops

    return store, fn


def _case_matmul(rng, dtype):
    store, (a, b, w) = _store_with(rng, [("a", (2, 5, 3)), ("b", (3, 4)), ("w", (2, 4, 3))], dtype)

    def fn():
        return _sq_mean(T.matmul(T.matmul(a, b), w))   # batched and plain

    return store, fn


def _case_conv(stride, pad):
    def build(rng, dtype):
        store, (x,) = _store_with(rng, [("x", (2, 3, 6, 6))], dtype)
        conv = Conv2d(store, "conv", 3, 4, 3, rng, stride=stride, pad=pad)
        _cast_store(store, dtype)

        def fn():
            return _sq_mean(conv(x))

        return store, fn

    return build


def _case_upsample_conv(rng, dtype):
    store, (x,) = _store_with(rng, [("x", (2, 3, 4, 4))], dtype)
    conv = Conv2d(store, "conv", 3, 2, 3, rng)
    _cast_store(store, dtype)

    def fn():
        return _sq_mean(conv(T.upsample_nearest(x)))

    return store, fn


def _case_pooling(rng, dtype):
    store, (x,) = _store_with(rng, [("x", (2, 3, 4, 4))], dtype)

    def fn():
        g = T.global_avg_pool(x)
        w = T.avg_pool(x, 2)
        return T.add(_sq_mean(g), _sq_mean(w))

    return store, fn


def _case_group_norm(rng, dtype):
    store, (x,) = _store_with(rng, [("x", (2, 4, 4, 4))], dtype)
    gn = GroupNorm(store, "gn", 4, 2)
    _cast_store(store, dtype)

    def fn():
        return _sq_mean(gn(x))

    return store, fn


def _case_batch_norm(train):
    def build(rng, dtype):
        store, (x,) = _store_with(rng, [("x", (4, 3, 4, 4))], dtype)
        bn = BatchNorm(store, "bn", 3)
        _cast_store(store, dtype)
        if not train:
            bn.mean.data = rng.uniform(-0.5, 0.5, 3).astype(dtype)
            bn.var.data = rng.uniform(0.5, 1.5, 3).astype(dtype)

        def fn():
            return _sq_mean(bn(x, train=train, update=False))

        return store, fn

    return build


def _case_activations(rng, dtype):
    store, (x,) = _store_with(rng, [("x", (3, 5))], dtype)

    def fn():
        y = T.add(T.sigmoid(x), T.silu(x))
        return T.mean(T.add(y, T.relu(x)))

    return store, fn


def _case_softmax(rng, dtype):
    store, (x,) = _store_with(rng, [("x", (3, 4, 5))], dtype)

    def fn():
        y = T.softmax(x, axis=-1)
        z = T.softmax(x, axis=1)
        return T.mean(T.add(T.mul(y, y), T.mul(z, z)))

    return store, fn


def _case_movement(rng, dtype):
    store, (a, b) = _store_with(rng, [("a", (2, 3, 4)), ("b", (2, 2, 4))], dtype)

    def fn():
        c = T.concat([a, b], axis=1)
        parts = T.split(c, [3, 2], axis=1)
        r = T.reshape(parts[0], (2, 12))
        t = T.transpose(parts[1], (1, 0, 2))
        return T.add(T.mean(T.mul(r, r)), T.sum_(T.mul(t, t)) * 0.1)

    return store, fn


def _case_distances(rng, dtype):
    store, (a, b) = _store_with(rng, [("a", (3, 4)), ("b", (3, 4))], dtype)

    def fn():
        return T.add(T.l1_distance(a, b) * 0.1, T.l2_distance(a, b) * 0.1)

    return store, fn


def _case_skip_fusion(rng, dtype):
    store, (v, n) = _store_with(rng, [("v", (2, 8, 4, 4)), ("n", (2, 8, 4, 4))], dtype)
    block = SkipFusion(store, "fuse", 8, 4, rng)
    _randomize(store, rng)
    _cast_store(store, dtype)

    def fn():
        return _sq_mean(block(v, n, train=True, update=False))

    return store, fn


def _case_bottleneck_fusion(rng, dtype):
    store, (v, n) = _store_with(rng, [("v", (2, 16, 8)), ("n", (2, 16, 8))], dtype)
    block = UncertaintyFusion(store, "uafm", 8, 8, rng)
    _randomize(store, rng)
    _cast_store(store, dtype)

    def fn():
        fused, u = block(v, n)
        return T.add(_sq_mean(fused), T.mean(u) * 0.1)

    return store, fn


def _case_resblock(rng, dtype):
    cfg = NetConfig(image_size=8, base_channels=8, channel_mults=(1,), blocks_per_level=1,
                    time_embed_dim=8, groupnorm_groups=4, reduction_ratio=4, attention_dim=8)
    store = ParamStore()
    x = store.add("x", rng.uniform(-1, 1, (2, 8, 4, 4)).astype(np.float32))
    temb = store.add("temb", rng.uniform(-1, 1, (2, 8)).astype(np.float32))
    block = ResBlock(store, "res", 8, 12, cfg, rng)
    _cast_store(store, dtype)

    def fn():
        return _sq_mean(block(x, temb))

    return store, fn


CASES = [
    ("elementwise", _case_elementwise),
    ("matmul", _case_matmul),
    ("conv_s1p1", _case_conv(1, 1)),
    ("conv_s2p1", _case_conv(2, 1)),
    ("upsample_conv", _case_upsample_conv),
    ("pooling", _case_pooling),
    ("group_norm", _case_group_norm),
    ("batch_norm_train", _case_batch_norm(True)),
    ("batch_norm_eval", _case_batch_norm(False)),
    ("activations", _case_activations),
    ("softmax", _case_softmax),
    ("movement", _case_movement),
    ("distances", _case_distances),
    ("skip_fusion", _case_skip_fusion),
    ("bottleneck_fusion", _case_bottleneck_fusion),
    ("resblock", _case_resblock),
]


def run_audits(seed: int = 0, tolerance: float = 1e-3, dtype=np.float32,
               epsilon: float = 1e-6, cases=None) -> GradReport:
    """Audit every case; per-parameter errors are keyed case.param.

    Auditing the float32 graph evaluates the difference quotients on a
    float64 twin of each case (same seed, values synced by grad_check), so
    the comparison measures the 32-bit gradients rather than FD noise.
    """
    merged = GradReport(tolerance=tolerance)
    for name, build in CASES:
        if cases is not None and name not in cases:
            continue
        store, fn = build(np.random.default_rng(seed), dtype)
        reference = None
        if dtype is not np.float64:
            ref_store, ref_fn = build(np.random.default_rng(seed), np.float64)
            reference = (ref_fn, ref_store)
        rep = grad_check(fn, store, epsilon=epsilon, tolerance=tolerance,
                         reference=reference)
        for p in rep.errors:
            merged.errors[f"{name}.{p}"] = rep.errors[p]
            merged.suspect[f"{name}.{p}"] = rep.suspect[p]
            merged.checked[f"{name}.{p}"] = rep.checked[p]
    return merged
