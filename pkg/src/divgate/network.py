"""Dual-branch conditional U-Net with shared decoder and time embedding.

Layout (channels ch_i = base_channels * channel_mults[i], L levels):

    stem (per modality):  conv3x3, 2 -> ch_0   (input is concat(x_t, cond))
    encoder level i:      blocks_per_level residual blocks at ch_i,
                          each pushing a skip; stride-2 conv ch_i -> ch_{i+1}
                          between levels
    bottleneck fusion:    cross-attention on (H/2^(L-1))^2 tokens (multi pass)
    mid:                  one shared residual block at ch_{L-1}
    decoder level i:      blocks_per_level residual blocks, each consuming
                          concat(h, skip) 2*ch_i -> ch_i; nearest-x2 + conv
                          ch_i -> ch_{i-1} between levels
    head:                 groupnorm -> SiLU -> conv3x3 ch_0 -> 1, zero-init

Residual block: GN -> SiLU -> conv3x3, add time projection, GN -> SiLU ->
conv3x3, plus a 1x1-projected shortcut when widths differ.

The two encoders are modality-specific; the mid block, decoder, head and
time MLP are shared between the uni-modal pass (vessel skips/bottleneck)
and the multi-modal pass (fused skips/bottleneck).  Parameter names are a
pure function of the config.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fusion import SkipFusion, UncertaintyFusion
from .layers import Conv2d, GroupNorm, Linear
from .tensor import ParamStore, ShapeMismatch, Tensor


@dataclass
class NetConfig:
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 2)
    blocks_per_level: int = 1
    time_embed_dim: int = 128
    groupnorm_groups: int = 8
    reduction_ratio: int = 4
    attention_dim: int = 64

    def validate(self):
        levels = len(self.channel_mults)
        if levels < 1:
            raise ValueError("channel_mults must be non-empty")
        for name in ("image_size", "base_channels", "blocks_per_level",
                     "time_embed_dim", "groupnorm_groups", "reduction_ratio", "attention_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.image_size % (1 << (levels - 1)):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{levels - 1}")
        for m in self.channel_mults:
            if (self.base_channels * m) % self.groupnorm_groups:
                raise ValueError(f"{self.groupnorm_groups} groupnorm groups do not divide width {self.base_channels * m}")
        return self

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def to_text(self) -> str:
        mults = ",".join(str(m) for m in self.channel_mults)
        lines = [f"image_size = {self.image_size}",
                 f"base_channels = {self.base_channels}",
                 f"channel_mults = {mults}",
                 f"blocks_per_level = {self.blocks_per_level}",
                 f"time_embed_dim = {self.time_embed_dim}",
                 f"groupnorm_groups = {self.groupnorm_groups}",
                 f"reduction_ratio = {self.reduction_ratio}",
                 f"attention_dim = {self.attention_dim}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetConfig":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        return cls(
            image_size=int(kv["image_size"]),
            base_channels=int(kv["base_channels"]),
            channel_mults=tuple(int(m) for m in kv["channel_mults"].split(",")),
            blocks_per_level=int(kv["blocks_per_level"]),
            time_embed_dim=int(kv["time_embed_dim"]),
            groupnorm_groups=int(kv["groupnorm_groups"]),
            reduction_ratio=int(kv["reduction_ratio"]),
            attention_dim=int(kv["attention_dim"]),
        ).validate()


@dataclass
class BranchOutputs:
    eps_u: Tensor              # uni-modal noise prediction, shape of x_t
    eps_m: Tensor              # multi-modal noise prediction, shape of x_t
    u_map: Tensor              # (N, 1, h, w) uncertainty at bottleneck resolution
    d: np.ndarray = field(default=None)  # per-sample divergence, mean of u_map

    def __post_init__(self):
        if self.d is None:
            self.d = self.u_map.data.mean(axis=(1, 2, 3))


def sinusoid_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos position code: even slots sin, odd slots cos."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    emb = np.empty((t.shape[0], dim), dtype=np.float32)
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb


class ResBlock:
    def __init__(self, store, name, cin, cout, cfg: NetConfig, rng):
        g = cfg.groupnorm_groups
        self.gn1 = GroupNorm(store, f"{name}.gn1", cin, g)
        self.conv1 = Conv2d(store, f"{name}.conv1", cin, cout, 3, rng)
        self.temb = Linear(store, f"{name}.temb", cfg.time_embed_dim, cout, rng)
        self.gn2 = GroupNorm(store, f"{name}.gn2", cout, g)
        self.conv2 = Conv2d(store, f"{name}.conv2", cout, cout, 3, rng)
        self.skip = Conv2d(store, f"{name}.skip", cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x, temb):
        n, cout = x.shape[0], self.conv1.w.shape[0]
        h = self.conv1(T.silu(self.gn1(x)))
        h = T.add(h, T.reshape(self.temb(temb), (n, cout, 1, 1)))
        h = self.conv2(T.silu(self.gn2(h)))
        return T.add(h, x if self.skip is None else self.skip(x))


class DualBranchNet:
    """Unified two-branch denoiser; see the module docstring for layout."""

    def __init__(self, cfg: NetConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        store, ch, ted = self.params, cfg.channels, cfg.time_embed_dim
        levels, blocks = len(ch), cfg.blocks_per_level

        self.time_fc1 = Linear(store, "time.fc1", ted, ted, rng)
        self.time_fc2 = Linear(store, "time.fc2", ted, ted, rng)

        self.stems, self.enc = {}, {}
        for m in ("v", "n"):
            self.stems[m] = Conv2d(store, f"enc_{m}.stem", 2, ch[0], 3, rng)
            blocks_m = []
            for i in range(levels):
                lvl = [ResBlock(store, f"enc_{m}.l{i}.b{b}", ch[i], ch[i], cfg, rng) for b in range(blocks)]
                down = None
                if i < levels - 1:
                    down = Conv2d(store, f"enc_{m}.down{i}", ch[i], ch[i + 1], 3, rng, stride=2)
                blocks_m.append((lvl, down))
            self.enc[m] = blocks_m

        self.skip_fusion = [[SkipFusion(store, f"fuse.l{i}.b{b}", ch[i], cfg.reduction_ratio, rng)
                             for b in range(blocks)] for i in range(levels)]
        self.bottleneck_fusion = UncertaintyFusion(store, "uafm", ch[-1], cfg.attention_dim, rng)

        self.mid = ResBlock(store, "mid", ch[-1], ch[-1], cfg, rng)

        self.dec, self.ups = [], {}
        for i in range(levels - 1, -1, -1):
            lvl = [ResBlock(store, f"dec.l{i}.b{b}", 2 * ch[i], ch[i], cfg, rng) for b in range(blocks)]
            self.dec.append((i, lvl))
            if i > 0:
                self.ups[i] = Conv2d(store, f"dec.up{i}", ch[i], ch[i - 1], 3, rng)

        self.head_gn = GroupNorm(store, "head.gn", ch[0], cfg.groupnorm_groups)
        self.head_conv = Conv2d(store, "head.conv", ch[0], 1, 3, rng, zero_init=True)

    # ---------------------------------------------------------------- passes

    def time_embed(self, t) -> Tensor:
        """Shared embedding of (original-chain) timestep indices, t >= 1."""
        if np.any(np.atleast_1d(t) < 1):
            raise ValueError(f"timestep must be >= 1, got {t}")
        base = Tensor(sinusoid_embedding(t, self.cfg.time_embed_dim), check=False)
        return self.time_fc2(T.silu(self.time_fc1(base)))

    def _encode(self, modality, x_t, y, temb):
        h = self.stems[modality](T.concat([x_t, y], axis=1))
        skips = []
        for lvl, down in self.enc[modality]:
            for block in lvl:
                h = block(h, temb)
                skips.append(h)
            if down is not None:
                h = down(h)
        return h, skips

    def _decode(self, h, skips, temb):
        h = self.mid(h, temb)
        blocks = self.cfg.blocks_per_level
        for i, lvl in self.dec:
            for b, block in enumerate(lvl):
                skip = skips[i * blocks + (blocks - 1 - b)]
                h = block(T.concat([h, skip], axis=1), temb)
            if i > 0:
                h = self.ups[i](T.upsample_nearest(h))
        return self.head_conv(T.silu(self.head_gn(h)))

    def _check_inputs(self, x_t, *conds):
        if x_t.data.ndim != 4:
            raise ShapeMismatch(f"expected NCHW input, got {tuple(x_t.shape)}")
        for c in conds:
            if c.shape != x_t.shape:
                raise ShapeMismatch(f"condition shape {tuple(c.shape)} != noisy input {tuple(x_t.shape)}")

    def forward_uni(self, x_t: Tensor, y_v: Tensor, t, train: bool = False,
                    update_stats: bool | None = None) -> Tensor:
        """Vessel-conditioned noise prediction; never touches nuclei weights."""
        self._check_inputs(x_t, y_v)
        temb = self.time_embed(t)
        bv, skips_v = self._encode("v", x_t, y_v, temb)
        return self._decode(bv, skips_v, temb)

    def forward_dual(self, x_t: Tensor, y_v: Tensor, y_n: Tensor, t,
                     train: bool = False, update_stats: bool | None = None) -> BranchOutputs:
        """Run both branches; the decoder weights are shared between passes."""
        self._check_inputs(x_t, y_v, y_n)
        temb = self.time_embed(t)
        bv, skips_v = self._encode("v", x_t, y_v, temb)
        bn_, skips_n = self._encode("n", x_t, y_n, temb)

        eps_u = self._decode(bv, skips_v, temb)

        fused_skips = []
        blocks = self.cfg.blocks_per_level
        for i in range(len(self.cfg.channels)):
            for b in range(blocks):
                k = i * blocks + b
                fused_skips.append(self.skip_fusion[i][b](skips_v[k], skips_n[k], train, update_stats))
        n, c, hb, wb = bv.shape
        tok_v = T.transpose(T.reshape(bv, (n, c, hb * wb)), (0, 2, 1))
        tok_n = T.transpose(T.reshape(bn_, (n, c, hb * wb)), (0, 2, 1))
        fused_tok, u = self.bottleneck_fusion(tok_v, tok_n)
        fused_b = T.reshape(T.transpose(fused_tok, (0, 2, 1)), (n, c, hb, wb))
        eps_m = self._decode(fused_b, fused_skips, temb)

        u_map = T.reshape(T.transpose(u, (0, 2, 1)), (n, 1, hb, wb))
        return BranchOutputs(eps_u=eps_u, eps_m=eps_m, u_map=u_map)


def build_network(cfg: NetConfig, seed: int) -> DualBranchNet:
    """Construct the denoiser; same (cfg, seed) gives bit-identical weights."""
    return DualBranchNet(cfg, seed)
