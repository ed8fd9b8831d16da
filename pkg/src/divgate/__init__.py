"""Two-modality conditional denoising diffusion with divergence-gated fusion.

A dual-branch denoiser predicts the injected noise from a vessel condition
alone and from both conditions fused (spatial/channel gating on the skips,
uncertainty-attenuated cross-attention at the bottleneck).  The spatial
mean of the learned uncertainty map gates, per sample, which branch trains
and which branch's prediction each reverse step emits.
"""
from ._kernels import BACKEND as kernel_backend
from .gate import GateConfig
from .network import NetConfig, build_network
from .schedule import linear_schedule, p_step, q_sample, respace
from .tensor import ParamStore, Tensor

__version__ = "0.1.0"

__all__ = [
    "GateConfig",
    "NetConfig",
    "ParamStore",
    "Tensor",
    "build_network",
    "kernel_backend",
    "linear_schedule",
    "p_step",
    "q_sample",
    "respace",
    "__version__",
]
