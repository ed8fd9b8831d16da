"""Divergence-gated training loss and inference-time branch selection.

The divergence score d (mean uncertainty) drives one shared predicate,
``gate_multi``: samples with d <= gamma train and select the multi-modal
branch, everything else falls back to the uni-modal branch.  The feedback
loss is a binary cross entropy pushing d toward 0 when the multi-modal
branch actually predicted better and toward 1 otherwise, plus a quadratic
pull toward gamma for stability.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatch, Tensor

_D_CLAMP = 1e-6  # keeps the BCE logs finite at the poles


@dataclass(frozen=True)
class GateConfig:
    gamma: float = 0.5       # divergence threshold; 1.0 = always-inclusive gate
    alpha: float = 0.1       # regularizer weight in the feedback loss
    dfl_weight: float = 1e-4  # weight of the feedback loss in the total
    literal_dfl: bool = False  # keep the uncorrected feedback-loss sign

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0,1], got {self.gamma}")
        if self.alpha < 0 or self.dfl_weight < 0:
            raise ValueError("alpha and dfl_weight must be >= 0")


@dataclass
class LossBundle:
    l_u: float                 # batch-mean uni-branch loss
    l_m: float                 # batch-mean multi-branch loss (all samples)
    l_gated: float             # divergence-gated combination
    l_dfl: float               # feedback loss
    total: float               # l_gated + dfl_weight * l_dfl
    e: np.ndarray = field(repr=False)   # per-sample fusion indicator (0/1)
    d: np.ndarray = field(repr=False)   # per-sample divergence


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def divergence(u) -> float:
    """Mean of the uncertainty map."""
    arr = _data(u)
    if arr.size == 0:
        raise ValueError("divergence of an empty uncertainty map")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"uncertainty values outside [0,1]: range [{arr.min():.4g}, {arr.max():.4g}]")
    return float(arr.mean())


def gate_multi(d, gamma: float) -> np.ndarray:
    """The shared selection predicate: True where d <= gamma (float32 IEEE)."""
    return np.asarray(d, dtype=np.float32) <= np.float32(gamma)


def _per_sample_mse(eps: Tensor, pred: Tensor) -> Tensor:
    if eps.shape != pred.shape:
        raise ShapeMismatch(f"residual shapes differ: {tuple(eps.shape)} vs {tuple(pred.shape)}")
    diff = T.sub(eps, pred)
    axes = tuple(range(1, eps.data.ndim))
    return T.mean(T.mul(diff, diff), axis=axes)


def gated_loss(eps: Tensor, eps_u: Tensor, eps_m: Tensor, d, gamma: float) -> Tensor:
    """Pixel-mean squared noise residuals, multi branch gated per sample.

    Each sample always contributes its uni-branch term; the multi-branch
    term joins only where d <= gamma.  The gate itself is a constant with
    respect to differentiation.
    """
    lu = _per_sample_mse(eps, eps_u)
    lm = _per_sample_mse(eps, eps_m)
    mask = Tensor(gate_multi(d, gamma).astype(np.float32), check=False)
    if mask.shape != lu.shape:
        raise ShapeMismatch(f"divergence vector {tuple(mask.shape)} does not match batch {tuple(lu.shape)}")
    return T.mean(T.add(lu, T.mul(mask, lm)))


def fusion_indicator(eps, eps_u, eps_m) -> np.ndarray:
    """1 where the multi branch's per-sample L1 error is <= the uni branch's.

    Ties count as 1.  Computed on detached values.
    """
    e, pu, pm = _data(eps), _data(eps_u), _data(eps_m)
    if e.shape != pu.shape or e.shape != pm.shape:
        raise ShapeMismatch(f"residual shapes differ: {e.shape}, {pu.shape}, {pm.shape}")
    axes = tuple(range(1, e.ndim))
    l1_u = np.abs(e - pu).sum(axis=axes)
    l1_m = np.abs(e - pm).sum(axis=axes)
    return (l1_m <= l1_u).astype(np.float32)


def feedback_loss(d: Tensor, e, alpha: float, gamma: float, literal: bool = False) -> Tensor:
    """Per-sample BCE on the divergence with a (d - gamma)^2 regularizer.

    The sign-corrected form -[e log(1-d) + (1-e) log d] is the default: it
    pulls d toward 0 when the multi branch won (e=1) and toward 1 otherwise,
    which is what makes the selection rule consistent with the indicator.
    ``literal`` keeps the uncorrected printed sign for comparison runs.
    """
    if not isinstance(d, Tensor):
        d = Tensor(np.asarray(d, dtype=np.float32))
    e = Tensor(np.asarray(_data(e), dtype=d.data.dtype), check=False)
    if e.shape != d.shape:
        raise ShapeMismatch(f"indicator shape {tuple(e.shape)} != divergence shape {tuple(d.shape)}")
    dc = T.clip(d, _D_CLAMP, 1.0 - _D_CLAMP)
    bce = T.add(T.mul(e, T.log(1.0 - dc)), T.mul(1.0 - e, T.log(dc)))
    if not literal:
        bce = -bce
    reg = (dc - gamma) ** 2 * alpha
    return T.mean(T.add(bce, reg))


def total_loss(eps: Tensor, eps_u: Tensor, eps_m: Tensor, d: Tensor,
               cfg: GateConfig) -> tuple[Tensor, LossBundle]:
    """Assemble the full objective; returns (differentiable total, bundle)."""
    d_vals = _data(d).reshape(-1).astype(np.float32)
    e = fusion_indicator(eps, eps_u, eps_m)
    gated = gated_loss(eps, eps_u, eps_m, d_vals, cfg.gamma)
    dfl = feedback_loss(d, e, cfg.alpha, cfg.gamma, literal=cfg.literal_dfl)
    total = T.add(gated, T.mul(Tensor(np.float32(cfg.dfl_weight), check=False), dfl))
    bundle = LossBundle(
        l_u=float(T.mean(_per_sample_mse(eps, eps_u)).item()),
        l_m=float(T.mean(_per_sample_mse(eps, eps_m)).item()),
        l_gated=float(gated.item()),
        l_dfl=float(dfl.item()),
        total=float(total.item()),
        e=e,
        d=d_vals,
    )
    return total, bundle


def select_output(eps_u, eps_m, d, gamma: float):
    """Copy the selected branch per sample: multi where d <= gamma, else uni.

    No blending: every output row is a bitwise copy of exactly one input.
    """
    pu, pm = _data(eps_u), _data(eps_m)
    if pu.shape != pm.shape:
        raise ShapeMismatch(f"branch shapes differ: {pu.shape} vs {pm.shape}")
    mask = gate_multi(d, gamma).reshape((-1,) + (1,) * (pu.ndim - 1))
    out = np.where(mask, pm, pu)
    return Tensor(out, check=False) if isinstance(eps_u, Tensor) else out
