"""Noise schedules, forward noising, reverse steps, timestep respacing.

Tables are kept in float64 (they are tiny and the product identities are
checked to 1e-7); coefficients are cast to the data dtype at use.
Timesteps are 1-based: t runs over 1..T and indexes betas[t-1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray             # beta_t, length T
    alphas: np.ndarray            # 1 - beta_t
    alpha_bars: np.ndarray        # prod_{s<=t} alpha_s
    original_indices: np.ndarray  # original 1-based timestep per position

    @property
    def T(self) -> int:
        return len(self.betas)

    def __post_init__(self):
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly in (0,1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated betas, inclusive of both endpoints."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
        original_indices=np.arange(1, T + 1),
    )


def respace(sched: NoiseSchedule, n_steps: int) -> NoiseSchedule:
    """Keep ~evenly spaced timesteps (always including the last).

    Effective betas are recomputed from ratios of the kept alpha_bars so the
    sub-chain marginals equal the original ones at the kept indices; the
    kept alpha_bars themselves are copied bit-for-bit.
    """
    if not (1 <= n_steps <= sched.T):
        raise ValueError(f"n_steps must be in 1..{sched.T}, got {n_steps}")
    if n_steps == 1:
        kept = np.array([sched.T - 1])
    else:
        kept = np.round(np.linspace(0, sched.T - 1, n_steps)).astype(np.int64)
    bars = sched.alpha_bars[kept]
    prev = np.concatenate([[1.0], bars[:-1]])
    betas = 1.0 - bars / prev
    return NoiseSchedule(
        betas=betas,
        alphas=1.0 - betas,
        alpha_bars=bars,
        original_indices=sched.original_indices[kept],
    )


def _data_of(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _gather(table: np.ndarray, t, ndim):
    """Table value(s) at 1-based step t, broadcastable over an ndim array.

    Stays float64; callers cast the final result so coefficients like
    1 - alpha_bar survive even when they underflow float32.
    """
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > len(table)):
        raise IndexError(f"timestep {t} outside 1..{len(table)}")
    vals = table[t - 1]
    if t.ndim == 0:
        return vals
    return vals.reshape(t.shape + (1,) * (ndim - 1))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Noised sample sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps.

    ``t`` may be a scalar or a per-sample array matching the batch axis.
    """
    x0d, epsd = _data_of(x0), _data_of(eps)
    if x0d.shape != epsd.shape:
        raise ValueError(f"x0 shape {x0d.shape} != eps shape {epsd.shape}")
    bar = _gather(sched.alpha_bars, t, x0d.ndim)
    out = np.sqrt(bar) * x0d + np.sqrt(1.0 - bar) * epsd
    return out.astype(x0d.dtype)


def p_step(x_t, t, eps_hat, sched: NoiseSchedule, noise=None):
    """One ancestral reverse step with fixed variance beta_t.

    Returns mu + sqrt(beta_t) * noise where
    mu = (x_t - beta_t / sqrt(1 - a_bar_t) * eps_hat) / sqrt(alpha_t);
    the noise term is suppressed at t = 1.
    """
    xd, ed = _data_of(x_t), _data_of(eps_hat)
    if xd.shape != ed.shape:
        raise ValueError(f"x_t shape {xd.shape} != eps_hat shape {ed.shape}")
    beta = _gather(sched.betas, t, xd.ndim)
    alpha = _gather(sched.alphas, t, xd.ndim)
    bar = _gather(sched.alpha_bars, t, xd.ndim)
    mu = (xd - beta / np.sqrt(1.0 - bar) * ed) / np.sqrt(alpha)
    t_arr = np.asarray(t)
    if noise is None or np.all(t_arr == 1):
        return mu.astype(xd.dtype)
    nd = _data_of(noise)
    keep = (t_arr != 1).astype(xd.dtype)
    keep = keep.reshape(t_arr.shape + (1,) * (xd.ndim - 1)) if t_arr.ndim else keep
    return (mu + np.sqrt(beta) * keep * nd).astype(xd.dtype)


def to_signed(img01):
    """Map a [0,1] image into the [-1,1] diffusion space."""
    return 2.0 * _data_of(img01) - 1.0


def to_unit(img_signed):
    """Map back from [-1,1] to [0,1], clipping the overshoot."""
    return np.clip((_data_of(img_signed) + 1.0) / 2.0, 0.0, 1.0)
