"""Training loop, ancestral sampler with branch selection, evaluation.

One learner thread, adaptive-moment updates (decay 0.9/0.999, denominator
eps 1e-8), global gradient-norm clip at 1.0, uniform timestep sampling.
Images move between [0,1] storage space and the [-1,1] diffusion space at
the trainer boundary.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import gate as G
from . import schedule as S
from . import serial
from . import tensor as T
from .data import SamplePair
from .metrics import MetricReport, psnr, ssim
from .network import BranchOutputs, DualBranchNet, NetConfig, build_network
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 150
    log_interval: int = 50
    ckpt_interval: int = 0      # 0: only write the final checkpoint
    gate: G.GateConfig = field(default_factory=G.GateConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("need steps >= 0, batch >= 1, lr > 0")
        if not (1 <= self.sample_steps <= self.timesteps):
            raise ValueError("sample_steps must be in 1..timesteps")

    def schedule(self) -> S.NoiseSchedule:
        return S.linear_schedule(self.timesteps, self.beta_start, self.beta_end)


class AdamOptimizer:
    """Adaptive-moment updates with bias correction."""

    def __init__(self, store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store, self.lr, self.beta1, self.beta2, self.eps = store, lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.trainable_items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.trainable_items()}

    def step(self, grad_clip: float = 0.0):
        params = self.store.trainable_items()
        if grad_clip > 0:
            total = np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for _, t in params))
            if total > grad_clip:
                scale = np.float32(grad_clip / total)
                for _, t in params:
                    t.grad = t.grad * scale
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.step_count
        corr2 = 1.0 - b2**self.step_count
        for n, t in params:
            self.m[n] = b1 * self.m[n] + (1 - b1) * t.grad
            self.v[n] = b2 * self.v[n] + (1 - b2) * t.grad * t.grad
            mhat = self.m[n] / corr1
            vhat = self.v[n] / corr2
            t.data = t.data - np.float32(self.lr) * mhat / (np.sqrt(vhat) + self.eps)


def _stack(samples: list[SamplePair], attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr).data for s in samples]).astype(np.float32)


def divergence_of(out: BranchOutputs) -> Tensor:
    """Differentiable per-sample divergence: spatial mean of the U map."""
    return T.mean(out.u_map, axis=(1, 2, 3))


def train_step(net: DualBranchNet, batch: list[SamplePair], sched: S.NoiseSchedule,
               cfg: TrainConfig, opt: AdamOptimizer, rng: np.random.Generator) -> G.LossBundle:
    """One optimization step over a batch; raises on a non-finite loss."""
    if not batch:
        raise ValueError("empty batch")
    x0 = S.to_signed(_stack(batch, "target"))
    y_v = Tensor(S.to_signed(_stack(batch, "vessel")), check=False)
    y_n = Tensor(S.to_signed(_stack(batch, "nuclei")), check=False)
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_t = Tensor(S.q_sample(x0, t, eps, sched), check=False)

    net.params.zero_grad()
    out = net.forward_dual(x_t, y_v, y_n, t, train=True)
    total, bundle = G.total_loss(Tensor(eps, check=False), out.eps_u, out.eps_m,
                                 divergence_of(out), cfg.gate)
    if not np.isfinite(bundle.total):
        raise TrainingDiverged(
            f"non-finite loss at optimizer step {opt.step_count + 1}: "
            f"l_u={bundle.l_u:.4g} l_m={bundle.l_m:.4g} l_dfl={bundle.l_dfl:.4g} t={t.tolist()}")
    total.backward()
    opt.step(cfg.grad_clip)
    return bundle


def log_line(step: int, b: G.LossBundle) -> str:
    return (f"step {step}, l_u {b.l_u:.5f}, l_m {b.l_m:.5f}, l_dfl {b.l_dfl:.5f}, "
            f"total {b.total:.5f}, mean_d {float(b.d.mean()):.4f}")


def train(net: DualBranchNet, samples: list[SamplePair], train_idx, cfg: TrainConfig,
          log=None, ckpt_dir=None) -> tuple[list[G.LossBundle], AdamOptimizer]:
    """Run cfg.steps optimization steps; returns (loss history, optimizer)."""
    sched = cfg.schedule()
    opt = AdamOptimizer(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    train_idx = np.asarray(train_idx)
    history = []
    for step in range(1, cfg.steps + 1):
        picks = rng.choice(train_idx, size=cfg.batch, replace=True)
        bundle = train_step(net, [samples[i] for i in picks], sched, cfg, opt, rng)
        history.append(bundle)
        if log is not None and (step % cfg.log_interval == 0 or step == 1):
            log(log_line(step, bundle))
        if ckpt_dir and cfg.ckpt_interval and step % cfg.ckpt_interval == 0:
            save_checkpoint(os.path.join(ckpt_dir, f"step{step:07d}.dpack"), net, opt, step)
    return history, opt


# ------------------------------------------------------------------ sampling

@dataclass
class SampleStats:
    mean_d: np.ndarray        # per-sample divergence averaged over reverse steps
    multi_fraction: np.ndarray  # per-sample fraction of steps selecting the multi branch


def sample(net: DualBranchNet, y_v, y_n, sched: S.NoiseSchedule, gate_cfg: G.GateConfig,
           rng: np.random.Generator, mode: str = "gated") -> tuple[np.ndarray, SampleStats]:
    """Ancestral sampling with per-step, per-sample branch selection.

    ``sched`` may be respaced; the network is conditioned on the original
    timestep indices it recorded.  Conditions are [0,1] images; the result
    is mapped back to [0,1].  mode: gated / uni / multi (forced branches).
    """
    if mode not in ("gated", "uni", "multi"):
        raise ValueError(f"unknown mode {mode!r}")
    yv_arr = y_v.data if isinstance(y_v, Tensor) else np.asarray(y_v, dtype=np.float32)
    yv = Tensor(S.to_signed(yv_arr), check=False)
    yn = None
    if mode != "uni":
        if y_n is None:
            raise ValueError(f"mode {mode!r} needs the nuclei condition")
        yn_arr = y_n.data if isinstance(y_n, Tensor) else np.asarray(y_n, dtype=np.float32)
        yn = Tensor(S.to_signed(yn_arr), check=False)
    n = yv.shape[0]
    x = rng.standard_normal(yv.shape).astype(np.float32)
    d_acc = np.zeros(n, dtype=np.float64)
    multi_acc = np.zeros(n, dtype=np.float64)
    with T.no_grad():
        for k in range(sched.T, 0, -1):
            t_orig = int(sched.original_indices[k - 1])
            x_t = Tensor(x, check=False)
            t_vec = np.full(n, t_orig)
            if mode == "uni":
                eps_o = net.forward_uni(x_t, yv, t_vec).data
            else:
                out = net.forward_dual(x_t, yv, yn, t_vec)
                d_acc += out.d
                if mode == "multi":
                    eps_o = out.eps_m.data
                else:
                    chosen = G.gate_multi(out.d, gate_cfg.gamma)
                    multi_acc += chosen
                    eps_o = G.select_output(out.eps_u.data, out.eps_m.data, out.d, gate_cfg.gamma)
            noise = rng.standard_normal(x.shape).astype(np.float32) if k > 1 else None
            x = S.p_step(x, k, eps_o, sched, noise)
    stats = SampleStats(mean_d=(d_acc / sched.T).astype(np.float32),
                        multi_fraction=(multi_acc / sched.T).astype(np.float32))
    return S.to_unit(x), stats


def evaluate(net: DualBranchNet, samples: list[SamplePair], idx, gate_cfg: G.GateConfig,
             sched: S.NoiseSchedule, sample_steps: int, mode: str = "gated",
             seed: int = 0, batch_size: int = 16) -> MetricReport:
    """Generate for each held-out sample and score against its target.

    Returns SSIM/PSNR plus, where the mode computes them, divergence stats
    split by the consistency flag and the majority-vote branch selection.
    """
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("empty evaluation set")
    sub = S.respace(sched, sample_steps)
    rng = np.random.default_rng(seed)
    ssim_vals, psnr_vals, mean_ds, multi_fracs = [], [], [], []
    for lo in range(0, idx.size, batch_size):
        chunk = [samples[i] for i in idx[lo:lo + batch_size]]
        y_v = _stack(chunk, "vessel")
        y_n = _stack(chunk, "nuclei") if mode != "uni" else None
        gen, stats = sample(net, y_v, y_n, sub, gate_cfg, rng, mode=mode)
        for j, s in enumerate(chunk):
            ssim_vals.append(ssim(gen[j], s.target))
            psnr_vals.append(psnr(gen[j], s.target))
        mean_ds.extend(stats.mean_d)
        multi_fracs.extend(stats.multi_fraction)
    flags = np.array([bool(samples[i].consistent) for i in idx])
    extras = {"mode": mode, "consistent_flags": flags}
    if mode != "uni":
        mean_ds = np.asarray(mean_ds, dtype=np.float64)
        extras["mean_d"] = mean_ds
        if flags.any():
            extras["mean_d_consistent"] = float(mean_ds[flags].mean())
        if (~flags).any():
            extras["mean_d_corrupted"] = float(mean_ds[~flags].mean())
    if mode == "gated":
        picked_multi = np.asarray(multi_fracs) > 0.5
        extras["multi_fraction"] = np.asarray(multi_fracs, dtype=np.float64)
        extras["selection_accuracy"] = float(np.mean(picked_multi == flags))
    return MetricReport.from_values(ssim_vals, psnr_vals, **extras)


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, net: DualBranchNet, opt: AdamOptimizer | None, step: int) -> None:
    """DPACK1 container + a NetConfig key=value sidecar at <path>.cfg."""
    arrays = {f"param.{n}": t.data for n, t in net.params.items()}
    if opt is not None:
        for n in opt.m:
            arrays[f"opt.m.{n}"] = opt.m[n]
            arrays[f"opt.v.{n}"] = opt.v[n]
    arrays["meta.step"] = np.array([step], dtype=np.float32)
    serial.write_pack(path, arrays)
    with open(str(path) + ".cfg", "w") as f:
        f.write(net.cfg.to_text())


def load_checkpoint(path, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                    adam_eps: float = 1e-8, seed: int = 0) -> tuple[DualBranchNet, AdamOptimizer, int]:
    """Rebuild the network (and optimizer moments, if stored) bit-exactly."""
    with open(str(path) + ".cfg") as f:
        cfg = NetConfig.from_text(f.read())
    arrays = serial.read_pack(path)
    net = build_network(cfg, seed=seed)
    net.params.load_arrays({n[len("param."):]: a for n, a in arrays.items() if n.startswith("param.")})
    opt = AdamOptimizer(net.params, lr, beta1, beta2, adam_eps)
    step = int(arrays["meta.step"][0])
    has_moments = any(n.startswith("opt.m.") for n in arrays)
    if has_moments:
        for n in opt.m:
            opt.m[n] = arrays[f"opt.m.{n}"].copy()
            opt.v[n] = arrays[f"opt.v.{n}"].copy()
        opt.step_count = step
    return net, opt, step
