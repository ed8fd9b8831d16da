"""Finite-difference audit of reverse-mode gradients.

Central differences (f(p+eps) - f(p-eps)) / 2eps are compared against the
accumulated analytic gradients, parameter element by parameter element.
When a float32 graph is audited, the difference quotients are evaluated on
a mirrored float64 graph holding bit-identical parameter values (the
64-bit evaluation path exists for exactly this); a float64 graph is
audited against itself.  Elements sitting on a kink (detected through the
second difference) are flagged as suspect and excluded from the pass/fail
comparison instead of producing a spurious failure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParamStore


@dataclass
class GradReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)      # per-parameter max relative error
    suspect: dict[str, int] = field(default_factory=dict)       # non-smooth elements skipped
    checked: dict[str, int] = field(default_factory=dict)       # elements actually compared

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name in sorted(self.errors):
            flag = "ok" if self.errors[name] <= self.tolerance else "FAIL"
            note = f" ({self.suspect[name]} non-smooth skipped)" if self.suspect.get(name) else ""
            out.append(f"{name}: max rel err {self.errors[name]:.3e} [{flag}]{note}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"gradient audit: {verdict} (max {self.max_error:.3e}, tolerance {self.tolerance:.1e})")
        return out


def _rel_err(fd: float, ad: float, floor: float) -> float:
    m = max(abs(fd), abs(ad))
    if m < floor:
        return 0.0
    return abs(fd - ad) / m


def grad_check(subgraph, point: ParamStore, epsilon: float = 1e-6,
               tolerance: float = 1e-3, samples_per_param: int | None = None,
               floor: float = 1e-4, curvature_tol: float = 0.5,
               rng: np.random.Generator | None = None,
               reference: tuple | None = None) -> GradReport:
    """Audit d(subgraph)/d(point) for every trainable parameter.

    ``subgraph`` is a zero-argument callable evaluating to a scalar Tensor;
    it must read parameter values from ``point`` so perturbations are seen.
    ``reference`` optionally supplies a (subgraph, point) pair with the
    same parameter names used for the difference quotients; its values are
    overwritten with ``point``'s before evaluating.  ``samples_per_param``
    caps the audited elements per parameter (all by default).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    point.zero_grad()
    out = subgraph()
    if out.data.size != 1:
        raise ValueError(f"subgraph must evaluate to a scalar, got shape {tuple(out.shape)}")
    out.backward()
    analytic = {n: t.grad.copy() for n, t in point.trainable_items()}

    if reference is None:
        fd_fn, fd_point = subgraph, point
    else:
        fd_fn, fd_point = reference
        for name, t in point.items():
            ref_t = fd_point[name]
            ref_t.data = t.data.astype(ref_t.data.dtype)
    f0 = float(fd_fn().data.reshape(()))

    if rng is None:
        rng = np.random.default_rng(0)
    report = GradReport(tolerance=tolerance)
    for name, t in point.trainable_items():
        flat = fd_point[name].data.reshape(-1)
        n = flat.size
        if samples_per_param is not None and samples_per_param < n:
            idx = rng.choice(n, size=samples_per_param, replace=False)
        else:
            idx = range(n)
        worst, nsus, nchk = 0.0, 0, 0
        ad_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(fd_fn().data.reshape(()))
            flat[i] = orig - epsilon
            f_minus = float(fd_fn().data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                worst = np.inf
                nchk += 1
                continue
            if abs(f_plus + f_minus - 2.0 * f0) / epsilon > curvature_tol:
                nsus += 1
                continue
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            worst = max(worst, _rel_err(fd, float(ad_flat[i]), floor))
            nchk += 1
        report.errors[name] = worst
        report.suspect[name] = nsus
        report.checked[name] = nchk
    return report
