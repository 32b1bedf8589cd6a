"""Adam with bias correction, the training-rate schedule, and the
finite-difference gradient checker that verifies the tape."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .errors import GradCheckError


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over ``params``; gradients are zeroed afterwards."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.moment1 = beta1 * p.moment1 + (1.0 - beta1) * g
        p.moment2 = beta2 * p.moment2 + (1.0 - beta2) * (g * g)
        m_hat = p.moment1 / (1.0 - beta1**t)
        v_hat = p.moment2 / (1.0 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        p.zero_grad()


def exponential_lr(step, total_steps, lr_init=1e-3, lr_final=5e-5):
    """Exponential decay from lr_init to exactly lr_final at total_steps."""
    if total_steps <= 0:
        return lr_final
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_init * (lr_final / lr_init) ** frac


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error of tape vs central differences."""

    per_param: dict = field(default_factory=dict)
    tol: float = 1e-6
    h: float = 1e-5
    checked_entries: int = 0

    @property
    def max_rel_err(self):
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} "
                f"entries={self.checked_entries}")


def _rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f, params, h=1e-5, tol=1e-6, max_entries_per_param=None, rng=None,
               rel_floor=1e-4):
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` is a zero-argument closure over ``params`` returning a scalar
    Tensor; it must be deterministic (two plain evaluations are compared
    bit-for-bit first, and a mismatch invalidates the check).  For large
    parameters a random subset of ``max_entries_per_param`` entries is
    probed; ``None`` checks every entry.

    ``rel_floor`` bounds the relative-error denominator from below: with
    step h the central difference carries ~eps*|f|/h of rounding noise
    (~1e-10 here), so gradients smaller than the floor are compared against
    the floor instead of each other.
    """
    l1 = f().item()
    l2 = f().item()
    if l1 != l2:
        raise GradCheckError(f"f is not deterministic: {l1!r} != {l2!r}")

    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    saved = [np.array(p.grad, copy=True) for p in params]
    for p in params:
        p.grad[...] = 0.0
    with Tape() as tape:
        loss = f()
        backward(loss, tape)
    analytic = [np.array(p.grad, copy=True) for p in params]
    for p, s in zip(params, saved):
        p.grad[...] = s

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tol=tol, h=h)
    for pi, (p, g) in enumerate(zip(params, analytic)):
        n = p.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(g.reshape(-1)[i], fd, rel_floor))
            report.checked_entries += 1
        report.per_param[getattr(p, "name", f"tensor{pi}")] = worst
    return report
