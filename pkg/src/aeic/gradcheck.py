"""Finite-difference check of autodiff gradients (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class GradCheckResult:
    max_rel_error: float
    tolerance: float
    worst: str  # "param[index]" of the largest error
    checked: int
    skipped: int  # entries whose probe crossed a kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __float__(self) -> float:
        return self.max_rel_error


_EPS = float(np.finfo(np.float64).eps)
_ULPS = 16


def grad_check(builder, tolerance: float = 1e-4, max_params: int = 10_000) -> GradCheckResult:
    """Compare backward() against finite differences.

    ``builder()`` returns ``(params, loss_fn)``: an iterable of (name, Tensor)
    leaves and a zero-argument callable producing the scalar loss.  Leaves are
    cast to float64.  Straight-through rounding has no derivative to check, so
    builders should route around it (the codec's ``smooth`` mode does exactly
    that).

    Error per entry is (|g_ad - g_fd| - r) / max(|g_ad|, |g_fd|, 1e-8) with step
    h = 1e-4 * (1 + |theta|), where r = 16 eps sum|c_k L_k| / h bounds the
    rounding error of the difference quotient itself (clipped at zero).  g_fd
    is the fourth-order stencil (L(-h) - 8 L(-h/2) + 8 L(+h/2) - L(+h)) / 6h,
    whose truncation error stays small where the loss is sharply curved; if
    the half steps disagree with the base kink pattern it falls back to the
    central difference over +-h.

    An entry whose probes move any relu6, clamp, bound, abs or floor op into a
    different linear piece is counted in ``skipped`` instead: across a kink a
    difference quotient mixes one-sided slopes and is not a valid oracle.
    """
    params, loss_fn = builder()
    params = list(params)
    total = sum(p.size for _, p in params)
    if total > max_params:
        raise ValueError(f"grad_check on {total} parameters exceeds the limit of {max_params}")
    for _, p in params:
        p.data = p.data.astype(np.float64)
        p.requires_grad = True
        p.grad = None
    with T.record_kinks() as base:
        loss = loss_fn()
    base = list(base)
    T.backward(loss)

    def probe():
        with T.no_grad(), T.record_kinks() as kinks:
            value = float(loss_fn().data)
        return value, kinks == base

    def error(a, g_fd, noise):
        return max(abs(a - g_fd) - noise, 0.0) / max(abs(a), abs(g_fd), 1e-8)

    worst, worst_name, skipped = 0.0, "", 0
    for name, p in params:
        g_ad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-4 * (1.0 + abs(orig))

            def at(step):
                flat[i] = orig + step
                out = probe()
                flat[i] = orig
                return out

            (fp, same_p), (fm, same_m) = at(h), at(-h)
            if not (same_p and same_m):
                skipped += 1
                continue
            a = float(g_ad[i])
            # a difference quotient is only known to within the rounding of the loss values
            (fp2, same_p2), (fm2, same_m2) = at(h / 2), at(-h / 2)
            if same_p2 and same_m2:
                g_fd = (fm - 8 * fm2 + 8 * fp2 - fp) / (6 * h)
                noise = _ULPS * _EPS * (abs(fm) + 8 * abs(fm2) + 8 * abs(fp2) + abs(fp)) / (6 * h)
            else:
                g_fd = (fp - fm) / (2 * h)
                noise = _ULPS * _EPS * (abs(fp) + abs(fm)) / (2 * h)
            err = error(a, g_fd, noise)
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckResult(worst, tolerance, worst_name, total, skipped)
