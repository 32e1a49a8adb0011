"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, use_dtype


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name:<32s} entries={self.checked:<5d} "
            f"max_rel={self.max_rel_err:.2e} max_abs={self.max_abs_err:.2e}"
        )


def check_gradient(fn, inputs, name="fn", step=1e-3, rtol=1e-4, atol=1e-6,
                   max_entries=None, seed=0):
    """Compare analytic gradients of the scalar ``fn(*inputs)`` against
    central differences for every input Tensor with ``requires_grad``.

    An entry passes if ``|a - n| <= max(rtol * max(|a|, |n|), atol)``.
    ``max_entries`` caps how many randomly chosen entries are probed per
    input (all entries when None).
    """
    with use_dtype(np.float64):
        return _check(fn, inputs, name, step, rtol, atol, max_entries, seed)


def _check(fn, inputs, name, step, rtol, atol, max_entries, seed):
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"{name}: gradient check needs a scalar output, got {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)
    max_rel = max_abs = 0.0
    checked = 0
    ok = True
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn(*inputs).data)
            flat[i] = orig - step
            down = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric)
            scale = max(abs(a), abs(numeric))
            rel = err / scale if scale > 0 else 0.0
            if err > max(rtol * scale, atol):
                ok = False
            max_abs = max(max_abs, err)
            if err > atol:
                max_rel = max(max_rel, rel)
            checked += 1
    return GradCheckResult(name, max_rel, max_abs, checked, ok)


def random_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad,
                  dtype=np.float64)
