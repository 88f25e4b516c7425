"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .ops import record_branches
from .tensor import Tensor, backward


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(floor, abs(a) + abs(n))


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    n_samples: Optional[int] = None,
    seed: int = 0,
    kink_tol: float = 1e-2,
    max_resample: int = 50,
    floor: Optional[float] = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` is re-evaluated after each in-place perturbation of an input
    element, so it must read the input tensors' ``data`` each call. With
    ``n_samples`` set, that many elements are drawn at random across all
    inputs; otherwise every element is checked.

    An element is sitting within ``eps`` of a non-smooth point, and is replaced
    by a freshly drawn element, when either perturbation changes the branch
    taken by any non-smooth op (see :func:`depthbench.ops.record_branches`).
    For functions built outside the instrumented ops, one-sided difference
    quotients disagreeing by more than ``kink_tol`` (relative) also count.

    The relative error |a - n| / (|a| + |n|) uses ``floor`` as its smallest
    denominator, so structurally zero gradients (a bias feeding batch norm,
    say) are judged against finite-difference round-off instead of being
    reported as 100% error. The default floor is 1e7 times the round-off of
    the central difference, ulp * max(1, |f|) / eps, and at least 1e-4.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with record_branches() as base_branches:
        loss = fn()
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar-valued fn")
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    sizes = np.array([t.size for t in inputs])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    if n_samples is None:
        queue = list(range(total))
    else:
        queue = list(rng.choice(total, size=min(n_samples, total), replace=False))

    def f_at():
        with record_branches() as branches:
            value = float(fn().data.reshape(-1)[0])
        return value, branches == base_branches

    f0 = float(loss.data.reshape(-1)[0])
    if floor is None:
        floor = max(1e-4, 1e7 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / eps)
    worst = 0.0
    compared = 0
    resamples = 0
    checked = set()
    while queue:
        flat = int(queue.pop())
        checked.add(flat)
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        t = inputs[k]
        i = np.unravel_index(flat - offsets[k], t.shape)
        orig = t.data[i]
        t.data[i] = orig + eps
        fp, same_p = f_at()
        t.data[i] = orig - eps
        fm, same_m = f_at()
        t.data[i] = orig
        s_plus, s_minus = (fp - f0) / eps, (f0 - fm) / eps
        scale = max(abs(s_plus), abs(s_minus), 1e-8)
        slope_kink = abs(s_plus - s_minus) > kink_tol * scale and abs(s_plus - s_minus) > 1e-6
        if slope_kink or not (same_p and same_m):
            if resamples < max_resample and len(checked) < total:
                resamples += 1
                cand = int(rng.integers(total))
                while cand in checked and len(checked) < total:
                    cand = int(rng.integers(total))
                queue.append(cand)
            continue
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, _rel_err(float(analytic[k][i]), numeric, floor))
        compared += 1
    if total and not compared:
        raise RuntimeError("every sampled element sits on a non-smooth point; nothing was compared")
    return worst
