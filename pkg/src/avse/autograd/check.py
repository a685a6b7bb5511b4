"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import GradError
from .tensor import Tensor


def _evaluate(f, inputs):
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise GradError("grad_check needs a function returning a scalar Tensor")
    return out


def grad_check(
    f: Callable[..., Tensor],
    x,
    eps: float = 1e-4,
    coords: int | None = None,
    seed: int = 0,
    others: Sequence = (),
) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` is called as ``f(x, *others)``. ``x`` may be a Tensor, array, or a
    list of Tensors (e.g. model parameters) whose ``values`` are perturbed in
    place and restored. ``coords`` limits the check to that many randomly
    chosen coordinates per tensor. Relative error uses
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if isinstance(x, (list, tuple)):
        targets = list(x)
        call = lambda: f(*others)
    else:
        targets = [x if isinstance(x, Tensor) else Tensor(x)]
        call = lambda: f(targets[0], *others)

    saved = [(t.requires_grad, t.grad) for t in targets]
    for t in targets:
        t.requires_grad, t.grad = True, None
    try:
        loss = _evaluate(lambda: call(), ())
        base = loss.item()
        if _evaluate(lambda: call(), ()).item() != base:
            raise GradError("grad_check: function is not deterministic")
        loss.backward()
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in targets]

        rng = np.random.default_rng(seed)
        worst = 0.0
        for t, a in zip(targets, analytic):
            flat = t.values.reshape(-1)
            idx = np.arange(flat.size)
            if coords is not None and coords < flat.size:
                idx = np.sort(rng.choice(flat.size, coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _evaluate(lambda: call(), ()).item()
                flat[i] = orig - eps
                fm = _evaluate(lambda: call(), ()).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = a.reshape(-1)[i]
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, rel)
        return worst
    finally:
        for t, (rg, g) in zip(targets, saved):
            t.requires_grad, t.grad = rg, g
