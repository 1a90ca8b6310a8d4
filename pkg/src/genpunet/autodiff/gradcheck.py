"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3,
                   kink_tol: float | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    Non-scalar outputs are summed.  The error per coordinate is ``|auto - fd| / max(|fd|, 1e-6)``.  When
    ``kink_tol`` is given, coordinates whose value lies within ``kink_tol`` of
    zero are skipped (ReLU kinks make central differences meaningless there).
    """
    x = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        out = f(x)
        tape.backward(out if out.size == 1 else out.sum())
    auto = x.grad.astype(np.float64).reshape(-1)

    flat = x.data.reshape(-1)
    errors = []
    for i in range(flat.size):
        if kink_tol is not None and abs(flat[i]) < kink_tol:
            continue
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(Tensor(x.data, dtype=x.dtype)).data.sum())
        flat[i] = orig - step
        down = float(f(Tensor(x.data, dtype=x.dtype)).data.sum())
        flat[i] = orig
        fd = (up - down) / (2 * step)
        errors.append(abs(auto[i] - fd) / max(abs(fd), 1e-6))
    return max(errors) if errors else 0.0
