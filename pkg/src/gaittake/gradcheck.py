"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over all input coordinates.

    ``f`` must be deterministic and map ``inputs`` to a scalar tensor. Every
    input that has ``requires_grad`` set is checked. ``max_coords`` limits the
    number of coordinates probed per input (sampled with ``rng``); by default
    every coordinate is probed.
    """
    checked = [t for t in inputs if t.requires_grad]
    loss = f(*inputs)
    backward(loss, leaves=checked)
    analytic = [t.grad.copy() for t in checked]

    worst = 0.0
    for t, ana in zip(checked, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))
        ana_flat = ana.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*inputs).item()
            flat[i] = orig - eps
            down = f(*inputs).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            if not np.isfinite(err):
                return float("inf")
            worst = max(worst, err)
    return worst
