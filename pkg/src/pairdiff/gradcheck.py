"""Central finite-difference check of the denoiser's hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import conv_backward, conv_forward, init_params

REL_TOL = 1e-5


@dataclass
class GradCheckReport:
    seed: int
    n_checked: int
    max_rel_error: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


def gradcheck(seed: int, n_params: int = 200, h: float = 1e-5, size: int = 8, batch: int = 2,
              T: int = 1024) -> GradCheckReport:
    """Compare analytic and numeric gradients of ``sum(G * eps_pred)`` for sampled parameters.

    Parameters are fully random (including the output layer, which is normally
    zero-initialised) so that every gradient is generically nonzero.
    """
    rng = np.random.default_rng(seed)
    params = init_params(rng, zero_final=False)
    for name in params:
        if name.endswith("bias"):
            params[name] = rng.uniform(-0.1, 0.1, params[name].shape)
    noisy = rng.standard_normal((batch, size, size))
    cond = rng.uniform(-1.0, 1.0, (batch, size, size))
    t = rng.integers(1, T + 1, size=batch)
    weight = rng.standard_normal((batch, size, size))

    def loss(p):
        out, _ = conv_forward(p, noisy, cond, t, T)
        return float(np.sum(weight * out))

    grads, _ = conv_backward(params, noisy, cond, t, T, weight)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    flat = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, worst_err = "", 0.0
    for f in flat:
        j = int(np.searchsorted(offsets, f, side="right") - 1)
        name, idx = names[j], np.unravel_index(f - offsets[j], params[names[j]].shape)
        p = {k: v.copy() for k, v in params.items()}
        orig = p[name][idx]
        p[name][idx] = orig + h
        up = loss(p)
        p[name][idx] = orig - h
        down = loss(p)
        err = relative_error(float(grads[name][idx]), (up - down) / (2.0 * h))
        if err >= worst_err:
            worst, worst_err = f"{name}{list(map(int, idx))}", err
    return GradCheckReport(seed, len(flat), worst_err, worst)
