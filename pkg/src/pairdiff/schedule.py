"""Diffusion timeline: linear beta schedule, closed-form marginals, inference retiming.

Timesteps are 1-based. Every table has length ``T + 1`` and index 0 stands for
clean data (``alpha_bar[0] == 1``, ``beta[0] == 0``), so ``schedule.beta[t]``
reads exactly like the math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Field, InvalidRangeError, check_same_shape


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "posterior_var"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise ValueError(f"{name} must have length T+1={self.T + 1}, got {arr.shape}")
            arr.setflags(write=False)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise InvalidRangeError(f"timestep outside 1..{self.T}: {t}")

    def snr(self) -> np.ndarray:
        ab = self.alpha_bar[1:]
        return ab / (1.0 - ab)

    def tensors(self) -> dict[str, np.ndarray]:
        """Named tables (t = 1..T) for checkpoint storage."""
        return {f"schedule.{k}": np.array(getattr(self, k)[1:])
                for k in ("beta", "alpha", "alpha_bar", "posterior_var")}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "NoiseSchedule":
        """Rebuild from stored tables verbatim (no recomputation, bit-stable)."""
        beta = np.asarray(tensors["schedule.beta"], dtype=np.float64)
        T = beta.shape[0]

        def padded(name, head):
            return np.concatenate([[head], np.asarray(tensors[f"schedule.{name}"], dtype=np.float64)])

        return cls(T=T, beta=padded("beta", 0.0), alpha=padded("alpha", 1.0),
                   alpha_bar=padded("alpha_bar", 1.0), posterior_var=padded("posterior_var", 0.0))


def build_linear_schedule(T: int = 1024, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseSchedule:
    if T < 2 or not (0.0 < beta1 <= betaT < 1.0):
        raise InvalidRangeError(f"need T >= 2 and 0 < beta1 <= betaT < 1; got T={T}, {beta1}, {betaT}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = beta1 + (t - 1.0) / (T - 1.0) * (betaT - beta1)
    beta[-1] = betaT
    beta = np.concatenate([[0.0], beta])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    post = np.zeros(T + 1)
    post[1] = beta[1]
    post[2:] = (1.0 - alpha_bar[1:-1]) / (1.0 - alpha_bar[2:]) * beta[2:]
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=post)


def marginal_noise(schedule: NoiseSchedule, x0: Field, t, noise: Field) -> Field:
    """Sample of q(x_t | x_0) given the standard-normal ``noise``.

    ``t`` may be an int or one timestep per leading batch entry.
    """
    check_same_shape(x0, noise)
    schedule.check_step(t)
    ab = _broadcast_steps(schedule.alpha_bar, t, np.ndim(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def _broadcast_steps(table: np.ndarray, t, ndim: int) -> np.ndarray:
    vals = table[np.asarray(t)]
    if np.ndim(vals) == 0:
        return vals
    return vals.reshape(vals.shape + (1,) * (ndim - vals.ndim))


@dataclass(frozen=True, eq=False)
class InferenceTimeline:
    """Reverse-order inference steps with retimed transition coefficients.

    Entry ``i`` describes the transition from ``steps[i]`` to ``prev_steps[i]``
    (the next lower selected step, or 0 for the final transition).
    """

    T: int
    steps: np.ndarray
    prev_steps: np.ndarray
    alpha_bar: np.ndarray
    prev_alpha_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    posterior_var: np.ndarray

    def __len__(self) -> int:
        return int(self.steps.shape[0])

    @property
    def K(self) -> int:
        return len(self)

    def position(self, i: int) -> int:
        """1-based temporal index of entry ``i`` (K for the first reverse step, 1 for the last)."""
        return len(self) - i


def subsample_timeline(schedule: NoiseSchedule, K: int) -> InferenceTimeline:
    """Evenly spaced K-step timeline over 1..T including both endpoints.

    Transitions are retimed from ratios of the stored ``alpha_bar`` so each
    selected step keeps its training marginal.
    """
    T = schedule.T
    if not (2 <= K <= T):
        raise InvalidRangeError(f"need 2 <= K <= T={T}, got {K}")
    i = np.arange(K, dtype=np.int64)
    # round(1 + i (T-1)/(K-1)) in integer arithmetic
    asc = 1 + (2 * i * (T - 1) + (K - 1)) // (2 * (K - 1))
    steps = asc[::-1].copy()
    prev_steps = np.concatenate([steps[1:], [0]])
    ab = schedule.alpha_bar[steps]
    ab_prev = schedule.alpha_bar[prev_steps]
    alpha = ab / ab_prev
    beta = 1.0 - alpha
    post = (1.0 - ab_prev) / (1.0 - ab) * beta
    post[-1] = 0.0
    tl = InferenceTimeline(T=T, steps=steps, prev_steps=prev_steps, alpha_bar=ab,
                           prev_alpha_bar=ab_prev, alpha=alpha, beta=beta, posterior_var=post)
    for name in ("steps", "prev_steps", "alpha_bar", "prev_alpha_bar", "alpha", "beta", "posterior_var"):
        getattr(tl, name).setflags(write=False)
    return tl


def full_timeline(schedule: NoiseSchedule) -> InferenceTimeline:
    return subsample_timeline(schedule, schedule.T)
