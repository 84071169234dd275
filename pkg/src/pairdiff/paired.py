"""Paired lesion/brain diffusion: joint noising, one-step estimates, joint reverse sampling.

Masks diffuse as continuous fields in [-1, 1] (lesion = +1) and are binarised
at 0 only on output. Every sampler works on a batch of independent
trajectories, each drawing noise from its own substream (see
:class:`~pairdiff.numerics.StreamBank`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Field, ShapeMismatchError, StreamBank, binarize, check_same_shape, mask_to_signed
from .schedule import InferenceTimeline, NoiseSchedule, marginal_noise

LESION, BRAIN = "lesion", "brain"
ESTIMATE, PREVIOUS = "estimate", "previous"
NOISY = "noisy"


@dataclass
class SamplePair:
    mask_field: Field
    image_field: Field

    def __post_init__(self):
        check_same_shape(self.mask_field, self.image_field)

    @classmethod
    def from_binary(cls, mask: Field, image: Field) -> "SamplePair":
        return cls(mask_to_signed(mask), np.asarray(image, dtype=np.float64))

    @property
    def mask(self) -> Field:
        return binarize(self.mask_field)


@dataclass
class PairState:
    x_t: Field
    y_t: Field
    index: int
    x0_hat: Field | None = None
    y0_hat: Field | None = None


def forward_noise_pair(pair: SamplePair, schedule: NoiseSchedule, t, rng: np.random.Generator):
    """Noise both members independently to step ``t``; returns ``(x_t, y_t, eps_x, eps_y)``."""
    schedule.check_step(t)
    eps_x = rng.standard_normal(np.shape(pair.mask_field))
    eps_y = rng.standard_normal(np.shape(pair.image_field))
    x_t = marginal_noise(schedule, pair.mask_field, t, eps_x)
    y_t = marginal_noise(schedule, pair.image_field, t, eps_y)
    return x_t, y_t, eps_x, eps_y


def one_step_estimate(eps_pred: Field, noisy: Field, schedule: NoiseSchedule, t, clamp: bool = True) -> Field:
    """Deterministic clean-signal estimate from a noise prediction."""
    return estimate_from_alpha_bar(eps_pred, noisy, _steps_like(schedule.alpha_bar, t, np.ndim(noisy)), clamp)


def estimate_from_alpha_bar(eps_pred: Field, noisy: Field, alpha_bar, clamp: bool = True) -> Field:
    x0 = (noisy - np.sqrt(1.0 - alpha_bar) * eps_pred) / np.sqrt(alpha_bar)
    return np.clip(x0, -1.0, 1.0) if clamp else x0


def _steps_like(table, t, ndim):
    vals = table[np.asarray(t)]
    if np.ndim(vals) == 0:
        return vals
    return vals.reshape(vals.shape + (1,) * (ndim - vals.ndim))


def reverse_mean(eps_pred: Field, noisy: Field, timeline: InferenceTimeline, i: int) -> Field:
    a, b, ab = timeline.alpha[i], timeline.beta[i], timeline.alpha_bar[i]
    return (noisy - b / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)


def reverse_variance(model, timeline: InferenceTimeline, i: int) -> float:
    """Variance added on transition ``i``.

    The posterior variance of the schedule, plus the propagated x_0 uncertainty
    when the model reports one (``x0_variance``); zero on the final transition.
    """
    if i == len(timeline) - 1:
        return 0.0
    var = float(timeline.posterior_var[i])
    x0_var = getattr(model, "x0_variance", None)
    if x0_var is not None:
        coef = np.sqrt(timeline.prev_alpha_bar[i]) * timeline.beta[i] / (1.0 - timeline.alpha_bar[i])
        var += coef * coef * float(x0_var(int(timeline.steps[i])))
    return var


def reverse_step(model, noisy: Field, cond: Field | None, timeline: InferenceTimeline, i: int,
                 noise: StreamBank | None, *, eps_pred: Field | None = None, stochastic: bool = True) -> Field:
    """One ancestral step ``steps[i] -> prev_steps[i]`` for a batch.

    ``eps_pred`` may be supplied to reuse a prediction already made for this
    state and condition.
    """
    if eps_pred is None:
        eps_pred = model.predict_noise(noisy, cond, int(timeline.steps[i]))
    mean = reverse_mean(eps_pred, noisy, timeline, i)
    var = reverse_variance(model, timeline, i) if stochastic else 0.0
    if var > 0.0:
        return mean + np.sqrt(var) * noise.normal(noisy.shape[1:])
    return mean


def joint_step(lesion_model, brain_model, state: PairState, timeline: InferenceTimeline,
               noise_x: StreamBank, noise_y: StreamBank, *, conditioning: str = ESTIMATE,
               lesion_condition: str = ESTIMATE, clamp: bool = True) -> PairState:
    """Advance both branches by one timeline entry.

    With ``conditioning="estimate"`` both one-step estimates are formed first
    from noise predictions conditioned on the noisy partner, then each branch
    steps conditioned on the other's frozen estimate (or, for the lesion branch
    with ``lesion_condition="noisy"``, directly on ``y_t``). With
    ``conditioning="previous"`` each branch conditions on the partner's current
    state, i.e. the previous step's output.
    """
    i = state.index
    t = int(timeline.steps[i])
    ab = timeline.alpha_bar[i]
    x_t, y_t = state.x_t, state.y_t
    if conditioning == ESTIMATE:
        eps_x0 = lesion_model.predict_noise(x_t, y_t, t)
        eps_y0 = brain_model.predict_noise(y_t, x_t, t)
        x0_hat = estimate_from_alpha_bar(eps_x0, x_t, ab, clamp)
        y0_hat = estimate_from_alpha_bar(eps_y0, y_t, ab, clamp)
        if lesion_condition == NOISY:
            eps_x = eps_x0
        elif lesion_condition == ESTIMATE:
            eps_x = lesion_model.predict_noise(x_t, y0_hat, t)
        else:
            raise ValueError(f"unknown lesion_condition {lesion_condition!r}")
        eps_y = brain_model.predict_noise(y_t, x0_hat, t)
    elif conditioning == PREVIOUS:
        eps_x = lesion_model.predict_noise(x_t, y_t, t)
        eps_y = brain_model.predict_noise(y_t, x_t, t)
        x0_hat = estimate_from_alpha_bar(eps_x, x_t, ab, clamp)
        y0_hat = estimate_from_alpha_bar(eps_y, y_t, ab, clamp)
    else:
        raise ValueError(f"unknown conditioning mode {conditioning!r}")
    x_prev = reverse_step(lesion_model, x_t, None, timeline, i, noise_x, eps_pred=eps_x)
    y_prev = reverse_step(brain_model, y_t, None, timeline, i, noise_y, eps_pred=eps_y)
    return PairState(x_prev, y_prev, i + 1, x0_hat, y0_hat)


def sample_unconditional_pair(lesion_model, brain_model, timeline: InferenceTimeline, shape: tuple[int, int],
                              seed: int, indices=(0,), *, conditioning: str = ESTIMATE,
                              lesion_condition: str = ESTIMATE, clamp: bool = True) -> SamplePair:
    """Jointly generate (mask, image) pairs from pure noise.

    One trajectory per entry of ``indices``; trajectory ``j`` uses substreams
    derived from ``(seed, j)`` only. The returned ``mask_field`` is the final
    continuous mask state; use ``.mask`` for the binarised version.
    """
    init = StreamBank(seed, indices, tag=0)
    noise_x = StreamBank(seed, indices, tag=1)
    noise_y = StreamBank(seed, indices, tag=2)
    x = init.normal((2,) + tuple(shape))
    state = PairState(x[:, 0], x[:, 1], 0)
    for _ in range(len(timeline)):
        state = joint_step(lesion_model, brain_model, state, timeline, noise_x, noise_y,
                           conditioning=conditioning, lesion_condition=lesion_condition, clamp=clamp)
    return SamplePair(np.clip(state.x_t, -1.0, 1.0), np.clip(state.y_t, -1.0, 1.0))


def sample_conditional(brain_model, mask: Field, timeline: InferenceTimeline, seed: int, indices=(0,),
                       *, trace=None) -> Field:
    """Generate images for a fixed binary mask (one or one per trajectory).

    ``trace``, if given, is called with the exact condition array passed to the
    model at every step.
    """
    mask = np.asarray(mask, dtype=np.float64)
    n = len(indices)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (n,) + mask.shape)
    if mask.shape[0] != n:
        raise ShapeMismatchError(f"{mask.shape[0]} masks for {n} trajectories")
    cond = mask_to_signed(mask)
    cond.setflags(write=False)
    init = StreamBank(seed, indices, tag=0)
    noise_y = StreamBank(seed, indices, tag=2)
    y = init.normal(mask.shape[1:])
    for i in range(len(timeline)):
        if trace is not None:
            trace(cond)
        y = reverse_step(brain_model, y, cond, timeline, i, noise_y)
    return np.clip(y, -1.0, 1.0)
