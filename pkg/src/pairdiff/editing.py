"""Bidirectional editing with anatomy- and lesion-consistency guidance.

An edit noises the input image to an intermediate step of the inference
timeline, then runs the brain branch backwards conditioned on the target mask
(healthy-to-pathology, ``h2p``) or on the empty mask (pathology-to-healthy,
``p2h``). After every reverse step the sample is pulled towards the input by a
per-pixel weight

    lam = exp(-g_i * |y0 - y0_hat_i|)            (anatomy consistency, ACG)
    lam *= 1 - eta * avgpool(mask)                (lesion consistency, LCG; h2p only)

with the guidance gain ``g_i = alpha0 * exp(-k * i / K)`` indexed by the
position ``i`` in the K-step inference timeline. ``g`` is deliberately not
called alpha: the schedule already owns that name.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (Field, InvalidRangeError, StreamBank, avg_pool_same, check_same_shape,
                       is_binary, mask_to_signed)
from .paired import estimate_from_alpha_bar, reverse_step
from .schedule import InferenceTimeline

H2P, P2H = "h2p", "p2h"


@dataclass
class GuidanceConfig:
    alpha0: float = 20.0
    k: float = 0.5
    eta: float = 1.0
    pool_window: int = 7
    t_start_frac: float = 0.2
    acg_enabled: bool = True
    lcg_enabled: bool = True
    random_start: bool = False

    def validate(self) -> None:
        if not self.alpha0 > 0:
            raise InvalidRangeError("alpha0 must be positive")
        if self.k < 0:
            raise InvalidRangeError("k must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidRangeError("eta must lie in [0, 1]")
        if not 0.0 < self.t_start_frac <= 1.0:
            raise InvalidRangeError("t_start_frac must lie in (0, 1]")
        if self.pool_window < 1 or self.pool_window % 2 == 0:
            raise InvalidRangeError("pool_window must be a positive odd integer")


@dataclass
class EditRequest:
    source: Field
    mask: Field
    direction: str

    def __post_init__(self):
        check_same_shape(self.source, self.mask)
        if self.direction not in (H2P, P2H):
            raise ValueError(f"direction must be 'h2p' or 'p2h', got {self.direction!r}")
        if not is_binary(np.asarray(self.mask)):
            raise ValueError("edit mask must be binary")


@dataclass
class EditResult:
    output: Field
    snapshots: dict = field(default_factory=dict)
    record: dict = field(default_factory=dict)


def guidance_gain(cfg: GuidanceConfig, t: float, T_inf: int) -> float:
    if not 0 <= t <= T_inf:
        raise InvalidRangeError(f"t={t} outside [0, {T_inf}]")
    return cfg.alpha0 * np.exp(-cfg.k * t / T_inf)


def acg_weight(cfg: GuidanceConfig, y0: Field, y0_hat: Field, t: float, T_inf: int) -> Field:
    check_same_shape(y0, y0_hat)
    return np.exp(-guidance_gain(cfg, t, T_inf) * np.abs(np.asarray(y0) - np.asarray(y0_hat)))


def lcg_weight(cfg: GuidanceConfig, mask: Field) -> Field:
    mask = np.asarray(mask, dtype=np.float64)
    if not is_binary(mask):
        raise ValueError("LCG needs a binary mask")
    return 1.0 - cfg.eta * avg_pool_same(mask, cfg.pool_window)


def guided_update(y_prev: Field, y0: Field, lam: Field) -> Field:
    """Convex pull ``(1 - lam) * y_prev + lam * y0``."""
    check_same_shape(y_prev, y0)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < -1e-9) or np.any(lam > 1.0 + 1e-9):
        raise InvalidRangeError("guidance weight outside [0, 1]")
    lam = np.clip(lam, 0.0, 1.0)
    return y_prev + lam * (np.asarray(y0) - y_prev)


def start_index(cfg: GuidanceConfig, K: int, rng: np.random.Generator | None = None) -> int:
    """Timeline entry at which editing starts (entry K-m is the m-th step from the clean end)."""
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs a generator")
        m = int(rng.integers(1, K + 1))
    else:
        m = int(round(cfg.t_start_frac * K))
    m = min(max(m, 1), K)
    return K - m


def edit(brain_model, sources: Field, masks: Field, direction: str, cfg: GuidanceConfig,
         timeline: InferenceTimeline, seed: int, indices=None, *, snapshot_steps=(),
         clamp_estimates: bool = True) -> EditResult:
    """Edit a batch of images.

    ``sources`` and ``masks`` are ``(N, H, W)`` (or single fields). For ``p2h``
    the masks are ignored and the empty mask conditions the model. The guided
    update pulls towards the source image itself.
    """
    cfg.validate()
    sources = np.asarray(sources, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    single = sources.ndim == 2
    if single:
        sources, masks = sources[None], masks[None]
    check_same_shape(sources, masks)
    if direction not in (H2P, P2H):
        raise ValueError(f"direction must be 'h2p' or 'p2h', got {direction!r}")
    n = sources.shape[0]
    indices = list(range(n)) if indices is None else list(indices)
    K = len(timeline)

    if direction == H2P:
        cond = mask_to_signed(masks)
        lesion_w = lcg_weight(cfg, masks) if cfg.lcg_enabled else None
    else:
        cond = np.full_like(sources, -1.0)
        lesion_w = None

    start_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,))) if cfg.random_start else None
    i0 = start_index(cfg, K, start_rng)
    init = StreamBank(seed, indices, tag=3)
    noise = StreamBank(seed, indices, tag=4)
    y = marginal_noise_at(timeline, i0, sources, init.normal(sources.shape[1:]))

    snapshots = {}
    for i in range(i0, K):
        t = int(timeline.steps[i])
        eps = brain_model.predict_noise(y, cond, t)
        y_prev = reverse_step(brain_model, y, cond, timeline, i, noise, eps_pred=eps)
        if cfg.acg_enabled:
            y0_hat = estimate_from_alpha_bar(eps, y, timeline.alpha_bar[i], clamp_estimates)
            lam = acg_weight(cfg, sources, y0_hat, timeline.position(i), K)
            if lesion_w is not None:
                lam = lam * lesion_w
            y_prev = guided_update(y_prev, sources, lam)
            if timeline.position(i) in snapshot_steps:
                snapshots[timeline.position(i)] = lam.copy()
        y = y_prev
    out = np.clip(y, -1.0, 1.0)
    record = {"direction": direction, "guidance": asdict(cfg), "seed": int(seed),
              "indices": [int(j) for j in indices], "timeline_K": K, "start_step": int(timeline.steps[i0])}
    return EditResult(out[0] if single else out, snapshots, record)


def marginal_noise_at(timeline: InferenceTimeline, i: int, x0: Field, noise: Field) -> Field:
    ab = timeline.alpha_bar[i]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def plain_resample(brain_model, sources: Field, cond: Field, timeline: InferenceTimeline, i0: int,
                   seed: int, indices) -> Field:
    """Unguided noise-and-denoise from entry ``i0``; the ACG-off reference path."""
    init = StreamBank(seed, indices, tag=3)
    noise = StreamBank(seed, indices, tag=4)
    y = marginal_noise_at(timeline, i0, sources, init.normal(sources.shape[1:]))
    for i in range(i0, len(timeline)):
        y = reverse_step(brain_model, y, cond, timeline, i, noise)
    return np.clip(y, -1.0, 1.0)


def edit_request(brain_model, request: EditRequest, cfg: GuidanceConfig, timeline: InferenceTimeline,
                 seed: int, index: int = 0, **kwargs) -> EditResult:
    return edit(brain_model, request.source, request.mask, request.direction, cfg, timeline, seed,
                [index], **kwargs)
