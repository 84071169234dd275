"""Held-out editing cases and the ablation statistics built on them.

Both arms of every comparison share seeds and trajectory indices, so they see
identical injected noise and differ only in the setting under study.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .editing import H2P, P2H, GuidanceConfig, edit
from .metrics import downsample_flatten, l1, median_bandwidth, mmd2, psnr
from .numerics import map_chunks
from .paired import ESTIMATE, PREVIOUS, sample_unconditional_pair
from .phantom import LesionSpec, PhantomSpec, make_triple, sample_seed, soft_mask
from .schedule import InferenceTimeline

SWEEP_DEFAULTS = {"alpha0": (5.0, 10.0, 20.0, 30.0), "k": (0.1, 0.5, 1.0, 2.0), "eta": (0.0, 0.5, 1.0)}


@dataclass
class EditCases:
    masks: np.ndarray
    paths: np.ndarray
    healthies: np.ndarray
    seeds: list
    softness: float

    def __len__(self) -> int:
        return len(self.seeds)

    def outside_weight(self, i: int) -> np.ndarray:
        return 1.0 - soft_mask(self.masks[i], self.softness)


def heldout_cases(n: int = 20, pspec: PhantomSpec | None = None, lspec: LesionSpec | None = None,
                  base_seed: int = 1234, split: str = "test", max_draws: int = 10_000) -> EditCases:
    """The first ``n`` triples of ``split`` that carry a non-empty lesion."""
    pspec = pspec or PhantomSpec()
    lspec = lspec or LesionSpec()
    masks, paths, healthies, seeds = [], [], [], []
    for i in range(max_draws):
        if len(seeds) == n:
            break
        s = sample_seed(base_seed, split, i)
        m, p, h = make_triple(pspec, lspec, s)
        if m.sum() == 0:
            continue
        masks.append(m), paths.append(p), healthies.append(h), seeds.append(s)
    if len(seeds) < n:
        raise RuntimeError(f"only {len(seeds)} non-empty cases in {max_draws} draws")
    return EditCases(np.stack(masks), np.stack(paths), np.stack(healthies), seeds, lspec.softness)


def run_edits(brain, sources, masks, direction: str, cfg: GuidanceConfig, timeline: InferenceTimeline,
              seed: int, chunk_size: int = 16, jobs: int = 1) -> np.ndarray:
    def one(idx):
        return edit(brain, sources[idx], masks[idx], direction, cfg, timeline, seed, idx).output
    return map_chunks(one, range(len(sources)), chunk_size, jobs)


def p2h_stats(cases: EditCases, outputs: np.ndarray) -> dict:
    """Outside-lesion L1 to the input, PSNR to the healthy truth, whole-image L1 to the input."""
    n = len(cases)
    outside = [l1(outputs[i], cases.paths[i], cases.outside_weight(i)) for i in range(n)]
    peak = [psnr(outputs[i], cases.healthies[i]) for i in range(n)]
    whole = [l1(outputs[i], cases.paths[i]) for i in range(n)]
    return {"outside_l1": outside, "psnr": peak, "whole_l1": whole,
            "median_outside_l1": float(np.median(outside)), "median_psnr": float(np.median(peak)),
            "median_whole_l1": float(np.median(whole))}


def h2p_stats(cases: EditCases, outputs: np.ndarray) -> dict:
    """Mean |output - healthy input| inside the lesion."""
    shift = [l1(outputs[i], cases.healthies[i], cases.masks[i]) for i in range(len(cases))]
    return {"inside_shift": shift, "median_inside_shift": float(np.median(shift))}


def acg_ablation(brain, cases: EditCases, cfg: GuidanceConfig, timeline: InferenceTimeline, seed: int,
                 **kw) -> dict:
    arms = {}
    for name, on in (("with", True), ("without", False)):
        out = run_edits(brain, cases.paths, cases.masks, P2H, replace(cfg, acg_enabled=on), timeline, seed, **kw)
        arms[name] = p2h_stats(cases, out)
    arms["acg_better"] = (arms["with"]["median_outside_l1"] < arms["without"]["median_outside_l1"]
                          and arms["with"]["median_psnr"] > arms["without"]["median_psnr"])
    return arms


def lcg_ablation(brain, cases: EditCases, cfg: GuidanceConfig, timeline: InferenceTimeline, seed: int,
                 **kw) -> dict:
    arms = {}
    for name, on in (("with", True), ("without", False)):
        out = run_edits(brain, cases.healthies, cases.masks, H2P, replace(cfg, lcg_enabled=on), timeline, seed, **kw)
        arms[name] = h2p_stats(cases, out)
    wins = np.asarray(arms["with"]["inside_shift"]) >= np.asarray(arms["without"]["inside_shift"])
    arms["win_fraction"] = float(wins.mean())
    return arms


def guidance_sweep(brain, cases: EditCases, cfg: GuidanceConfig, timeline: InferenceTimeline, seed: int,
                   param: str, values=None, **kw) -> dict:
    """Rerun edits across one guidance parameter.

    ``alpha0`` and ``k`` act on p2h anchoring (whole-image L1 to the input);
    ``eta`` acts on h2p lesion expression (inside-lesion shift).
    """
    if param not in SWEEP_DEFAULTS:
        raise ValueError(f"unknown sweep parameter {param!r}")
    values = SWEEP_DEFAULTS[param] if values is None else tuple(values)
    rows = []
    for v in values:
        c = replace(cfg, **{param: float(v)})
        if param == "eta":
            out = run_edits(brain, cases.healthies, cases.masks, H2P, c, timeline, seed, **kw)
            stats = h2p_stats(cases, out)
        else:
            out = run_edits(brain, cases.paths, cases.masks, P2H, c, timeline, seed, **kw)
            stats = p2h_stats(cases, out)
        rows.append({"value": float(v), **stats})
    key = "median_inside_shift" if param == "eta" else "median_whole_l1"
    medians = [r[key] for r in rows]
    return {"param": param, "statistic": key, "rows": rows, "medians": medians,
            "non_decreasing": bool(np.all(np.diff(medians) >= 0))}


def sample_pairs(lesion, brain, timeline: InferenceTimeline, shape, n: int, seed: int, conditioning: str = ESTIMATE,
                 chunk_size: int = 16, jobs: int = 1) -> tuple[np.ndarray, np.ndarray]:
    def one(idx):
        pair = sample_unconditional_pair(lesion, brain, timeline, shape, seed, idx, conditioning=conditioning)
        return np.stack([pair.mask, pair.image_field], axis=1)
    out = map_chunks(one, range(n), chunk_size, jobs)
    return out[:, 0], out[:, 1]


def onestep_ablation(lesion, brain, timeline: InferenceTimeline, reference_images: np.ndarray, n: int,
                     seed: int, **kw) -> dict:
    """Kernel MMD^2 between generated and reference images for both conditioning modes.

    The RBF bandwidth is the median heuristic on the reference set alone, so
    both modes are scored with the same kernel.
    """
    ref = downsample_flatten(reference_images)
    half = len(ref.vectors) // 2
    bw = median_bandwidth(ref.vectors[:half], ref.vectors[half:])
    shape = reference_images.shape[1:]
    out = {}
    for mode in (ESTIMATE, PREVIOUS):
        _, images = sample_pairs(lesion, brain, timeline, shape, n, seed, mode, **kw)
        out[mode] = {"mmd2": mmd2(downsample_flatten(images), ref, kernel="rbf", bandwidth=bw),
                     "mean_intensity": float(images.mean())}
    out["bandwidth"] = bw
    out["estimate_better"] = out[ESTIMATE]["mmd2"] < out[PREVIOUS]["mmd2"]
    return out
