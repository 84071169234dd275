"""Procedural brain-like phantoms and randomized pseudo-lesions.

A healthy phantom is a rotated elliptical "brain" on a -1 background: a
cortical band, brighter interior tissue and two dark ventricles, blurred and
overlaid with low-amplitude smooth texture. Lesions are thresholded smooth
noise blobs inside the brain; embedding adds a feathered intensity shift
confined to the mask. Every draw is keyed by an integer seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numerics import Field, InvalidRangeError, check_same_shape, load_ubt, save_ubt, substream

SPLITS = {"train": 0, "test": 1, "val": 2}

# substream tags
_GEOMETRY, _TEXTURE, _LESION, _EMBED = 0, 1, 2, 3


@dataclass
class PhantomSpec:
    size: int = 48
    brain_a: tuple[float, float] = (17.0, 20.0)
    brain_b: tuple[float, float] = (14.0, 17.0)
    center_jitter: float = 2.0
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    cortex_width: tuple[float, float] = (2.5, 4.0)
    cortex_intensity: tuple[float, float] = (-0.2, 0.1)
    tissue_intensity: tuple[float, float] = (0.3, 0.55)
    ventricle_intensity: tuple[float, float] = (-0.75, -0.45)
    ventricle_a: tuple[float, float] = (1.5, 3.0)
    ventricle_b: tuple[float, float] = (4.0, 7.0)
    ventricle_offset: tuple[float, float] = (2.5, 4.5)
    texture_amplitude: float = 0.05
    texture_smoothing: float = 1.5
    smoothing: float = 0.7
    margin: int = 2

    def validate(self) -> None:
        reach = max(self.brain_a[1], self.brain_b[1]) + self.center_jitter
        if reach + self.margin > self.size / 2.0:
            raise InvalidRangeError(f"brain reach {reach:.1f} px leaves less than {self.margin} px margin")
        if self.texture_amplitude < 0 or self.smoothing < 0:
            raise InvalidRangeError("texture amplitude and smoothing must be non-negative")


@dataclass
class LesionSpec:
    blob_count: tuple[int, int] = (0, 4)
    blob_scale: tuple[float, float] = (1.0, 6.0)
    mode: str = "mixed"
    shift: tuple[float, float] = (0.35, 0.75)
    softness: float = 1.0
    noise_amplitude: float = 0.4
    noise_smoothing: float = 1.5
    texture_amplitude: float = 0.25
    interior_margin: int = 2
    max_area_frac: float = 0.35

    def validate(self) -> None:
        if self.mode not in ("hypo", "hyper", "mixed"):
            raise InvalidRangeError(f"unknown lesion mode {self.mode!r}")
        lo, hi = self.blob_count
        if lo < 0 or hi < lo:
            raise InvalidRangeError(f"bad blob count range {self.blob_count}")
        if not 0.0 <= self.max_area_frac <= 0.35:
            raise InvalidRangeError("lesion area cap must lie in [0, 0.35]")


@dataclass
class _Geometry:
    cy: float
    cx: float
    theta: float
    a: float
    b: float
    cortex: float
    i_cortex: float
    i_tissue: float
    i_vent: float
    va: float
    vb: float
    voff: float


def _draw_geometry(spec: PhantomSpec, seed: int) -> _Geometry:
    rng = substream(seed, _GEOMETRY)
    u = lambda r: rng.uniform(*r)
    c = (spec.size - 1) / 2.0
    return _Geometry(
        cy=c + rng.uniform(-spec.center_jitter, spec.center_jitter),
        cx=c + rng.uniform(-spec.center_jitter, spec.center_jitter),
        theta=np.deg2rad(u(spec.rotation_deg)),
        a=u(spec.brain_a), b=u(spec.brain_b), cortex=u(spec.cortex_width),
        i_cortex=u(spec.cortex_intensity), i_tissue=u(spec.tissue_intensity),
        i_vent=u(spec.ventricle_intensity),
        va=u(spec.ventricle_a), vb=u(spec.ventricle_b), voff=u(spec.ventricle_offset),
    )


def _frame(spec: PhantomSpec, g: _Geometry):
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    dy, dx = yy - g.cy, xx - g.cx
    u = np.cos(g.theta) * dx + np.sin(g.theta) * dy
    v = -np.sin(g.theta) * dx + np.cos(g.theta) * dy
    return u, v


def _inside(u, v, a, b):
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def phantom_layers(spec: PhantomSpec, seed: int) -> dict[str, Field]:
    """Intermediate products: piecewise-constant map, brain region and texture."""
    spec.validate()
    g = _draw_geometry(spec, seed)
    u, v = _frame(spec, g)
    brain = _inside(u, v, g.a, g.b)
    tissue = _inside(u, v, g.a - g.cortex, g.b - g.cortex)
    vent = _inside(u - g.voff, v, g.va, g.vb) | _inside(u + g.voff, v, g.va, g.vb)
    piece = np.full(u.shape, -1.0)
    piece[brain] = g.i_cortex
    piece[tissue] = g.i_tissue
    piece[tissue & vent] = g.i_vent

    rng = substream(seed, _TEXTURE)
    noise = rng.standard_normal(u.shape)
    texture = np.zeros_like(piece)
    if spec.texture_amplitude > 0:
        sm = ndimage.gaussian_filter(noise, spec.texture_smoothing, mode="reflect")
        texture = spec.texture_amplitude * sm / (sm.std() + 1e-12)
    return {"piecewise": piece, "region": brain.astype(np.float64), "texture": texture}


def generate_healthy(spec: PhantomSpec, seed: int) -> Field:
    layers = phantom_layers(spec, seed)
    base = layers["piecewise"]
    region = layers["region"]
    if spec.smoothing > 0:
        base = ndimage.gaussian_filter(base, spec.smoothing, mode="nearest")
        region = ndimage.gaussian_filter(region, spec.smoothing, mode="constant")
    return np.clip(base + region * layers["texture"], -1.0, 1.0)


def brain_region(spec: PhantomSpec, seed: int) -> Field:
    return phantom_layers(spec, seed)["region"]


def generate_lesion_mask(spec: LesionSpec, region: Field, seed: int) -> Field:
    """Union of thresholded noisy blobs inside the (eroded) brain region."""
    spec.validate()
    region = np.asarray(region) > 0.5
    if not region.any():
        raise InvalidRangeError("brain region is empty")
    interior = region
    if spec.interior_margin > 0:
        eroded = ndimage.binary_erosion(region, iterations=spec.interior_margin)
        if eroded.any():
            interior = eroded
    rng = substream(seed, _LESION)
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    mask = np.zeros(region.shape, dtype=bool)
    cap = spec.max_area_frac * region.sum()
    centers = np.argwhere(interior)
    yy, xx = np.mgrid[0:region.shape[0], 0:region.shape[1]].astype(np.float64)
    for _ in range(n_blobs):
        cy, cx = centers[rng.integers(len(centers))]
        r = rng.uniform(*spec.blob_scale)
        noise = ndimage.gaussian_filter(rng.standard_normal(region.shape), spec.noise_smoothing, mode="reflect")
        noise /= noise.std() + 1e-12
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        blob = np.exp(-d2 / (2.0 * r * r)) * (1.0 + spec.noise_amplitude * noise) > 0.5
        candidate = (mask | blob) & interior
        if candidate.sum() <= cap:
            mask = candidate
    return mask.astype(np.float64)


def soft_mask(mask: Field, softness: float) -> Field:
    """Feather a binary mask inwards; support never leaves the mask."""
    mask = np.asarray(mask) > 0.5
    if softness <= 0:
        return mask.astype(np.float64)
    depth = ndimage.distance_transform_edt(mask)
    return np.minimum(1.0, depth / (softness + 1.0))


def lesion_profile(spec: LesionSpec, shape, seed: int) -> tuple[float, Field]:
    """Signed intensity shift and multiplicative texture used by :func:`embed_lesion`."""
    rng = substream(seed, _EMBED)
    if spec.mode == "hypo":
        sign = -1.0
    elif spec.mode == "hyper":
        sign = 1.0
    else:
        sign = -1.0 if rng.random() < 0.5 else 1.0
    shift = sign * rng.uniform(*spec.shift)
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), 1.0, mode="reflect")
    tex = np.clip(1.0 + spec.texture_amplitude * tex / (tex.std() + 1e-12), 0.25, 1.75)
    return shift, tex


def embed_lesion(healthy: Field, mask: Field, spec: LesionSpec, seed: int) -> Field:
    check_same_shape(healthy, mask)
    spec.validate()
    shift, tex = lesion_profile(spec, np.shape(healthy), seed)
    soft = soft_mask(mask, spec.softness)
    return np.clip(healthy + soft * shift * tex, -1.0, 1.0)


# -- datasets -------------------------------------------------------------------

def sample_seed(base_seed: int, split: str, index: int) -> int:
    seq = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(SPLITS[split], int(index)))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def make_triple(pspec: PhantomSpec, lspec: LesionSpec, seed: int):
    """(mask, pathological, healthy) with ``embed_lesion(healthy, mask) == pathological``."""
    healthy = generate_healthy(pspec, seed)
    mask = generate_lesion_mask(lspec, brain_region(pspec, seed), seed)
    path = embed_lesion(healthy, mask, lspec, seed)
    return mask, path, healthy


def make_triples(n: int, pspec: PhantomSpec, lspec: LesionSpec, base_seed: int, split: str = "train"):
    triples = [make_triple(pspec, lspec, sample_seed(base_seed, split, i)) for i in range(n)]
    masks, paths, healthies = (np.stack(x) for x in zip(*triples)) if triples else (np.empty((0,)),) * 3
    return masks, paths, healthies


@dataclass
class DatasetManifest:
    counts: dict
    base_seed: int
    phantom: dict = field(default_factory=dict)
    lesion: dict = field(default_factory=dict)


def write_dataset(root, counts: dict[str, int], pspec: PhantomSpec, lspec: LesionSpec, base_seed: int) -> Path:
    """Write ``<root>/<split>/<i>.{mask,path,healthy}.ubt`` and ``<root>/manifest.json``."""
    root = Path(root)
    for split, n in counts.items():
        if split not in SPLITS:
            raise InvalidRangeError(f"unknown split {split!r}")
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            mask, path, healthy = make_triple(pspec, lspec, sample_seed(base_seed, split, i))
            save_ubt(d / f"{i}.mask.ubt", mask)
            save_ubt(d / f"{i}.path.ubt", path)
            save_ubt(d / f"{i}.healthy.ubt", healthy)
    manifest = DatasetManifest(counts=dict(counts), base_seed=int(base_seed),
                               phantom=asdict(pspec), lesion=asdict(lspec))
    (root / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True))
    return root


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    return DatasetManifest(**json.loads(path.read_text()))


def load_split(root, split: str):
    """Return stacked ``(masks, paths, healthies)`` for one split."""
    root = Path(root)
    n = int(read_manifest(root).counts.get(split, 0))
    d = root / split
    masks = np.stack([load_ubt(d / f"{i}.mask.ubt") for i in range(n)])
    paths = np.stack([load_ubt(d / f"{i}.path.ubt") for i in range(n)])
    healthies = np.stack([load_ubt(d / f"{i}.healthy.ubt") for i in range(n)])
    return masks, paths, healthies


def spec_from_dict(cls, data: dict | None):
    """Build a spec dataclass, rejecting unknown keys; lists become tuples."""
    data = dict(data or {})
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
