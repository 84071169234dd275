"""Image-pair fidelity metrics and set-level distribution distances.

Pair metrics (L1, PSNR, SSIM) take fields in [-1, 1]; PSNR and SSIM remap to
[0, 1] with a peak value of 1. Set metrics work on feature matrices of shape
(N, d) produced by one of the featurizers below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .numerics import Field, ShapeMismatchError, check_same_shape

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# -- pair metrics ---------------------------------------------------------------

def l1(a: Field, b: Field, region: Field | None = None) -> float:
    """Mean absolute difference, optionally weighted by ``region`` (e.g. a mask)."""
    check_same_shape(a, b)
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if region is None:
        return float(diff.mean())
    w = np.asarray(region, dtype=np.float64)
    total = w.sum()
    return float((diff * w).sum() / total) if total > 0 else 0.0


def psnr(a: Field, b: Field) -> float:
    check_same_shape(a, b)
    mse = float(np.mean(((np.asarray(a) - np.asarray(b)) / 2.0) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _valid_filter(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, g1, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g1, axis=1, mode="constant")
    r = len(g1) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a: Field, b: Field) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5)."""
    check_same_shape(a, b)
    x = (np.asarray(a, dtype=np.float64) + 1.0) / 2.0
    y = (np.asarray(b, dtype=np.float64) + 1.0) / 2.0
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"SSIM needs a 2D field of at least {SSIM_WINDOW}px, got {x.shape}")
    g = np.exp(-(np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2) ** 2 / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    mx, my = _valid_filter(x, g), _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


# -- featurizers ----------------------------------------------------------------

@dataclass
class FeatureEmbedding:
    vectors: np.ndarray
    featurizer: str

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])


def downsample_flatten(images: Field, factor: int = 4) -> FeatureEmbedding:
    """Block-average by ``factor`` and flatten."""
    imgs = np.asarray(images, dtype=np.float64)
    n, h, w = imgs.shape
    h2, w2 = h // factor, w // factor
    blocks = imgs[:, :h2 * factor, :w2 * factor].reshape(n, h2, factor, w2, factor).mean(axis=(2, 4))
    return FeatureEmbedding(blocks.reshape(n, -1), f"downsample-flatten({factor})")


def random_projection(images: Field, d: int = 64, seed: int = 0) -> FeatureEmbedding:
    imgs = np.asarray(images, dtype=np.float64)
    flat = imgs.reshape(imgs.shape[0], -1)
    proj = np.random.default_rng(seed).standard_normal((flat.shape[1], d)) / np.sqrt(flat.shape[1])
    return FeatureEmbedding(flat @ proj, f"random-projection(d={d},seed={seed})")


FEATURIZERS = {"downsample-flatten": downsample_flatten, "random-projection": random_projection}


def _features(x) -> np.ndarray:
    return x.vectors if isinstance(x, FeatureEmbedding) else np.asarray(x, dtype=np.float64)


# -- kernel two-sample statistics -----------------------------------------------------

def sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample (distinct pairs)."""
    z = np.vstack([x, y])
    d = sq_dists(z, z)[np.triu_indices(len(z), k=1)]
    med = float(np.median(d))
    return float(np.sqrt(med)) if med > 0 else 1.0


def rbf_kernel(x, y, bandwidth: float) -> np.ndarray:
    return np.exp(-sq_dists(x, y) / (2.0 * bandwidth ** 2))


def poly3_kernel(x, y) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2_from_kernels(kxx, kyy, kxy, unbiased: bool) -> float:
    n, m = kxx.shape[0], kyy.shape[0]
    if unbiased:
        if n < 2 or m < 2:
            raise ValueError("unbiased MMD needs at least two samples per set")
        txx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        tyy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    else:
        txx = kxx.mean()
        tyy = kyy.mean()
    return float(txx + tyy - 2.0 * kxy.mean())


def mmd2(X, Y, kernel: str = "rbf", bandwidth: float | None = None, unbiased: bool = True) -> float:
    """Squared MMD; unbiased U-statistic by default, biased V-statistic on request."""
    x, y = _features(X), _features(Y)
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatchError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if kernel == "rbf":
        bw = median_bandwidth(x, y) if bandwidth is None else bandwidth
        k = lambda a, b: rbf_kernel(a, b, bw)
    elif kernel == "poly3":
        k = poly3_kernel
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    return _mmd2_from_kernels(k(x, x), k(y, y), k(x, y), unbiased)


@dataclass
class PermutationResult:
    statistic: float
    p_value: float
    null_quantile: float
    null: np.ndarray

    def rejects(self, level: float = 0.05) -> bool:
        return self.p_value <= level


def mmd_permutation_test(X, Y, kernel: str = "rbf", n_perm: int = 200, seed: int = 0,
                         level: float = 0.05) -> PermutationResult:
    """Permutation test on the unbiased MMD^2 with a kernel fixed from the pooled sample."""
    x, y = _features(X), _features(Y)
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatchError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    z = np.vstack([x, y])
    n = len(x)
    if kernel == "rbf":
        kz = rbf_kernel(z, z, median_bandwidth(x, y))
    elif kernel == "poly3":
        kz = poly3_kernel(z, z)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")

    def stat(idx):
        a, b = idx[:n], idx[n:]
        return _mmd2_from_kernels(kz[np.ix_(a, a)], kz[np.ix_(b, b)], kz[np.ix_(a, b)], True)

    observed = stat(np.arange(len(z)))
    rng = np.random.default_rng(seed)
    null = np.array([stat(rng.permutation(len(z))) for _ in range(n_perm)])
    p = (1 + np.sum(null >= observed)) / (n_perm + 1)
    return PermutationResult(observed, float(p), float(np.quantile(null, 1.0 - level)), null)


def kid(X, Y, n_subsets: int = 10, subset_size: int | None = None, seed: int = 0,
        unbiased: bool = True) -> float:
    """Polynomial-kernel MMD^2 averaged over random subsets of size ``min(N, 100)``."""
    x, y = _features(X), _features(Y)
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatchError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    m = min(len(x), len(y), 100) if subset_size is None else subset_size
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        a = x[rng.choice(len(x), m, replace=False)]
        b = y[rng.choice(len(y), m, replace=False)]
        vals.append(_mmd2_from_kernels(poly3_kernel(a, a), poly3_kernel(b, b), poly3_kernel(a, b), unbiased))
    return float(np.mean(vals))


# -- Frechet distance ------------------------------------------------------------

@dataclass
class MomentSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, X) -> "MomentSummary":
        x = _features(X)
        return cls(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def _psd_sqrt(a: np.ndarray, what: str) -> np.ndarray:
    if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ValueError(f"{what} is not symmetric")
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    if w.min() < -1e-10 * max(1.0, np.abs(w).max()):
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_distance(A: MomentSummary, B: MomentSummary) -> float:
    mu_a, mu_b = np.atleast_1d(A.mean), np.atleast_1d(B.mean)
    ca, cb = np.atleast_2d(A.cov), np.atleast_2d(B.cov)
    if mu_a.shape != mu_b.shape or ca.shape != cb.shape:
        raise ShapeMismatchError("moment summaries have different dimensions")
    sa = _psd_sqrt(ca, "first covariance")
    _psd_sqrt(cb, "second covariance")
    mid = sa @ cb @ sa
    w = np.linalg.eigvalsh((mid + mid.T) / 2.0)
    tr_sqrt = np.sqrt(np.maximum(w, 0.0)).sum()
    diff = mu_a - mu_b
    return float(max(0.0, diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt))
