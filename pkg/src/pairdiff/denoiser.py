"""Noise-prediction backends.

Two interchangeable models expose ``predict_noise(noisy, cond, t)`` on batches of
shape ``(N, H, W)``:

* :class:`GaussianOracle` -- exact noise prediction for Gaussian data, used to
  check sampler math against a known target law.
* :class:`ConvDenoiser` -- a five-layer 3x3 convolutional net with a
  sinusoidal time embedding and a hand-written backward pass.

Convolutions run on a flattened, zero-padded layout: a batch becomes an array
of shape ``(margin + N*(H+2)*(W+2) + margin, C)`` so that each of the nine 3x3
taps is a contiguous row slice at a fixed offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .numerics import Field, ShapeMismatchError, check_same_shape
from .schedule import NoiseSchedule

CHANNELS = (2, 16, 32, 32, 16, 1)
N_LAYERS = len(CHANNELS) - 1
TIME_PAIRS = 8
TIME_DIM = 2 * TIME_PAIRS
TIME_FREQS = 1000.0 ** (np.arange(TIME_PAIRS) / (TIME_PAIRS - 1))


# -- oracle -------------------------------------------------------------------------

@dataclass
class GaussianOracleSpec:
    mu: Field | float
    sigma2: float

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")


def oracle_posterior_mean(spec: GaussianOracleSpec, schedule: NoiseSchedule, noisy: Field, t) -> Field:
    ab = _per_sample(schedule.alpha_bar, t, np.ndim(noisy))
    gain = np.sqrt(ab) * spec.sigma2 / (ab * spec.sigma2 + 1.0 - ab)
    return spec.mu + gain * (noisy - np.sqrt(ab) * spec.mu)


def oracle_predict_noise(spec: GaussianOracleSpec, schedule: NoiseSchedule, noisy: Field, t) -> Field:
    """Exact E[eps | x_t] when x_0 ~ N(mu, sigma2 I)."""
    ab = _per_sample(schedule.alpha_bar, t, np.ndim(noisy))
    x0 = oracle_posterior_mean(spec, schedule, noisy, t)
    return (noisy - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


class GaussianOracle:
    """Noise predictor for N(mu, sigma2 I) data; ignores its condition input."""

    def __init__(self, schedule: NoiseSchedule, mu: Field | float = 0.0, sigma2: float = 1.0):
        self.schedule = schedule
        self.spec = GaussianOracleSpec(mu=mu, sigma2=float(sigma2))

    def predict_noise(self, noisy: Field, cond: Field | None, t) -> Field:
        return oracle_predict_noise(self.spec, self.schedule, noisy, t)

    def posterior_mean(self, noisy: Field, t) -> Field:
        return oracle_posterior_mean(self.spec, self.schedule, noisy, t)

    def x0_variance(self, t) -> float:
        """Var[x_0 | x_t]; lets the sampler use the exact reverse-kernel variance."""
        ab = self.schedule.alpha_bar[t]
        s2 = self.spec.sigma2
        return s2 * (1.0 - ab) / (ab * s2 + 1.0 - ab)


def _per_sample(table: np.ndarray, t, ndim: int):
    vals = table[np.asarray(t)]
    if np.ndim(vals) == 0:
        return vals
    return vals.reshape(vals.shape + (1,) * (ndim - vals.ndim))


# -- convolutional network --------------------------------------------------------

def param_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for l in range(N_LAYERS):
        cin, cout = CHANNELS[l], CHANNELS[l + 1]
        shapes[f"layer{l}.weight"] = (cout, cin, 3, 3)
        shapes[f"layer{l}.bias"] = (cout,)
    shapes["time.weight"] = (CHANNELS[1], TIME_DIM)
    shapes["time.bias"] = (CHANNELS[1],)
    return shapes


def init_params(seed_or_rng, zero_final: bool = True) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases; the last layer starts at zero by default."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    params = {}
    for name, shape in param_shapes().items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            fan_in, fan_out = shape[1] * 9, shape[0] * 9
        else:
            fan_in, fan_out = shape[1], shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape)
    if zero_final:
        last = N_LAYERS - 1
        params[f"layer{last}.weight"][:] = 0.0
        params[f"layer{last}.bias"][:] = 0.0
    return params


def time_embedding(t, T: int) -> np.ndarray:
    """(N, 16) sine/cosine features of t/T at geometrically spaced frequencies."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / float(T)
    ang = s[:, None] * TIME_FREQS[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class _Grid:
    """Index bookkeeping for the flat padded layout."""

    def __init__(self, n: int, h: int, w: int, dtype):
        self.n, self.h, self.w = n, h, w
        self.hp, self.wp = h + 2, w + 2
        self.p = n * self.hp * self.wp
        self.m = self.wp + 1
        self.offsets = [(ky - 1) * self.wp + (kx - 1) for ky in range(3) for kx in range(3)]
        inner = np.zeros((n, self.hp, self.wp, 1), dtype=dtype)
        inner[:, 1:-1, 1:-1] = 1.0
        self.inner = inner.reshape(self.p, 1)
        self.dtype = dtype

    def embed(self, interior: np.ndarray) -> np.ndarray:
        """(N, H, W, C) -> padded flat buffer (m + p + m, C)."""
        c = interior.shape[-1]
        buf = np.zeros((self.p + 2 * self.m, c), dtype=self.dtype)
        view = buf[self.m:self.m + self.p].reshape(self.n, self.hp, self.wp, c)
        view[:, 1:-1, 1:-1] = interior
        return buf

    def wrap(self, rows: np.ndarray) -> np.ndarray:
        """(p, C) already zero outside the interior -> padded flat buffer."""
        buf = np.zeros((self.p + 2 * self.m, rows.shape[1]), dtype=self.dtype)
        buf[self.m:self.m + self.p] = rows
        return buf

    def interior(self, rows: np.ndarray) -> np.ndarray:
        c = rows.shape[-1]
        return rows.reshape(self.n, self.hp, self.wp, c)[:, 1:-1, 1:-1]

    def tap(self, buf: np.ndarray, k: int) -> np.ndarray:
        o = self.m + self.offsets[k]
        return buf[o:o + self.p]


def _conv_forward(grid: _Grid, buf: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    cout, cin = weight.shape[:2]
    if cin < cout:
        cols = np.concatenate([grid.tap(buf, k) for k in range(9)], axis=1)
        wmat = weight.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
        z = cols @ wmat
    else:
        cols = None
        wcat = weight.transpose(1, 2, 3, 0).reshape(cin, 9 * cout)
        y = buf @ wcat
        z = grid.tap(y[:, 0:cout], 0).copy()
        for k in range(1, 9):
            z += grid.tap(y[:, k * cout:(k + 1) * cout], k)
    z += bias
    return z, cols


def _conv_backward(grid: _Grid, buf: np.ndarray, cols, weight: np.ndarray, g: np.ndarray,
                   need_input: bool = True):
    """``g`` is dL/dz on the padded rows, already zero outside the interior."""
    cout, cin = weight.shape[:2]
    if cols is not None:
        dwmat = cols.T @ g
    else:
        dwmat = np.concatenate([grid.tap(buf, k).T @ g for k in range(9)], axis=0)
    dweight = dwmat.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    dbias = g.sum(axis=0)
    dbuf = None
    if need_input:
        wmat = weight.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
        zc = g @ wmat.T
        dbuf = np.zeros((grid.p + 2 * grid.m, cin), dtype=g.dtype)
        for k in range(9):
            o = grid.m + grid.offsets[k]
            dbuf[o:o + grid.p] += zc[:, k * cin:(k + 1) * cin]
    return dweight, dbias, dbuf


def _silu(z):
    s = expit(z)
    return z * s, s


@dataclass
class ForwardCache:
    grid: _Grid
    bufs: list
    cols: list
    zs: list
    sig: list
    emb: np.ndarray
    params: dict = field(repr=False)


def conv_forward(params: dict, noisy: Field, cond: Field, t, T: int, *, dtype=np.float64,
                 keep_cache: bool = False):
    """Predict noise for a batch. Returns ``(eps, cache)``; cache is None unless requested."""
    noisy = np.asarray(noisy)
    cond = np.asarray(cond)
    check_same_shape(noisy, cond)
    single = noisy.ndim == 2
    if single:
        noisy, cond = noisy[None], cond[None]
    if noisy.ndim != 3:
        raise ShapeMismatchError(f"expected (N, H, W) input, got {noisy.shape}")
    n, h, w = noisy.shape
    t_arr = np.broadcast_to(np.asarray(t), (n,))
    p = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    grid = _Grid(n, h, w, dtype)

    emb = time_embedding(t_arr, T).astype(dtype)
    tbias = emb @ p["time.weight"].T + p["time.bias"]

    buf = grid.embed(np.stack([noisy, cond], axis=-1).astype(dtype))
    bufs, cols_list, zs, sigs = [buf], [], [], []
    for l in range(N_LAYERS):
        z, cols = _conv_forward(grid, buf, p[f"layer{l}.weight"], p[f"layer{l}.bias"])
        if l == 0:
            z = (z.reshape(n, -1, z.shape[1]) + tbias[:, None, :]).reshape(z.shape)
        cols_list.append(cols)
        zs.append(z)
        if l < N_LAYERS - 1:
            a, s = _silu(z)
            sigs.append(s)
            buf = grid.wrap(a * grid.inner)
            bufs.append(buf)
    out = grid.interior(zs[-1])[..., 0]
    out = np.array(out, dtype=np.float64)
    if single:
        out = out[0]
    cache = ForwardCache(grid, bufs, cols_list, zs, sigs, emb, p) if keep_cache else None
    return out, cache


def conv_backward_cached(cache: ForwardCache, grad_out: Field, *, need_input: bool = False):
    """Reverse pass from a stored forward. Returns ``(param_grads, (d_noisy, d_cond))``."""
    grid, p = cache.grid, cache.params
    g_int = np.asarray(grad_out, dtype=grid.dtype)
    if g_int.ndim == 2:
        g_int = g_int[None]
    g = grid.embed(g_int[..., None])[grid.m:grid.m + grid.p]
    grads = {}
    for l in reversed(range(N_LAYERS)):
        if l < N_LAYERS - 1:
            z, s = cache.zs[l], cache.sig[l]
            g = g * (s * (1.0 + z * (1.0 - s)))
        if l == 0:
            gt = g.reshape(grid.n, -1, g.shape[1]).sum(axis=1)
            grads["time.weight"] = gt.T @ cache.emb
            grads["time.bias"] = gt.sum(axis=0)
        want = l > 0 or need_input
        dw, db, dbuf = _conv_backward(grid, cache.bufs[l], cache.cols[l], p[f"layer{l}.weight"], g, want)
        grads[f"layer{l}.weight"] = dw
        grads[f"layer{l}.bias"] = db
        if dbuf is not None:
            g = dbuf[grid.m:grid.m + grid.p] * grid.inner
    grads = {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}
    d_in = None
    if need_input:
        d = np.asarray(grid.interior(g), dtype=np.float64)
        d_in = (d[..., 0], d[..., 1])
    return grads, d_in


def conv_backward(params: dict, noisy: Field, cond: Field, t, T: int, grad_out: Field, *, dtype=np.float64):
    """Gradients of ``sum(grad_out * conv_forward(...))`` w.r.t. parameters and both inputs."""
    _, cache = conv_forward(params, noisy, cond, t, T, dtype=dtype, keep_cache=True)
    grads, (d_noisy, d_cond) = conv_backward_cached(cache, grad_out, need_input=True)
    if np.ndim(noisy) == 2:
        d_noisy, d_cond = d_noisy[0], d_cond[0]
    return grads, (d_noisy, d_cond)


class ConvDenoiser:
    def __init__(self, params: dict, T: int, dtype=np.float64):
        self.params = params
        self.T = int(T)
        self.dtype = dtype

    @classmethod
    def initialize(cls, seed, T: int, zero_final: bool = True, dtype=np.float64) -> "ConvDenoiser":
        return cls(init_params(seed, zero_final=zero_final), T, dtype)

    def predict_noise(self, noisy: Field, cond: Field, t) -> Field:
        out, _ = conv_forward(self.params, noisy, cond, t, self.T, dtype=self.dtype)
        return out

    def forward(self, noisy: Field, cond: Field, t, keep_cache: bool = True):
        return conv_forward(self.params, noisy, cond, t, self.T, dtype=self.dtype, keep_cache=keep_cache)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


# -- optimiser -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise KeyError("params, grads and optimiser state must have identical keys")
    step = state.step + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step)
