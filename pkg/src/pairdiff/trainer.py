"""Paired training loop: L = L_lesion + L_brain on phantom (mask, image) pairs.

Each step draws a minibatch, a timestep per pair and independent noise for
both branches. The cross-branch conditions are one-step estimates from the
current networks, computed without gradient, and each network then takes one
Adam step on its own noise-prediction loss.

All randomness for step ``s`` comes from the substream ``(seed, 2, s)``, so the
RNG state is fully described by ``(seed, step)`` and resuming from a
checkpoint reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import AdamState, ConvDenoiser, adam_step, conv_backward_cached, init_params, param_shapes
from .numerics import mask_to_signed, read_ubt, substream, write_ubt
from .paired import BRAIN, LESION, estimate_from_alpha_bar
from .phantom import LesionSpec, PhantomSpec, load_split, make_triples, spec_from_dict
from .schedule import NoiseSchedule, build_linear_schedule, marginal_noise

log = logging.getLogger(__name__)

CKPT_MAGIC = b"USBC"
CKPT_VERSION = 1
BRANCHES = (LESION, BRAIN)

# substream tags
_INIT, _STEP = 1, 2


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    T: int = 1024
    beta1: float = 1e-4
    betaT: float = 0.02
    log_every: int = 1
    ckpt_every: int = 0
    data: str | None = None
    n_train: int = 512
    data_seed: int = 1234
    compute_dtype: str = "float32"
    phantom: dict = field(default_factory=dict)
    lesion: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")


@dataclass
class TrainState:
    schedule: NoiseSchedule
    models: dict
    optim: dict
    seed: int
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    schedule = build_linear_schedule(config.T, config.beta1, config.betaT)
    dtype = np.dtype(config.compute_dtype).type
    models, optim = {}, {}
    for b, branch in enumerate(BRANCHES):
        params = init_params(substream(config.seed, _INIT, b))
        models[branch] = ConvDenoiser(params, config.T, dtype)
        optim[branch] = AdamState.zeros_like(params)
    return TrainState(schedule, models, optim, config.seed, 0)


def train_step(state: TrainState, masks: np.ndarray, images: np.ndarray, rng: np.random.Generator,
               lr: float) -> tuple[float, float]:
    """One joint update on a batch of signed masks and images, both (B, H, W)."""
    sched = state.schedule
    lesion, brain = state.models[LESION], state.models[BRAIN]
    bsz = masks.shape[0]
    t = rng.integers(1, sched.T + 1, size=bsz)
    eps_x = rng.standard_normal(masks.shape)
    eps_y = rng.standard_normal(images.shape)
    x_t = marginal_noise(sched, masks, t, eps_x)
    y_t = marginal_noise(sched, images, t, eps_y)
    ab = sched.alpha_bar[t][:, None, None]

    # cross-branch conditions, held constant for the gradient
    x0_hat = estimate_from_alpha_bar(lesion.predict_noise(x_t, y_t, t), x_t, ab)
    y0_hat = estimate_from_alpha_bar(brain.predict_noise(y_t, x_t, t), y_t, ab)

    losses = []
    for branch, model, noisy, cond, target in ((LESION, lesion, x_t, y0_hat, eps_x),
                                               (BRAIN, brain, y_t, x0_hat, eps_y)):
        pred, cache = model.forward(noisy, cond, t)
        resid = pred - target
        losses.append(float(np.mean(resid * resid)))
        grads, _ = conv_backward_cached(cache, 2.0 * resid / resid.size)
        model.params, state.optim[branch] = adam_step(model.params, grads, state.optim[branch], lr)
    return losses[0], losses[1]


def load_training_pairs(config: TrainConfig):
    """Signed masks and images used for training."""
    if config.data:
        masks, paths, _ = load_split(config.data, "train")
    else:
        pspec = spec_from_dict(PhantomSpec, config.phantom)
        lspec = spec_from_dict(LesionSpec, config.lesion)
        masks, paths, _ = make_triples(config.n_train, pspec, lspec, config.data_seed, "train")
    return mask_to_signed(masks), np.asarray(paths, dtype=np.float64)


def train(config: TrainConfig, out_dir, resume: str | Path | None = None, data=None) -> Path:
    """Run (or resume) training; writes ``loss.csv``, periodic and final checkpoints."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    masks, images = data if data is not None else load_training_pairs(config)
    state = init_state(config)
    if resume is not None:
        state = load_checkpoint(resume, compute_dtype=config.compute_dtype)
        if state.seed != config.seed:
            raise ValueError(f"checkpoint seed {state.seed} differs from config seed {config.seed}")
    n = masks.shape[0]
    mode = "a" if resume is not None and (out / "loss.csv").exists() else "w"
    with open(out / "loss.csv", mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "L_lesion", "L_brain"])
        while state.step < config.steps:
            s = state.step + 1
            rng = substream(config.seed, _STEP, s)
            idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
            ll, lb = train_step(state, masks[idx], images[idx], rng, config.lr)
            if not (np.isfinite(ll) and np.isfinite(lb)):
                raise FloatingPointError(f"non-finite loss at step {s}")
            state.step = s
            if s % config.log_every == 0:
                writer.writerow([s, repr(ll), repr(lb)])
            if config.ckpt_every and s % config.ckpt_every == 0:
                save_checkpoint(out / f"ckpt_{s:06d}.usbc", state)
                log.info("step %d: L_lesion=%.4f L_brain=%.4f", s, ll, lb)
    final = out / "final.usbc"
    save_checkpoint(final, state)
    return final


def read_loss_log(path) -> np.ndarray:
    """(steps, 3) array of step, L_lesion, L_brain."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows


def smoothed(values: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# -- checkpoints --------------------------------------------------------------------

def checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = dict(state.schedule.tensors())
    for branch in BRANCHES:
        for name, value in state.models[branch].params.items():
            tensors[f"{branch}.{name}"] = value
        opt = state.optim[branch]
        for name in opt.m:
            tensors[f"optim.{branch}.{name}.m"] = opt.m[name]
            tensors[f"optim.{branch}.{name}.v"] = opt.v[name]
        tensors[f"optim.{branch}.step"] = np.array(float(opt.step))
    tensors["rng.seed"] = np.array(float(state.seed))
    tensors["train.step"] = np.array(float(state.step))
    return tensors


def write_checkpoint(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(CKPT_MAGIC)
    fh.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        write_ubt(fh, tensors[name])


def read_checkpoint(fh) -> dict[str, np.ndarray]:
    if fh.read(4) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", fh.read(8))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        tensors[name] = read_ubt(fh)
    return tensors


def save_checkpoint(path, state: TrainState) -> None:
    buf = io.BytesIO()
    write_checkpoint(buf, checkpoint_tensors(state))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, compute_dtype: str = "float64") -> TrainState:
    try:
        with open(path, "rb") as fh:
            tensors = read_checkpoint(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    schedule = NoiseSchedule.from_tensors(tensors)
    dtype = np.dtype(compute_dtype).type
    names = list(param_shapes())
    models, optim = {}, {}
    for branch in BRANCHES:
        params = {k: np.array(tensors[f"{branch}.{k}"]) for k in names}
        models[branch] = ConvDenoiser(params, schedule.T, dtype)
        optim[branch] = AdamState({k: np.array(tensors[f"optim.{branch}.{k}.m"]) for k in names},
                                  {k: np.array(tensors[f"optim.{branch}.{k}.v"]) for k in names},
                                  int(tensors[f"optim.{branch}.step"]))
    return TrainState(schedule, models, optim, int(tensors["rng.seed"]), int(tensors["train.step"]))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
