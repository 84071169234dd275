"""Command-line interface: ``pairdiff <subcommand> [options]``.

Configuration resolves as built-in defaults < JSON config file < ``USB_SEED``
(seed only) < command-line flags. Every run writes ``run_manifest.json`` into
its output directory holding the resolved configuration, seeds and input
hashes; passing that manifest back via ``--config`` reproduces the run.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .editing import H2P, P2H, GuidanceConfig, edit
from .experiments import (SWEEP_DEFAULTS, acg_ablation, guidance_sweep, heldout_cases, lcg_ablation,
                          onestep_ablation, sample_pairs)
from .gradcheck import gradcheck
from .metrics import (FEATURIZERS, MomentSummary, frechet_distance, kid, l1, mmd2, mmd_permutation_test, psnr,
                      ssim)
from .numerics import is_binary, load_ubt, map_chunks, mask_to_signed, save_pgm, save_ubt
from .paired import BRAIN, ESTIMATE, LESION, PREVIOUS, sample_conditional
from .phantom import LesionSpec, PhantomSpec, load_split, make_triples, spec_from_dict, write_dataset
from .schedule import subsample_timeline
from .trainer import TrainConfig, file_sha256, load_checkpoint, train

log = logging.getLogger("pairdiff")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4
MANIFEST = "run_manifest.json"


class ConfigError(Exception):
    pass


class CheckFailure(Exception):
    pass


DATASET_DEFAULTS = {"base_seed": 1234, "train": 512, "test": 64}
EVAL_DEFAULTS = {"featurizer": "downsample-flatten", "kernel": "rbf", "n_perm": 200, "kid_subsets": 10}
ABLATE_DEFAULTS = {"n_cases": 20, "n_samples": 100, "sample_K": 100}
# training options owned by other sections of the run config
_TRAIN_RESERVED = {"seed", "phantom", "lesion", "data", "n_train", "data_seed", "compute_dtype"}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    timeline_K: int = 300
    jobs: int = 1
    chunk_size: int = 16
    compute_dtype: str = "float32"
    phantom: dict = field(default_factory=dict)
    lesion: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    guidance: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    ablate: dict = field(default_factory=dict)

    def phantom_spec(self) -> PhantomSpec:
        return spec_from_dict(PhantomSpec, self.phantom)

    def lesion_spec(self) -> LesionSpec:
        return spec_from_dict(LesionSpec, self.lesion)

    def guidance_config(self) -> GuidanceConfig:
        return spec_from_dict(GuidanceConfig, self.guidance)

    def train_config(self) -> TrainConfig:
        cfg = spec_from_dict(TrainConfig, self.train)
        cfg.seed = self.seed
        cfg.phantom, cfg.lesion = dict(self.phantom), dict(self.lesion)
        cfg.n_train = int(self.dataset["train"])
        cfg.data_seed = int(self.dataset["base_seed"])
        cfg.compute_dtype = self.compute_dtype
        return cfg

    def validate(self) -> None:
        for name, defaults in (("dataset", DATASET_DEFAULTS), ("eval", EVAL_DEFAULTS), ("ablate", ABLATE_DEFAULTS)):
            section = getattr(self, name)
            unknown = set(section) - set(defaults)
            if unknown:
                raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
            setattr(self, name, {**defaults, **section})
        clash = set(self.train) & _TRAIN_RESERVED
        if clash:
            raise ConfigError(f"train keys {sorted(clash)} are set at the top level of the run config")
        if self.timeline_K < 2 or self.jobs < 1 or self.chunk_size < 1:
            raise ConfigError("timeline_K must be >= 2; jobs and chunk_size >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise ConfigError("compute_dtype must be float32 or float64")
        if self.eval["featurizer"] not in FEATURIZERS:
            raise ConfigError(f"unknown featurizer {self.eval['featurizer']!r}")
        try:
            self.phantom_spec().validate()
            self.lesion_spec().validate()
            self.guidance_config().validate()
            self.train_config().validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def resolved(self) -> dict:
        """Full configuration with every section expanded to its defaults (``out`` excluded)."""
        d = asdict(self)
        del d["out"]
        d["phantom"] = asdict(self.phantom_spec())
        d["lesion"] = asdict(self.lesion_spec())
        d["guidance"] = asdict(self.guidance_config())
        tc = asdict(self.train_config())
        d["train"] = {k: v for k, v in tc.items() if k not in _TRAIN_RESERVED}
        return json.loads(json.dumps(d))


def load_config(path: str | None) -> dict:
    """Read a run config or a previous run's manifest (its ``config`` section)."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "manifest_version" in data:
        data = data["config"]
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = load_config(args.config)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**data)
    env_seed = os.environ.get("USB_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"USB_SEED must be an integer, got {env_seed!r}") from None
    for flag, attr in (("seed", "seed"), ("out", "out"), ("timeline_k", "timeline_K"), ("jobs", "jobs"),
                       ("compute_dtype", "compute_dtype")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.train = {**cfg.train, key: value}
    for flag, key in (("n_train", "train"), ("n_test", "test")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.dataset = {**cfg.dataset, key: value}
    for flag in ("alpha0", "k", "eta", "t_start_frac"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.guidance = {**cfg.guidance, flag: value}
    for flag in ("no_acg", "no_lcg"):
        if getattr(args, flag, False):
            cfg.guidance = {**cfg.guidance, flag.replace("no_", "") + "_enabled": False}
    if getattr(args, "featurizer", None) is not None:
        cfg.eval = {**cfg.eval, "featurizer": args.featurizer}
    if getattr(args, "n_cases", None) is not None:
        cfg.ablate = {**cfg.ablate, "n_cases": args.n_cases}
    cfg.validate()
    return cfg


# -- helpers ------------------------------------------------------------------------

def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict, extra: dict | None = None) -> None:
    manifest = {
        "manifest_version": 1,
        "package_version": __version__,
        "command": command,
        "config": cfg.resolved(),
        "seeds": {"run": cfg.seed, "dataset": cfg.dataset["base_seed"]},
        "inputs": {k: {"path": str(v), "sha256": input_sha256(v)} for k, v in sorted(inputs.items())},
    }
    manifest.update(extra or {})
    _write_json(out / MANIFEST, manifest)


def input_sha256(path) -> str:
    """File hash, or for a directory the hash of its sorted (name, file hash) listing."""
    p = Path(path)
    if not p.is_dir():
        return file_sha256(p)
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file()):
        h.update(f"{f.relative_to(p)}\0{file_sha256(f)}\n".encode())
    return h.hexdigest()


def _load_field(path, what: str) -> np.ndarray:
    try:
        return load_ubt(path)
    except FileNotFoundError:
        raise FileNotFoundError(f"{what} not found: {path}") from None
    except (ValueError, EOFError) as exc:
        raise OSError(f"{what} {path}: {exc}") from None


def _load_models(path, cfg: RunConfig):
    try:
        state = load_checkpoint(path, compute_dtype=cfg.compute_dtype)
    except (ValueError, EOFError, KeyError) as exc:
        raise OSError(f"checkpoint {path}: {exc}") from None
    return state


def _load_stack(path) -> np.ndarray:
    """A ``.ubt`` file, or every 2D ``.ubt`` in a directory (sorted by name), as ``(N, H, W)``."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.ubt"))
        arrays = [a for a in (_load_field(f, "field") for f in files) if a.ndim == 2]
        if not arrays:
            raise FileNotFoundError(f"no 2D .ubt fields in {p}")
        return np.stack(arrays)
    a = _load_field(p, "field")
    return a[None] if a.ndim == 2 else a


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_fields(out: Path, stem: str, fields_: np.ndarray) -> None:
    save_ubt(out / f"{stem}.ubt", fields_)
    for i, f in enumerate(fields_):
        save_pgm(out / f"{stem}_{i:04d}.pgm", f)


# -- subcommands ------------------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    counts = {k: int(cfg.dataset[k]) for k in ("train", "test")}
    write_dataset(out, counts, cfg.phantom_spec(), cfg.lesion_spec(), cfg.dataset["base_seed"])
    write_manifest(out, "phantom", cfg, {})
    return {"counts": counts}


def cmd_train(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    tc = cfg.train_config()
    inputs = {}
    data = None
    if args.data:
        masks, paths, _ = load_split(args.data, "train")
        data = (mask_to_signed(masks), paths)
        inputs["data"] = args.data
    if args.resume:
        inputs["resume"] = args.resume
    final = train(tc, out, resume=args.resume, data=data)
    write_manifest(out, "train", cfg, inputs, {"checkpoint_sha256": file_sha256(final)})
    return {"checkpoint": str(final)}


def cmd_sample_uncond(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    state = _load_models(args.ckpt, cfg)
    tl = subsample_timeline(state.schedule, cfg.timeline_K)
    size = cfg.phantom_spec().size
    masks, images = sample_pairs(state.models[LESION], state.models[BRAIN], tl, (size, size), args.n, cfg.seed,
                                 args.mode, chunk_size=cfg.chunk_size, jobs=cfg.jobs)
    _save_fields(out, "masks", masks)
    _save_fields(out, "images", images)
    write_manifest(out, "sample-uncond", cfg, {"checkpoint": args.ckpt}, {"n": args.n, "mode": args.mode})
    return {"n": args.n}


def cmd_sample_cond(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    mask = _load_field(args.mask, "mask")
    if mask.ndim != 2 or not is_binary(mask):
        raise ConfigError("--mask must be a single binary (H, W) field")
    state = _load_models(args.ckpt, cfg)
    tl = subsample_timeline(state.schedule, cfg.timeline_K)
    brain = state.models[BRAIN]
    images = map_chunks(lambda idx: sample_conditional(brain, mask, tl, cfg.seed, idx), range(args.n),
                        cfg.chunk_size, cfg.jobs)
    _save_fields(out, "images", images)
    write_manifest(out, "sample-cond", cfg, {"checkpoint": args.ckpt, "mask": args.mask}, {"n": args.n})
    return {"n": args.n}


def cmd_edit(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    sources = _load_stack(args.input)
    inputs = {"checkpoint": args.ckpt, "input": args.input}
    if args.mask:
        masks = _load_stack(args.mask)
        inputs["mask"] = args.mask
        if masks.shape[0] == 1 and sources.shape[0] > 1:
            masks = np.broadcast_to(masks, sources.shape).copy()
    elif args.direction == H2P:
        raise ConfigError("h2p editing needs --mask")
    else:
        masks = np.zeros_like(sources)
    if masks.shape != sources.shape or not is_binary(masks):
        raise ConfigError("--mask must be binary and match the input shape")
    gcfg = cfg.guidance_config()
    state = _load_models(args.ckpt, cfg)
    tl = subsample_timeline(state.schedule, cfg.timeline_K)
    snaps = tuple(int(s) for s in args.snapshots.split(",")) if args.snapshots else ()
    brain = state.models[BRAIN]
    results = {}

    def run(idx):
        results[idx[0]] = edit(brain, sources[idx], masks[idx], args.direction, gcfg, tl, cfg.seed, idx,
                               snapshot_steps=snaps)
        return results[idx[0]].output

    edited = map_chunks(run, range(len(sources)), cfg.chunk_size, cfg.jobs)
    _save_fields(out, "edited", edited)
    parts = [results[k] for k in sorted(results)]
    for step in sorted(parts[0].snapshots):
        save_ubt(out / f"lambda_step{step:04d}.ubt", np.concatenate([r.snapshots[step] for r in parts]))
    record = dict(parts[0].record)
    record["indices"] = list(range(len(sources)))
    record["l1_to_input"] = [l1(o, s) for o, s in zip(edited, sources)]
    record["snapshot_steps"] = sorted(parts[0].snapshots)
    _write_json(out / "edit_record.json", record)
    write_manifest(out, "edit", cfg, inputs, {"direction": args.direction})
    return {"median_l1_to_input": float(np.median(record["l1_to_input"]))}


def cmd_eval(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    gen, ref = _load_stack(args.generated), _load_stack(args.reference)
    feat = FEATURIZERS[cfg.eval["featurizer"]]
    fg, fr = feat(gen), feat(ref)
    test = mmd_permutation_test(fg, fr, cfg.eval["kernel"], n_perm=int(cfg.eval["n_perm"]), seed=cfg.seed)
    report = {
        "featurizer": fg.featurizer,
        "kernel": cfg.eval["kernel"],
        "n_generated": len(gen),
        "n_reference": len(ref),
        "mmd2": mmd2(fg, fr, cfg.eval["kernel"]),
        "mmd_p_value": test.p_value,
        "kid": kid(fg, fr, n_subsets=int(cfg.eval["kid_subsets"]), seed=cfg.seed),
        "frechet": frechet_distance(MomentSummary.from_features(fg), MomentSummary.from_features(fr)),
    }
    if args.paired:
        if gen.shape != ref.shape:
            raise ConfigError("--paired needs equally shaped generated and reference sets")
        report["pairs"] = [{"l1": l1(a, b), "psnr": psnr(a, b), "ssim": ssim(a, b)} for a, b in zip(gen, ref)]
    _write_json(out / "eval_report.json", report)
    write_manifest(out, "eval", cfg, {"generated": args.generated, "reference": args.reference})
    return {"mmd2": report["mmd2"]}


def cmd_ablate(args, cfg: RunConfig) -> dict:
    if bool(args.toggle) == bool(args.sweep):
        raise ConfigError("give exactly one of --toggle or --sweep")
    out = _out_dir(cfg)
    state = _load_models(args.ckpt, cfg)
    brain = state.models[BRAIN]
    gcfg = cfg.guidance_config()
    kw = {"chunk_size": cfg.chunk_size, "jobs": cfg.jobs}
    tl = subsample_timeline(state.schedule, cfg.timeline_K)
    if args.toggle == "onestep":
        n = int(cfg.ablate["n_samples"])
        _, ref = make_triples(int(cfg.dataset["train"]), cfg.phantom_spec(), cfg.lesion_spec(),
                              cfg.dataset["base_seed"], "train")[:2]
        tl_s = subsample_timeline(state.schedule, int(cfg.ablate["sample_K"]))
        result = onestep_ablation(state.models[LESION], brain, tl_s, ref, n, cfg.seed, **kw)
    else:
        cases = heldout_cases(int(cfg.ablate["n_cases"]), cfg.phantom_spec(), cfg.lesion_spec(),
                              cfg.dataset["base_seed"])
        if args.toggle == "acg":
            result = acg_ablation(brain, cases, gcfg, tl, cfg.seed, **kw)
        elif args.toggle == "lcg":
            result = lcg_ablation(brain, cases, gcfg, tl, cfg.seed, **kw)
        else:
            values = [float(v) for v in args.values.split(",")] if args.values else None
            result = guidance_sweep(brain, cases, gcfg, tl, cfg.seed, args.sweep, values, **kw)
    _write_json(out / "ablation.json", result)
    write_manifest(out, "ablate", cfg, {"checkpoint": args.ckpt},
                   {"toggle": args.toggle, "sweep": args.sweep, "values": args.values})
    return {k: v for k, v in result.items() if isinstance(v, (bool, float))}


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    reports = [gradcheck(cfg.seed + s, n_params=args.n_params) for s in range(args.seeds)]
    rows = [{**asdict(r), "passed": r.passed} for r in reports]
    _write_json(out / "gradcheck.json", rows)
    write_manifest(out, "gradcheck", cfg, {})
    if not all(r.passed for r in reports):
        worst = max(reports, key=lambda r: r.max_rel_error)
        raise CheckFailure(f"gradient check failed: rel error {worst.max_rel_error:.3e} at {worst.worst}")
    return {"max_rel_error": max(r.max_rel_error for r in reports)}


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "sample-uncond": cmd_sample_uncond,
    "sample-cond": cmd_sample_cond,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config or a previous run_manifest.json")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel trajectory chunks")
    common.add_argument("--timeline-k", type=int, dest="timeline_k", help="inference timeline length")
    common.add_argument("--compute-dtype", choices=("float32", "float64"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pairdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom dataset")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", parents=[common], help="train both branches")
    p.add_argument("--data", help="dataset directory from `phantom` (default: generate in memory)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("sample-uncond", parents=[common], help="generate (mask, image) pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--mode", choices=(ESTIMATE, PREVIOUS), default=ESTIMATE)

    p = sub.add_parser("sample-cond", parents=[common], help="generate images for a given mask")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--n", type=int, default=1)

    p = sub.add_parser("edit", parents=[common], help="p2h or h2p editing")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--direction", choices=(P2H, H2P), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mask")
    p.add_argument("--snapshots", help="comma-separated timeline positions at which to save guidance weights")
    for name in ("alpha0", "k", "eta", "t_start_frac"):
        p.add_argument(f"--{name.replace('_', '-')}", type=float, dest=name)
    p.add_argument("--no-acg", action="store_true")
    p.add_argument("--no-lcg", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="metric report against a reference set")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--featurizer", choices=sorted(FEATURIZERS))
    p.add_argument("--paired", action="store_true", help="also report per-pair L1/PSNR/SSIM")

    p = sub.add_parser("ablate", parents=[common], help="rerun edits or sampling across settings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--toggle", choices=("acg", "lcg", "onestep"))
    p.add_argument("--sweep", choices=sorted(SWEEP_DEFAULTS))
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--n-cases", type=int)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--n-params", type=int, default=200)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (OSError, EOFError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"command": args.command, "out": cfg.out, **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
