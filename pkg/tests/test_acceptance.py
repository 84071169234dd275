"""Acceptance criteria 1-11, each reporting one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the report; the lines are
printed with capture disabled so they also land in teed logs.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from pairdiff.cli import MANIFEST, main
from pairdiff.denoiser import GaussianOracle
from pairdiff.editing import GuidanceConfig
from pairdiff.experiments import acg_ablation, guidance_sweep, heldout_cases, lcg_ablation, onestep_ablation
from pairdiff.gradcheck import REL_TOL, gradcheck
from pairdiff.numerics import StreamBank, save_ubt
from pairdiff.phantom import LesionSpec, PhantomSpec, make_triple, make_triples, sample_seed
from pairdiff.paired import estimate_from_alpha_bar, reverse_step
from pairdiff.schedule import build_linear_schedule, marginal_noise, subsample_timeline
from pairdiff.trainer import read_loss_log, smoothed

TESTS = Path(__file__).parent
EDIT_K = 300


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, seconds=None, limit=None):
        timing = ""
        if seconds is not None:
            timing = f" [{seconds:.1f}s" + (f" / limit {limit:.0f}s]" if limit else "]")
            ok = ok and (limit is None or seconds < limit)
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}{timing}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def schedule():
    return build_linear_schedule(1024, 1e-4, 0.02)


@pytest.fixture(scope="module")
def edit_setup(trained_state):
    return trained_state.models["brain"], heldout_cases(20), subsample_timeline(trained_state.schedule, EDIT_K)


def test_criterion_01_schedule_exactness(report, schedule):
    start = time.perf_counter()
    mpmath.mp.dps = 40
    acc, worst = mpmath.mpf(1), 0.0
    for t in range(1, 1025):
        acc *= 1 - mpmath.mpf(1e-4) - (mpmath.mpf(0.02) - mpmath.mpf(1e-4)) * (t - 1) / 1023
        worst = max(worst, abs(float((mpmath.mpf(float(schedule.alpha_bar[t])) - acc) / acc)))
    tl = subsample_timeline(schedule, 300)
    retime = np.max(np.abs(np.sqrt(tl.alpha_bar) - np.sqrt(schedule.alpha_bar[tl.steps])))
    chained = np.max(np.abs(np.cumprod(tl.alpha[::-1])[::-1] - tl.alpha_bar))
    ends = schedule.beta[1] == 1e-4 and schedule.beta[1024] == 0.02 and schedule.T == 1024
    ok = ends and worst < 1e-12 and retime == 0.0 and chained < 1e-12
    report(1, ok, f"alpha_bar rel err {worst:.2e}, retimed sqrt mismatch {retime:.1e}, "
                  f"chained retimed alphas {chained:.1e}", time.perf_counter() - start, 1.0)


def test_criterion_02_one_step_identity(report, schedule):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        x0 = rng.uniform(-1, 1, (48, 48))
        t = int(rng.integers(1, 1025))
        eps = rng.standard_normal(x0.shape)
        xt = marginal_noise(schedule, x0, t, eps)
        est = estimate_from_alpha_bar(eps, xt, schedule.alpha_bar[t], clamp=False)
        worst = max(worst, float(np.max(np.abs(est - x0))))
    report(2, worst < 1e-12, f"max |estimate - x0| = {worst:.2e} over 20 draws",
           time.perf_counter() - start, 1.0)


def test_criterion_03_oracle_sampler(report, schedule):
    start = time.perf_counter()
    oracle = GaussianOracle(schedule, 0.3, 0.25)
    n, rows, ok = 10_000, [], True
    for K in (16, 64, 300):
        tl = subsample_timeline(schedule, K)
        y = StreamBank(K, range(n), tag=0).normal((1,))
        noise = StreamBank(K, range(n), tag=1)
        for i in range(K):
            y = reverse_step(oracle, y, None, tl, i, noise)
        mean, var = float(y.mean()), float(y.var())
        ok = ok and abs(mean - 0.3) <= 0.03 and abs(var / 0.25 - 1.0) <= 0.05
        rows.append(f"K={K}: mean {mean:.4f} var {var:.4f}")
    report(3, ok, "; ".join(rows), time.perf_counter() - start, 120.0)


def test_criterion_04_gradients(report):
    start = time.perf_counter()
    results = [gradcheck(seed, n_params=200, h=1e-5) for seed in (1, 2, 3)]
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed and r.n_checked == 200 for r in results)
    report(4, ok, f"max relative error {worst:.2e} (< {REL_TOL:g}) on seeds 1-3",
           time.perf_counter() - start, 120.0)


def test_criterion_05_training_smoke(report, trained_run):
    log = read_loss_log(trained_run["loss_log"])
    total = smoothed(log[:, 1] + log[:, 2], 100)
    per_branch_initial = (log[0, 1], log[0, 2])
    drop = 1.0 - total[-1] / total[0]
    ok = (len(log) == 3000 and drop >= 0.5 and all(0.8 < v < 1.2 for v in per_branch_initial))
    report(5, ok, f"smoothed L {total[0]:.3f} -> {total[-1]:.3f} (drop {drop:.1%}), "
                  f"initial per-branch {per_branch_initial[0]:.3f}/{per_branch_initial[1]:.3f}",
           trained_run["seconds"], 900.0)


def test_criterion_06_acg_ablation(report, edit_setup):
    brain, cases, tl = edit_setup
    start = time.perf_counter()
    res = acg_ablation(brain, cases, GuidanceConfig(), tl, seed=0)
    w, wo = res["with"], res["without"]
    report(6, res["acg_better"],
           f"outside-lesion L1 {w['median_outside_l1']:.4f} vs {wo['median_outside_l1']:.4f}, "
           f"PSNR {w['median_psnr']:.2f} vs {wo['median_psnr']:.2f} dB (with vs without ACG)",
           time.perf_counter() - start, 600.0)


def test_criterion_07_lcg_ablation(report, edit_setup):
    brain, cases, tl = edit_setup
    start = time.perf_counter()
    res = lcg_ablation(brain, cases, GuidanceConfig(), tl, seed=0)
    report(7, res["win_fraction"] >= 0.8,
           f"LCG shift >= no-LCG shift on {res['win_fraction']:.0%} of {len(cases)} cases "
           f"(medians {res['with']['median_inside_shift']:.4f} vs {res['without']['median_inside_shift']:.4f})",
           time.perf_counter() - start, 600.0)


def test_criterion_08_alpha0_sweep(report, edit_setup):
    brain, cases, tl = edit_setup
    start = time.perf_counter()
    res = guidance_sweep(brain, cases, GuidanceConfig(k=0.5), tl, 0, "alpha0", (5.0, 10.0, 20.0, 30.0))
    medians = ", ".join(f"{m:.4f}" for m in res["medians"])
    report(8, res["non_decreasing"], f"median whole-image L1 over alpha0 5/10/20/30: {medians}",
           time.perf_counter() - start, 900.0)


def test_criterion_09_onestep_conditioning(report, trained_state):
    start = time.perf_counter()
    _, reference, _ = make_triples(512, PhantomSpec(), LesionSpec(), 1234, "train")
    tl = subsample_timeline(trained_state.schedule, 100)
    res = onestep_ablation(trained_state.models["lesion"], trained_state.models["brain"], tl, reference, 100, seed=0)
    report(9, res["estimate_better"],
           f"MMD^2 estimate {res['estimate']['mmd2']:.5f} vs previous {res['previous']['mmd2']:.5f} "
           f"(bandwidth {res['bandwidth']:.3f}, 100 samples per mode)", time.perf_counter() - start)


def test_criterion_10_metrics_selftests(report):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(TESTS / "test_metrics.py")], capture_output=True, text=True)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    report(10, proc.returncode == 0, f"metrics suite: {summary}", time.perf_counter() - start, 120.0)


# -- criterion 11 -----------------------------------------------------------------

TINY = {"timeline_K": 8, "dataset": {"train": 8, "test": 4},
        "ablate": {"n_cases": 2, "n_samples": 4, "sample_K": 4}, "eval": {"n_perm": 20, "kid_subsets": 2}}


def _tree(d: Path) -> dict:
    return {str(f.relative_to(d)): f.read_bytes() for f in sorted(d.rglob("*")) if f.is_file()}


def test_criterion_11_reproducibility(report, tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    mask, path, healthy = make_triple(PhantomSpec(), LesionSpec(), sample_seed(1234, "test", 3))
    for name, arr in (("mask", mask), ("path", path), ("healthy", healthy)):
        save_ubt(inputs / f"{name}.ubt", arr)
    save_ubt(inputs / "ref.ubt", np.stack([path, healthy]))

    ckpt = tmp_path / "train_a" / "final.usbc"
    runs = {
        "phantom": ["phantom"],
        "train": ["train", "--steps", "3", "--batch-size", "2"],
        "sample-uncond": ["sample-uncond", "--ckpt", ckpt, "--n", "2", "--seed", "7"],
        "sample-cond": ["sample-cond", "--ckpt", ckpt, "--mask", inputs / "mask.ubt", "--n", "2"],
        "edit-p2h": ["edit", "--ckpt", ckpt, "--direction", "p2h", "--input", inputs / "path.ubt", "--snapshots", "1"],
        "edit-h2p": ["edit", "--ckpt", ckpt, "--direction", "h2p", "--input", inputs / "healthy.ubt",
                     "--mask", inputs / "mask.ubt", "--snapshots", "1"],
        "eval": ["eval", "--generated", tmp_path / "sample-uncond_a" / "images.ubt",
                 "--reference", inputs / "ref.ubt", "--paired"],
        "ablate-acg": ["ablate", "--ckpt", ckpt, "--toggle", "acg"],
        "ablate-onestep": ["ablate", "--ckpt", ckpt, "--toggle", "onestep"],
        "ablate-sweep": ["ablate", "--ckpt", ckpt, "--sweep", "k", "--values", "0.1,2"],
        "gradcheck": ["gradcheck", "--seeds", "1", "--n-params", "10"],
    }
    start = time.perf_counter()
    mismatched = []
    for name, args in runs.items():
        first, second = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        assert main([str(a) for a in args] + ["--config", str(cfg), "--out", str(first)]) == 0, name
        assert main([str(a) for a in args] + ["--config", str(first / MANIFEST), "--out", str(second)]) == 0, name
        if _tree(first) != _tree(second):
            mismatched.append(name)
    report(11, not mismatched,
           f"{len(runs)} runs across 8 subcommands, rerun from manifest; mismatched: {mismatched or 'none'}",
           time.perf_counter() - start)
