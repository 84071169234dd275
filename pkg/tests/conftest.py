"""Shared fixtures.

``trained_run`` trains the default toy configuration (48x48 phantoms, 512
triples, 3000 steps) once per source tree. The checkpoint, loss log and
measured wall time are cached under pytest's cache directory keyed by a hash
of the package sources and training config, so later sessions reuse them.
Delete ``.pytest_cache`` (or run ``pytest --cache-clear``) to retrain.
"""

import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import pytest

import pairdiff
from pairdiff.trainer import TrainConfig, load_checkpoint, train

SRC = Path(pairdiff.__file__).parent
TRAINING_MODULES = ("numerics.py", "schedule.py", "phantom.py", "denoiser.py", "paired.py", "trainer.py")


def acceptance_train_config() -> TrainConfig:
    return TrainConfig(steps=3000, batch_size=4, lr=1e-3, seed=0, n_train=512, data_seed=1234)


def _source_key(config: TrainConfig) -> str:
    h = hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode())
    for f in sorted(SRC.glob("*.py")):
        if f.name in TRAINING_MODULES:
            h.update(f.name.encode() + f.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_run(request):
    config = acceptance_train_config()
    key = _source_key(config)
    root = Path(request.config.cache.mkdir(f"pairdiff-train-{key}"))
    info_path = root / "timing.json"
    if not info_path.exists():
        start = time.perf_counter()
        train(config, root)
        elapsed = time.perf_counter() - start
        info_path.write_text(json.dumps({"seconds": elapsed, "key": key}))
    info = json.loads(info_path.read_text())
    return {"dir": root, "checkpoint": root / "final.usbc", "loss_log": root / "loss.csv",
            "seconds": info["seconds"], "config": config}


@pytest.fixture(scope="session")
def trained_state(trained_run):
    return load_checkpoint(trained_run["checkpoint"], compute_dtype="float32")
