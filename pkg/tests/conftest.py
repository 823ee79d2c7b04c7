import hashlib
from pathlib import Path

import numpy as np
import pytest

import compact_nmt
from compact_nmt.data import SyntheticTaskConfig, generate_synthetic
from compact_nmt.model import ModelConfig, init_params
from compact_nmt.persistence import load_checkpoint, save_checkpoint
from compact_nmt.train import train_baseline

# desk-scale model used by the experiment-style tests
DESK_MODEL = dict(d_model=64, enc_layers=2, dec_layers=1, enc_filter=128, heads=4,
                  max_len=32, dropout=0.1)
DESK_TRAINING = dict(epochs=16, lr=2e-3, batch_tokens=4000, eps_ls=0.1, seed=0)


def tiny_config(**kw) -> ModelConfig:
    base = dict(src_vocab=12, tgt_vocab=12, d_model=8, enc_layers=3, dec_layers=3,
                enc_filter=16, heads=2, max_len=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    config = tiny_config()
    return config, init_params(config, seed=3)


@pytest.fixture(scope="session")
def desk_task():
    return generate_synthetic(SyntheticTaskConfig())


def _code_fingerprint() -> str:
    pkg = Path(compact_nmt.__file__).parent
    h = hashlib.sha256()
    for name in ("tensor.py", "model.py", "train.py", "data.py", "persistence.py"):
        h.update((pkg / name).read_bytes())
    h.update(repr(sorted(DESK_MODEL.items()) + sorted(DESK_TRAINING.items())).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_baseline(desk_task, request):
    """Baseline trained on the default synthetic task, cached across runs."""
    cache_dir = Path(request.config.cache.mkdir("compact_nmt"))
    path = cache_dir / f"desk-{_code_fingerprint()}.nmtb"
    if not path.exists():
        config = ModelConfig(len(desk_task.src_vocab), len(desk_task.tgt_vocab), **DESK_MODEL)
        params = train_baseline(desk_task.baseline, config, **DESK_TRAINING)
        save_checkpoint(path, params, config)
    return load_checkpoint(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance verdict lines

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
