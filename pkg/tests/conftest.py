"""Shared fixtures: dataset discovery and session-scoped trained models.

Heavy artifacts (classifier, digit generator, block cipher) are loaded
from the checkpoint directory when present and trained once otherwise,
so the first full run pays the training cost and later runs are fast.
Set GSK_ARTIFACTS_DIR / GSK_DATA_DIR to redirect.
"""

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from gsk import artifacts_io, cli, evaluation

REPO_ROOT = Path(__file__).resolve().parent.parent

torch.set_num_threads(max(1, os.cpu_count() or 1))


def _dataset_root() -> Path:
    return Path(os.environ.get("GSK_DATA_DIR", REPO_ROOT / "data" / "mnist"))


def _artifacts_root() -> Path:
    return Path(os.environ.get("GSK_ARTIFACTS_DIR", REPO_ROOT / "artifacts"))


def _have_mnist() -> bool:
    root = _dataset_root()
    return any((root / f"{base}{ext}").exists()
               for base in ("train-images-idx3-ubyte",)
               for ext in (".gz", ""))


@pytest.fixture(scope="session")
def data_dir() -> Path:
    if not _have_mnist():
        pytest.skip("MNIST not present; run scripts/fetch_mnist.py first")
    return _dataset_root()


@pytest.fixture(scope="session")
def mnist_train(data_dir):
    return artifacts_io.load_mnist(data_dir, "train")


@pytest.fixture(scope="session")
def mnist_test(data_dir):
    return artifacts_io.load_mnist(data_dir, "test")


@pytest.fixture(scope="session")
def artifacts_dir() -> Path:
    root = _artifacts_root()
    root.mkdir(parents=True, exist_ok=True)
    return root


def _ensure_checkpoint(artifacts_dir: Path, subsystem: str) -> Path:
    path = artifacts_dir / cli.CHECKPOINT_NAMES[subsystem]
    if path.exists():
        return path
    if subsystem != "cover-gan" and not _have_mnist():
        pytest.skip(f"{subsystem} checkpoint missing and MNIST not present")
    result = cli.cmd_train(subsystem, None, str(artifacts_dir),
                           data_dir=str(_dataset_root()))
    assert result.exit_code == 0, f"training {subsystem} failed: {result.summary}"
    return path


@pytest.fixture(scope="session")
def classifier_model(artifacts_dir):
    path = _ensure_checkpoint(artifacts_dir, "classifier")
    return artifacts_io.load_checkpoint(path, "classifier")


@pytest.fixture(scope="session")
def message_model(artifacts_dir, classifier_model):
    # classifier first: message-gan training calibrates its code table with it
    path = _ensure_checkpoint(artifacts_dir, "message-gan")
    return artifacts_io.load_checkpoint(path, "message_gan")


@pytest.fixture(scope="session")
def cover_model(artifacts_dir):
    path = _ensure_checkpoint(artifacts_dir, "cover-gan")
    return artifacts_io.load_checkpoint(path, "cover_gan")


@pytest.fixture(scope="session")
def models(cover_model, message_model, classifier_model):
    return evaluation.TrainedModels(cover=cover_model, message=message_model,
                                    classifier=classifier_model)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
