import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from fpalab.checkpoint import load_checkpoint
from fpalab.data import load_dataset, write_mnist_subset
from fpalab.harness import DEFAULT_TRAINING, train_zoo
from fpalab.models import ArchSpec, build_model, zoo_specs

ZOO_SEED = 0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return ArchSpec("ConvNet", "tiny", in_channels=1, image_size=8, widths=(4, 4, 6, 6, 6),
                    strides=(1, 1, 2, 1, 1), pools=(1, 1, 1, 1, 1), residual=True, head="gap")


@pytest.fixture
def tiny_model(tiny_spec):
    return build_model(tiny_spec, 7)


@pytest.fixture(scope="session")
def mnist_dir(request):
    root = Path(request.config.cache.mkdir("fpalab_mnist"))
    if not (root / "t10k-labels-idx1-ubyte").exists():
        write_mnist_subset(root)
    return root


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return load_dataset(mnist_dir, "IDX")


def _zoo_key() -> str:
    blob = json.dumps({"seed": ZOO_SEED, "training": DEFAULT_TRAINING,
                       "specs": {k: v.to_dict() for k, v in zoo_specs().items()}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def zoo_dir(request, mnist):
    """Checkpoints of the trained zoo; trained once and cached across sessions."""
    root = Path(request.config.cache.mkdir(f"fpalab_zoo_{_zoo_key()}"))
    missing = [n for n in zoo_specs() if not (root / f"{n}.ckpt").exists()]
    if missing:
        train_zoo(mnist, root, ZOO_SEED, names=missing)
    return root


@pytest.fixture(scope="session")
def zoo(zoo_dir):
    return {n: load_checkpoint(zoo_dir / f"{n}.ckpt") for n in zoo_specs()}
