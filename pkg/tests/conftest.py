import os
from pathlib import Path

import numpy as np
import pytest

from capsparse.capsnet import Geometry

MNIST_DIR = Path(os.environ.get("CAPSPARSE_MNIST", Path.home() / "data" / "mnist"))


def has_mnist() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte.gz").exists() or (MNIST_DIR / "train-images-idx3-ubyte").exists()


needs_mnist = pytest.mark.skipif(not has_mnist(), reason=f"MNIST IDX files not found under {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_geometry():
    """canvas 14 with 5x5 kernels: 10x10 after conv1, 3x3 primary grid."""
    return Geometry(canvas=14, conv_channels=3, conv_kernel=5, primary_kernel=5, primary_stride=2,
                    n_primary=2, primary_dim=3, n_latent=3, latent_dim=4, decoder_widths=(5,),
                    routing_iterations=3)


def tiny_config(tmp_path, mode="sparse", **overrides):
    from capsparse.config import EvalSizes, ExperimentConfig
    from capsparse.sparsity import SparsityConfig

    geo = Geometry(canvas=14, conv_channels=3, conv_kernel=5, primary_kernel=5, primary_stride=2,
                   n_primary=2, primary_dim=3, n_latent=4, latent_dim=4, decoder_widths=(16,))
    base = dict(geometry=geo, sparsity=SparsityConfig(n_latent=4, gamma=4.0, period=5), mode=mode, batch_size=8,
                steps=20, train_subset=64, log_every=5, out_dir=str(tmp_path / f"run_{mode}"),
                eval=EvalSizes(svm_train=40, mnist_test=40, affine_train=40, affine_test=40, diagnostics=40))
    base.update(overrides)
    return ExperimentConfig(**base)


def blob_images(n, canvas=14, seed=0):
    """Small synthetic digits: a bright rectangle whose position and shape encode the label."""
    from capsparse.data import LabeledImageSet

    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, n)
    imgs = np.zeros((n, canvas, canvas), np.float32)
    for i, lab in enumerate(labels):
        y, x = r.integers(1, canvas - 7, 2)
        h, w = [(6, 2), (2, 6), (4, 4)][lab]
        imgs[i, y:y + h, x:x + w] = r.uniform(0.6, 1.0)
    return LabeledImageSet(imgs, labels.astype(np.int64), {"kind": "synthetic", "seed": seed},
                           np.array([f"s{seed}:{i}" for i in range(n)]))


# acceptance bookkeeping: one line per criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
