import gzip
import io
import os
from pathlib import Path

import numpy as np
import pytest

from pfcluster.data import write_idx
from pfcluster.model import DEFAULT_CHECKPOINT as SHIPPED_CHECKPOINT
from pfcluster.model import ModelConfig, PfnModel, load_checkpoint

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_model():
    cfg = ModelConfig(d_max=4, c_max=5, layers=2, heads=2, d_model=16, d_ff=32)
    return PfnModel.init(cfg, seed=3)


@pytest.fixture(scope="session")
def trained_model():
    if not SHIPPED_CHECKPOINT.exists():
        pytest.skip("shipped checkpoint missing; run `pfc train` first")
    return load_checkpoint(SHIPPED_CHECKPOINT)


def _mnist_from_mlxtend(dest: Path) -> bool:
    """Write the 5000-sample MNIST subset bundled with mlxtend as IDX files."""
    try:
        import mlxtend
    except ImportError:
        return False
    path = Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        return False
    raw = np.loadtxt(io.BytesIO(gzip.decompress(path.read_bytes())), delimiter=",", dtype=np.int64)
    write_idx(dest / "mnist5k-images-idx3-ubyte", raw[:, :-1].reshape(-1, 28, 28).astype(np.uint8))
    write_idx(dest / "mnist5k-labels-idx1-ubyte", raw[:, -1].astype(np.uint8))
    return True


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Directory with an MNIST idx pair: $PFC_MNIST_DIR, else mlxtend's bundled subset."""
    env = os.environ.get("PFC_MNIST_DIR")
    if env:
        return Path(env)
    dest = tmp_path_factory.mktemp("mnist")
    if not _mnist_from_mlxtend(dest):
        pytest.skip("no MNIST files: set PFC_MNIST_DIR or install mlxtend")
    return dest
