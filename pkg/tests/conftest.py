import os

import numpy as np
import pytest

from mbinception.data import write_idx

# Real dataset files are looked up under $MBINCEPTION_DATA/<name>, falling back to /root/data/<name>.
DATA_HOME = os.environ.get("MBINCEPTION_DATA", "/root/data")

REQUIRED = {
    "mnist": "train-images-idx3-ubyte",
    "fashion_mnist": "train-images-idx3-ubyte",
    "cifar10": "data_batch_1.bin",
    "cifar100": "train.bin",
}


def dataset_root(name):
    root = os.path.join(DATA_HOME, name)
    probe = os.path.join(root, REQUIRED[name])
    if os.path.exists(probe) or os.path.exists(probe + ".gz"):
        return root
    return None


def require_dataset(name):
    root = dataset_root(name)
    if root is None:
        pytest.skip(f"{name} files not found under {os.path.join(DATA_HOME, name)} (set MBINCEPTION_DATA)")
    return root


def write_synthetic_mnist(root, n_train=300, n_test=60, seed=0):
    """Learnable IDX fixture: class c lights a 6x6 patch whose position depends on c."""
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = np.arange(n) % 10
        rng.shuffle(labels)
        pixels = rng.integers(0, 40, (n, 28, 28)).astype(np.uint8)
        for i, c in enumerate(labels):
            r, col = 2 + 5 * (c // 4), 2 + 6 * (c % 4)
            pixels[i, r : r + 6, col : col + 6] = 255
        write_idx(os.path.join(root, f"{prefix}-images-idx3-ubyte"),
                  os.path.join(root, f"{prefix}-labels-idx1-ubyte"), pixels, labels)
    return root


@pytest.fixture(scope="session")
def synthetic_mnist(tmp_path_factory):
    return write_synthetic_mnist(str(tmp_path_factory.mktemp("data") / "mnist"))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def record_acceptance(number, title, status, detail):
    line = f"criterion {number} {title}: {status} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
