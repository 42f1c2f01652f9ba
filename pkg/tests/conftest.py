from pathlib import Path

import numpy as np
import pytest

from dynchan import tensor as T
from dynchan.data import load_dataset, normalize

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def project_to_scalar(out, seed=0):
    """Contract an op output with fixed random weights so every entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(T.mul(out, T.Tensor(w)))


def max_rel_error(a, b):
    """max |a - b| scaled by the larger of the two max-norms."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-10)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradcheck(fn, arrays, eps=1e-5, seed=0):
    """Worst relative error between autodiff and central differences over all inputs.

    ``fn`` maps Tensors to a Tensor; it is contracted to a scalar with fixed
    random weights.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = project_to_scalar(fn(*tensors), seed)
    T.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(_, i=i):
            with T.no_grad():
                ts = [T.Tensor(tt.data) for tt in tensors]
                return project_to_scalar(fn(*ts), seed).item()
        numeric = T.finite_diff_grad(f, t.data, eps)
        worst = max(worst, max_rel_error(t.grad, numeric))
    return worst


@pytest.fixture(scope="session")
def mnist():
    """Normalised (train, test) of the bundled 5000-image MNIST subset, float32."""
    train = load_dataset("mnist5k", "train", DATA_DIR)
    test = load_dataset("mnist5k", "test", DATA_DIR)
    train_n = normalize(train)
    return train_n, normalize(test, train_n.mean, train_n.std)


@pytest.fixture(scope="session")
def mnist64():
    train = load_dataset("mnist5k", "train", DATA_DIR)
    test = load_dataset("mnist5k", "test", DATA_DIR)
    train_n = normalize(train, dtype=np.float64)
    return train_n, normalize(test, train_n.mean, train_n.std, dtype=np.float64)


ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail=""):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    line = f"ACCEPTANCE {number:<3} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
