import numpy as np
import pytest

from spikemlp.config import NetworkConfig, RunConfig
from spikemlp.data import SyntheticSpec, make_synthetic
from spikemlp.network import Network
from spikemlp.tensor import Tensor, backward, new_tape, no_grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error of ``a`` against the reference ``b``."""
    denom = max(np.linalg.norm(b), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, tensors, eps: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps nothing to an output Tensor; ``tensors`` are leaves (Tensor or
    Parameter) read by ``fn``. The scalar probed is sum(out * R) for a fixed
    random R, so every output element takes part.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    new_tape()
    out = fn()
    R = np.random.default_rng(seed).standard_normal(out.shape)
    backward((out * Tensor(R)).sum())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            with no_grad():
                flat[i] = old + eps
                hi = float((fn().data * R).sum())
                flat[i] = old - eps
                lo = float((fn().data * R).sum())
            flat[i] = old
            numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


TINY = NetworkConfig(c1=12, stage_layers=(1, 1), img_size=(32, 32), num_classes=2, T=4)


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(num_classes=2, size=32, n_train=512, n_test=64)
    return make_synthetic(spec), make_synthetic(spec, split="test")


@pytest.fixture(scope="session")
def trained_tiny(tiny_data):
    """Tiny network after one epoch on synthetic blobs (running BN stats are meaningful)."""
    from spikemlp.training import train_epochs
    net = Network(TINY)
    train_epochs(net, RunConfig(network=TINY, epochs=1, batch_size=16), tiny_data[0])
    return net.eval()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
