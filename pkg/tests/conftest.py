import numpy as np
import pytest

from cnilab.tensor import Tensor, backward, finite_difference_grad


def rel_err(a, b):
    """Relative error between two gradient arrays, safe at zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def analytic_grad(f, x):
    xt = Tensor(x, requires_grad=True)
    backward(f(xt))
    return xt.grad.copy()


def grad_check(f, x, h=1e-6):
    """(analytic, numeric) gradient of scalar ``f`` at ``x``."""
    return analytic_grad(f, x), finite_difference_grad(f, x, h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    """Small, easily separable 4-class problem: (train, test), flat inputs."""
    from cnilab.data import gen_synthetic

    common = dict(classes=4, dim=16, separation=1.0, seed=3, std=0.1)
    return gen_synthetic(per_class=60, split="train", **common), gen_synthetic(per_class=40, split="test", **common)


def _fit(blobs, defense, rank=0, epochs=15):
    from cnilab.nn import apply_defense, build_mlp
    from cnilab.training import TrainConfig, train

    train_set, test_set = blobs
    model = apply_defense(build_mlp(16, [32], 4, seed=0), defense, rank, seed=0)
    cfg = TrainConfig(epochs=epochs, batch_size=32, lr=0.01, loss_mix=0.0 if defense == "none" else 0.5, seed=0)
    train(model, train_set, test_set, cfg)
    return model


@pytest.fixture(scope="session")
def clean_model(blobs):
    """Noiseless MLP trained without attacks."""
    return _fit(blobs, "none")


@pytest.fixture(scope="session")
def noisy_model(blobs):
    """Rank-2 weight-noise MLP trained adversarially."""
    return _fit(blobs, "cni-w", rank=2)


SMALL_CONFIG = {
    "data": {"classes": 4, "dim": 16, "per_class": 40, "val_per_class": 15, "test_per_class": 25},
    "model": {"hidden": [24]},
    "train": {"epochs": 4, "batch_size": 32},
    "eval": {"n_noise_draws": 2},
    "blackbox": {"n_samples": 4, "k": 2, "max_examples": 20},
}


@pytest.fixture
def small_config():
    import copy

    return copy.deepcopy(SMALL_CONFIG)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}")
