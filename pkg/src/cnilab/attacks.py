"""Untargeted l-infinity attacks against (possibly randomized) classifiers.

White-box attacks take the sign of the input gradient of the mean
cross-entropy.  Against a noisy model every gradient evaluation draws fresh
noise; ``eot_samples > 1`` averages the gradient over several draws.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .exceptions import ContractError, DimensionError
from .rng import SeedStreams, as_streams
from .tensor import Tensor, backward, softmax, softmax_cross_entropy


@dataclass
class AttackConfig:
    """l-inf attack budget.  ``step=None`` means ``2.5 * epsilon / k``."""

    epsilon: float = 8 / 255
    k: int = 7
    step: float | None = None
    random_start: bool = True
    eot_samples: int = 1
    input_bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.input_bounds = tuple(float(b) for b in self.input_bounds)
        self.validate()

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if self.step is not None and self.step <= 0:
            raise ContractError(f"step must be > 0, got {self.step}")
        if self.eot_samples < 1:
            raise ContractError(f"eot_samples must be >= 1, got {self.eot_samples}")
        lo, hi = self.input_bounds
        if lo > hi:
            raise ContractError(f"input bounds reversed: {self.input_bounds}")

    @property
    def step_size(self) -> float:
        return self.step if self.step is not None else 2.5 * self.epsilon / self.k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_bounds"] = list(self.input_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**{k: (tuple(v) if k == "input_bounds" else v) for k, v in d.items()})


def project_linf(x, x0, epsilon: float, bounds=(0.0, 1.0)):
    """Clip into the epsilon-ball around ``x0``, then into ``bounds``."""
    as_tensor = isinstance(x, Tensor)
    xa = x.data if as_tensor else np.asarray(x, dtype=np.float64)
    x0a = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    if xa.shape != x0a.shape:
        raise DimensionError(f"project_linf: shape mismatch {xa.shape} vs {x0a.shape}")
    out = np.clip(xa, x0a - epsilon, x0a + epsilon)
    out = np.clip(out, bounds[0], bounds[1])
    return Tensor(out) if as_tensor else out


def input_gradient(model, x, y, streams: SeedStreams, eot_samples: int = 1, return_draws: bool = False):
    """Gradient of the mean cross-entropy wrt ``x``, averaged over noise draws.

    Returns ``(grad, mean_loss)``, plus the list of per-draw gradients when
    ``return_draws`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    total = np.zeros_like(x)
    losses = []
    draws = []
    with model.frozen():
        for _ in range(eot_samples):
            xt = Tensor(x, requires_grad=True)
            loss = softmax_cross_entropy(model.forward(xt, streams), y)
            backward(loss)
            total += xt.grad
            losses.append(loss.item())
            if return_draws:
                draws.append(xt.grad.copy())
    grad = total / eot_samples
    if return_draws:
        return grad, float(np.mean(losses)), draws
    return grad, float(np.mean(losses))


def fgsm(model, x, y, epsilon: float, bounds=(0.0, 1.0), eot_samples: int = 1, rng=None) -> np.ndarray:
    """One signed-gradient step of size ``epsilon``."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    streams = as_streams(rng)
    grad, _ = input_gradient(model, x, y, streams, eot_samples)
    return np.clip(x + epsilon * np.sign(grad), bounds[0], bounds[1])


def pgd(model, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Projected signed-gradient ascent for ``cfg.k`` iterations."""
    cfg.validate()
    x0 = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    if eps == 0:
        return x0.copy()
    streams = as_streams(rng)
    step = cfg.step_size
    xa = x0
    if cfg.random_start:
        start = streams.stream("attack/random_start").uniform(-eps, eps, size=x0.shape)
        xa = project_linf(x0 + start, x0, eps, cfg.input_bounds)
    for _ in range(cfg.k):
        grad, _ = input_gradient(model, xa, y, streams, cfg.eot_samples)
        xa = project_linf(xa + step * np.sign(grad), x0, eps, cfg.input_bounds)
    return xa


def transfer_attack(source_model, cfg: AttackConfig, dataset: Dataset, rng=None, batch_size: int = 256) -> Dataset:
    """PGD against ``source_model``; the result can be scored on any target."""
    streams = as_streams(rng)
    adv = np.empty_like(dataset.inputs)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        adv[sl] = pgd(source_model, dataset.inputs[sl], dataset.labels[sl], cfg, streams)
    prov = {
        "source": "transfer",
        "source_model": model_digest(source_model),
        "attack": cfg.to_dict(),
        "clean": dataset.provenance,
    }
    return Dataset(adv, dataset.labels.copy(), dataset.n_classes, dataset.split, prov)


def model_digest(model) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(model.spec(), sort_keys=True).encode())
    for name, arr in model.state_arrays().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Black-box
# ---------------------------------------------------------------------------

class BlackBoxModel:
    """Query-only access: a batch in, class probabilities out."""

    def __init__(self, query_fn):
        self._query_fn = query_fn
        self.queries = 0

    def query(self, x) -> np.ndarray:
        self.queries += 1
        return np.asarray(self._query_fn(np.asarray(x, dtype=np.float64)))

    @classmethod
    def from_model(cls, model, rng=None) -> "BlackBoxModel":
        streams = as_streams(rng)

        def query(x):
            with model.frozen():
                return softmax(model.forward(Tensor(x), streams).data)

        return cls(query)


def cross_entropy_from_probs(probs, y) -> np.ndarray:
    """Per-sample negative log-likelihood of the true class."""
    p = probs[np.arange(len(y)), np.asarray(y)]
    return -np.log(np.maximum(p, np.finfo(np.float64).tiny))


def nes_gradient_estimate(bb: BlackBoxModel, x, y, sigma: float, n_samples: int, rng, loss=None) -> np.ndarray:
    """Antithetic Gaussian-smoothing gradient estimate, one per sample.

    Each of the ``n_samples`` directions ``u`` is evaluated as a single query
    batch holding both ``x + sigma*u`` and ``x - sigma*u``, and the estimate is
    ``sum (L+ - L-) u / (2 sigma n_samples)``.
    """
    if n_samples < 2 or n_samples % 2:
        raise ContractError(f"n_samples must be a positive even number, got {n_samples}")
    if sigma <= 0:
        raise ContractError(f"sigma must be > 0, got {sigma}")
    loss = loss or cross_entropy_from_probs
    gen = rng.stream("attack/nes") if isinstance(rng, SeedStreams) else rng
    x = np.asarray(x, dtype=np.float64)
    bsz = x.shape[0]
    bcast = (bsz,) + (1,) * (x.ndim - 1)
    g = np.zeros_like(x)
    for _ in range(n_samples):
        u = gen.standard_normal(x.shape)
        out = bb.query(np.concatenate([x + sigma * u, x - sigma * u]))
        diff = loss(out[:bsz], y) - loss(out[bsz:], y)
        g += diff.reshape(bcast) * u
    return g / (2.0 * sigma * n_samples)


def blackbox_attack(bb: BlackBoxModel, x, y, cfg: AttackConfig, sigma: float = 0.001, n_samples: int = 50, rng=None):
    """PGD driven by NES gradient estimates instead of true gradients."""
    cfg.validate()
    x0 = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    if eps == 0:
        return x0.copy()
    streams = as_streams(rng)
    xa = x0
    if cfg.random_start:
        start = streams.stream("attack/random_start").uniform(-eps, eps, size=x0.shape)
        xa = project_linf(x0 + start, x0, eps, cfg.input_bounds)
    for _ in range(cfg.k):
        grad = nes_gradient_estimate(bb, xa, y, sigma, n_samples, streams)
        xa = project_linf(xa + cfg.step_size * np.sign(grad), x0, eps, cfg.input_bounds)
    return xa


def random_sign_noise(x, epsilon: float, bounds=(0.0, 1.0), rng=None) -> np.ndarray:
    """Baseline: a random corner of the epsilon-ball."""
    streams = as_streams(rng)
    x = np.asarray(x, dtype=np.float64)
    signs = streams.stream("attack/random_sign").choice([-1.0, 1.0], size=x.shape)
    return np.clip(x + epsilon * signs, bounds[0], bounds[1])
